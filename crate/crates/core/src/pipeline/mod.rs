//! Orchestration: prior training, few-shot enrollment, driving and colour
//! correction.

mod chain;
mod color;
mod drive;
mod enroll;
mod train;

pub use chain::{ChainPass, SplatChain, StepOutput};
pub use color::{fit_color_affine, ColorAffine};
pub use drive::{drive, Avatar, DriveFrame, DriveManifest};
pub use enroll::{
    enroll, frame_bundle, frozen_digest, EnrollConfig, EnrollLog, EnrollView, EnrollmentResult, Provenance,
    COARSE_LEVELS, ENROLLMENT_FORMAT, FINE_LEVELS,
};
pub use train::{
    train_prior, Prior, StepLog, TrainConfig, Trainer, CHECKPOINT_DIR, CHECKPOINT_FORMAT, LATEST_CHECKPOINT, TRAIN_LOG,
};

use crate::error::{Error, Result};
use crate::generator::identity_input;
use crate::generator::expression_input;
use crate::image::Image;
use crate::nn::Graph;
use crate::synthetic::{CameraRole, LoadedDataset};

/// Prior reconstruction of a dataset frame seen from `camera`, conditioned
/// on the subject's all-views (or frontal) identity bake.
pub fn reconstruct(
    prior: &Prior,
    data: &LoadedDataset,
    subject: usize,
    sequence: usize,
    frame: usize,
    camera: usize,
    all_views: bool,
) -> Result<Image> {
    let s = data.subjects.get(subject).ok_or_else(|| Error::InvalidInput(format!("no subject {subject}")))?;
    let bundle = s.bundle(&data.chart, sequence, frame, all_views, prior.config.mouth_conditioning);
    let gen = &prior.generator;
    let mut g = Graph::<f32>::new();
    let id = g.input(identity_input(&bundle));
    let exp = g.input(expression_input(&bundle, gen.config.offset_scale));
    let raw = gen.forward(&mut g, id, exp)?;
    let chain = SplatChain::new(&data.model, &data.chart, gen.config.activation);
    let params = &s.sequences[sequence].params[frame];
    let pass = chain.forward(&g.value(raw).data, chain.transports(params)?, &data.cameras[camera])?;
    Ok(pass.rendered.image)
}

/// The subject's neutral captures from the given cameras (training cameras
/// when empty) as enrollment views.
pub fn neutral_views(data: &LoadedDataset, subject: usize, cameras: &[usize]) -> Result<Vec<EnrollView>> {
    let s = data.subjects.get(subject).ok_or_else(|| Error::InvalidInput(format!("no subject {subject}")))?;
    let cams = if cameras.is_empty() { data.camera_indices(CameraRole::Train) } else { cameras.to_vec() };
    let params = s.neutral_params(&data.model);
    cams.iter()
        .map(|&c| {
            let image = s.neutral.get(c).ok_or_else(|| Error::InvalidInput(format!("no neutral frame for camera {c}")))?;
            Ok(EnrollView { image: image.image(), params: params.clone(), camera: data.cameras[c].clone() })
        })
        .collect()
}

/// A dataset sequence as driving frames seen from `camera`.
pub fn sequence_frames(data: &LoadedDataset, subject: usize, sequence: usize, camera: usize) -> Result<Vec<DriveFrame>> {
    let s = data.subjects.get(subject).ok_or_else(|| Error::InvalidInput(format!("no subject {subject}")))?;
    let q = s.sequences.get(sequence).ok_or_else(|| Error::InvalidInput(format!("no sequence {sequence}")))?;
    Ok((0..q.len())
        .map(|f| DriveFrame { image: Some(q.frames[f][camera].image()), params: Some(q.params[f].clone()) })
        .collect())
}
