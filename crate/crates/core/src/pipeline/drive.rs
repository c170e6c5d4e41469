use serde::{Deserialize, Serialize};

use super::chain::SplatChain;
use super::enroll::{frame_bundle, EnrollmentResult};
use super::train::Prior;
use crate::conditioning::UvBake;
use crate::error::{Error, Result};
use crate::generator::{expression_input, Generator, LEVELS};
use crate::head_model::{FlameParams, HeadModel, UvChart};
use crate::image::Image;
use crate::nn::{Graph, Var};
use crate::render::Camera;

/// One driving frame: the monocular image (for `M_mouth`) and its tracking.
#[derive(Clone, Debug)]
pub struct DriveFrame {
    pub image: Option<Image>,
    pub params: Option<FlameParams>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriveManifest {
    pub frames: usize,
    pub rendered: Vec<usize>,
    /// Frames skipped for lack of a tracking.
    pub skipped: Vec<usize>,
}

/// A read-only enrolled avatar ready to render frames.
pub struct Avatar<'a> {
    pub generator: Generator<f32>,
    pub enrollment: &'a EnrollmentResult,
    pub mouth_conditioning: bool,
    chain: SplatChain<'a>,
    model: &'a HeadModel,
    chart: &'a UvChart,
    blank_identity: UvBake,
}

impl<'a> Avatar<'a> {
    pub fn new(prior: &Prior, enrollment: &'a EnrollmentResult, model: &'a HeadModel, chart: &'a UvChart) -> Result<Self> {
        let generator = enrollment.generator(prior);
        let shapes = generator.config.level_shapes();
        if enrollment.features.len() != LEVELS {
            return Err(Error::Shape(format!("enrollment has {} feature levels", enrollment.features.len())));
        }
        for (f, &(c, side)) in enrollment.features.iter().zip(&shapes) {
            if f.shape != [1, c, side, side] {
                return Err(Error::Shape(format!("enrolled feature map {:?}, expected [1, {c}, {side}, {side}]", f.shape)));
            }
        }
        let chain = SplatChain::new(model, chart, generator.config.activation);
        let r = chart.resolution;
        Ok(Avatar {
            generator,
            enrollment,
            mouth_conditioning: prior.config.mouth_conditioning,
            chain,
            model,
            chart,
            blank_identity: UvBake { texture: Image::new(r, r, 3), valid: vec![false; r * r] },
        })
    }

    /// Raw parameter map for one driving frame.
    pub fn decode(&self, frame: Option<&Image>, params: &FlameParams, driving_camera: &Camera) -> Result<Vec<f32>> {
        let bundle = frame_bundle(
            &self.blank_identity,
            frame,
            params,
            driving_camera,
            self.mouth_conditioning,
            self.model,
            self.chart,
        )?;
        let mut g = Graph::<f32>::new();
        let e = g.input(expression_input(&bundle, self.generator.config.offset_scale));
        let f_exp = self.generator.encode_expression(&mut g, e)?;
        let f_id: Vec<Var> = self.enrollment.features.iter().map(|t| g.input(t.clone())).collect();
        let raw = self.generator.decode(&mut g, &f_id, &f_exp)?;
        Ok(g.value(raw).data.clone())
    }

    /// Renders one frame from `render_camera`, colour-corrected.
    pub fn render_frame(
        &self,
        frame: Option<&Image>,
        params: &FlameParams,
        driving_camera: &Camera,
        render_camera: &Camera,
    ) -> Result<Image> {
        let raw = self.decode(frame, params, driving_camera)?;
        let pass = self.chain.forward(&raw, self.chain.transports(params)?, render_camera)?;
        Ok(self.enrollment.color.apply(&pass.rendered.image))
    }
}

/// Drives an enrolled avatar: every frame is decoded, posed and rendered
/// independently. Frames without a tracking are skipped (with a warning) and
/// listed in the manifest.
pub fn drive(
    prior: &Prior,
    enrollment: &EnrollmentResult,
    model: &HeadModel,
    chart: &UvChart,
    frames: &[DriveFrame],
    driving_camera: &Camera,
    render_camera: &Camera,
) -> Result<(Vec<Option<Image>>, DriveManifest)> {
    let avatar = Avatar::new(prior, enrollment, model, chart)?;
    let mut manifest = DriveManifest { frames: frames.len(), ..Default::default() };
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        match &f.params {
            Some(p) => {
                out.push(Some(avatar.render_frame(f.image.as_ref(), p, driving_camera, render_camera)?));
                manifest.rendered.push(i);
            }
            None => {
                log::warn!("frame {i} has no tracking; skipped");
                manifest.skipped.push(i);
                out.push(None);
            }
        }
    }
    Ok((out, manifest))
}
