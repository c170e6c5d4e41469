//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/head_model.safetensors
//! <root>/subjects/<subject>/subject.safetensors      shape, textures, identity bakes
//! <root>/subjects/<subject>/neutral/<camera>.png
//! <root>/subjects/<subject>/<sequence>/tracking.safetensors
//! <root>/subjects/<subject>/<sequence>/conditioning.safetensors
//! <root>/subjects/<subject>/<sequence>/<camera>/<frame:04>.png
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{camera_rig, SyntheticConfig, SyntheticWorld};
use crate::conditioning::{identity_texture, mouth_gradient_map, ConditioningBundle, UvBake, View};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::head_model::{FlameParams, HeadModel, UvChart};
use crate::image::Image;
use crate::render::{Camera, CameraRecord};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "splathead-synthetic";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraRole {
    Train,
    HeldOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub name: String,
    pub role: CameraRole,
    pub camera: CameraRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub frames: usize,
    pub tracking: String,
    pub conditioning: String,
    /// Frame directory per camera; frame `f` is `<dir>/<f:04>.png`.
    pub frame_dirs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub name: String,
    pub seed: u64,
    pub split: Split,
    pub container: String,
    /// Neutral capture, one image per camera.
    pub neutral: Vec<String>,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: SyntheticConfig,
    pub head_model: String,
    pub image_size: usize,
    pub uv_resolution: usize,
    pub gt_scale: f64,
    pub cameras: Vec<CameraEntry>,
    pub subjects: Vec<SubjectEntry>,
}

pub fn frame_file(dir: &str, frame: usize) -> String {
    format!("{dir}/{frame:04}.png")
}

impl DatasetManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Every file the manifest refers to, relative to the root.
    pub fn files(&self) -> Vec<String> {
        let mut out = vec![self.head_model.clone()];
        for s in &self.subjects {
            out.push(s.container.clone());
            out.extend(s.neutral.iter().cloned());
            for q in &s.sequences {
                out.push(q.tracking.clone());
                out.push(q.conditioning.clone());
                for d in &q.frame_dirs {
                    out.extend((0..q.frames).map(|f| frame_file(d, f)));
                }
            }
        }
        out
    }

    /// Checks the structural invariants and that every referenced file exists.
    pub fn validate(&self, root: impl AsRef<Path>) -> Result<()> {
        if self.cameras.len() < 2 {
            return Err(Error::Config("dataset needs at least two cameras".into()));
        }
        for s in &self.subjects {
            let bad = s.neutral.len() != self.cameras.len()
                || s.sequences.iter().any(|q| q.frame_dirs.len() != self.cameras.len() || q.frames == 0);
            if bad {
                return Err(Error::Config(format!("subject {} does not cover every camera", s.name)));
            }
        }
        let root = root.as_ref();
        for f in self.files() {
            if !root.join(&f).is_file() {
                return Err(Error::Config(format!("manifest refers to missing file {f}")));
            }
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.cameras.iter().map(|c| Camera::from_record(&c.camera)).collect()
    }

    pub fn camera_indices(&self, role: CameraRole) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| self.cameras[i].role == role).collect()
    }
}

fn bake_arrays(c: &mut Container, name: &str, bake: &UvBake) -> Result<()> {
    let r = bake.texture.height;
    c.put_f64(&format!("{name}.texture"), &[r, r, 3], bake.texture.data.clone())?;
    c.put_u8(&format!("{name}.valid"), &[r, r], bake.valid.iter().map(|&v| v as u8).collect())
}

fn read_bake(c: &Container, name: &str) -> Result<UvBake> {
    let (shape, data) = c.get_f64(&format!("{name}.texture"))?;
    Ok(UvBake {
        texture: Image::from_data(shape[0], shape[1], 3, data)?,
        valid: c.get_u8(&format!("{name}.valid"))?.1.iter().map(|&v| v != 0).collect(),
    })
}

/// Renders the whole dataset under `root` and writes its manifest.
/// Regenerating with the same configuration produces byte-identical files.
pub fn generate_dataset(root: impl AsRef<Path>, config: &SyntheticConfig) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let world = SyntheticWorld::new(config.clone())?;
    let (model, chart) = (&world.model, &world.chart);
    let rig = camera_rig(config)?;
    let cam_names: Vec<String> = (0..rig.len()).map(|i| format!("cam{i}")).collect();
    let train_cams: Vec<usize> = (0..rig.len()).filter(|&i| rig[i].1 == CameraRole::Train).collect();
    let res = config.uv_resolution;

    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    model.to_container()?.save(root.join("head_model.safetensors"))?;

    let mut subjects = Vec::new();
    for i in 0..config.n_subjects() {
        let subject = world.subject(i);
        let name = format!("s{i:03}");
        let split = if i < config.train_subjects { Split::Train } else { Split::Test };
        log::info!("generating subject {name} ({split:?})");
        let sdir = format!("subjects/{name}");
        let prims = world.gt_primitives(&subject);

        let neutral = subject.neutral_params(model);
        let mut neutral_files = Vec::new();
        let mut neutral_imgs = Vec::new();
        for (c, (cam, _)) in rig.iter().enumerate() {
            let img = world.render_gt(&prims, &neutral, cam)?;
            let f = format!("{sdir}/neutral/{}.png", cam_names[c]);
            img.save_png(root.join(&f))?;
            neutral_files.push(f);
            neutral_imgs.push(img);
        }
        let view = |c: usize| View { image: &neutral_imgs[c], params: &neutral, camera: &rig[c].0 };
        let id_one = identity_texture(&[view(train_cams[0])], model, chart)?;
        let id_all = identity_texture(&train_cams.iter().map(|&c| view(c)).collect::<Vec<_>>(), model, chart)?;

        let mut sc = Container::new("synthetic_subject");
        sc.set_meta("seed", subject.seed.to_string());
        sc.put_f64("shape", &[subject.shape.len()], subject.shape.clone())?;
        sc.put_f64("albedo", &[res, res, 3], subject.albedo.data.clone())?;
        sc.put_f64("mouth", &[res, res, 3], subject.mouth.data.clone())?;
        sc.put_f64("texture", &[res, res, 3], subject.texture(chart).data.clone())?;
        bake_arrays(&mut sc, "identity_one", &id_one)?;
        bake_arrays(&mut sc, "identity_all", &id_all)?;
        let container = format!("{sdir}/subject.safetensors");
        sc.save(root.join(&container))?;

        let mut sequences = Vec::new();
        for (k, track) in subject.tracks.iter().enumerate() {
            let qname = format!("seq{k}");
            let qdir = format!("{sdir}/{qname}");
            let frame_dirs: Vec<String> = cam_names.iter().map(|c| format!("{qdir}/{c}")).collect();
            let mut flat = Vec::new();
            let mut delta_p = Vec::new();
            let mut m_mouth = Vec::new();
            for f in 0..track.len() {
                let params = track.params(model, &subject.shape, f);
                flat.extend(params.to_flat());
                for (c, (cam, _)) in rig.iter().enumerate() {
                    let img = world.render_gt(&prims, &params, cam)?;
                    img.save_png(root.join(frame_file(&frame_dirs[c], f)))?;
                    if c == train_cams[0] {
                        let mm = mouth_gradient_map(&img, &params, cam, model, chart)?;
                        m_mouth.extend(mm.data.iter().map(|&v| v as f32));
                    }
                }
                let dp = model.expression_offset_map(chart, &params.expression, &params.jaw())?;
                delta_p.extend(dp.data.iter().map(|&v| v as f32));
            }
            let n = track.len();
            let mut tc = Container::new("synthetic_tracking");
            tc.set_meta("n_shape", model.n_shape.to_string());
            tc.set_meta("n_expr", model.n_expr.to_string());
            tc.set_meta("n_joints", model.n_joints().to_string());
            tc.put_f64("params", &[n, flat.len() / n], flat)?;
            let tracking = format!("{qdir}/tracking.safetensors");
            tc.save(root.join(&tracking))?;
            let mut cc = Container::new("synthetic_conditioning");
            cc.set_meta("driving_camera", cam_names[train_cams[0]].clone());
            cc.put_f32("delta_p", &[n, res, res, 3], delta_p)?;
            cc.put_f32("m_mouth", &[n, res, res, 3], m_mouth)?;
            let conditioning = format!("{qdir}/conditioning.safetensors");
            cc.save(root.join(&conditioning))?;
            sequences.push(SequenceEntry { name: qname, frames: n, tracking, conditioning, frame_dirs });
        }
        subjects.push(SubjectEntry {
            name,
            seed: subject.seed,
            split,
            container,
            neutral: neutral_files,
            sequences,
        });
    }

    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config: config.clone(),
        head_model: "head_model.safetensors".into(),
        image_size: config.image_size,
        uv_resolution: res,
        gt_scale: world.gt_scale,
        cameras: rig
            .iter()
            .enumerate()
            .map(|(i, (cam, role))| CameraEntry { name: cam_names[i].clone(), role: *role, camera: cam.record() })
            .collect(),
        subjects,
    };
    manifest.save(root)?;
    Ok(manifest)
}

/// 8-bit RGB frame kept compactly in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub size: usize,
    pub bytes: Vec<u8>,
}

impl Frame {
    fn load(path: &Path) -> Result<Self> {
        let img = Image::load_png(path)?;
        if img.height != img.width || img.channels != 3 {
            return Err(Error::InvalidInput(format!("{}: expected a square RGB frame", path.display())));
        }
        Ok(Frame { size: img.height, bytes: img.to_u8() })
    }

    pub fn image(&self) -> Image {
        Image::from_u8(self.size, self.size, 3, &self.bytes).expect("frame shape")
    }
}

#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub params: Vec<FlameParams>,
    delta_p: Vec<f32>,
    m_mouth: Vec<f32>,
    /// `frames[f][camera]`.
    pub frames: Vec<Vec<Frame>>,
}

impl LoadedSequence {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn map(data: &[f32], f: usize, res: usize) -> Image {
        let n = res * res * 3;
        Image::from_data(res, res, 3, data[f * n..(f + 1) * n].iter().map(|&v| v as f64).collect())
            .expect("map shape")
    }
}

#[derive(Clone, Debug)]
pub struct LoadedSubject {
    pub entry: SubjectEntry,
    pub shape: Vec<f64>,
    pub texture: Image,
    pub identity_one: UvBake,
    pub identity_all: UvBake,
    pub neutral: Vec<Frame>,
    pub sequences: Vec<LoadedSequence>,
}

impl LoadedSubject {
    pub fn neutral_params(&self, model: &HeadModel) -> FlameParams {
        let mut p = FlameParams::neutral(model);
        p.shape = self.shape.clone();
        p
    }

    /// Conditioning bundle of frame `f` of sequence `seq` with the chosen
    /// identity texture; `mouth` false zeroes `M_mouth`.
    pub fn bundle(&self, chart: &UvChart, seq: usize, f: usize, all_views: bool, mouth: bool) -> ConditioningBundle {
        let s = &self.sequences[seq];
        let res = chart.resolution;
        let id = if all_views { &self.identity_all } else { &self.identity_one };
        let mut m_mouth = LoadedSequence::map(&s.m_mouth, f, res);
        if !mouth {
            m_mouth.data.fill(0.0);
        }
        let mut b = ConditioningBundle {
            m_id: id.texture.clone(),
            id_valid: id.valid.clone(),
            delta_p: LoadedSequence::map(&s.delta_p, f, res),
            m_mouth,
            mouth_mask: chart.mouth.clone(),
        };
        b.enforce_masks();
        b
    }
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub model: HeadModel,
    pub chart: UvChart,
    pub cameras: Vec<Camera>,
    pub subjects: Vec<LoadedSubject>,
}

impl LoadedDataset {
    /// Loads the subjects of `split` (all subjects when `None`).
    pub fn load(root: impl AsRef<Path>, split: Option<Split>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = DatasetManifest::load(&root)?;
        manifest.validate(&root)?;
        let model = HeadModel::from_container(&Container::load(root.join(&manifest.head_model))?)?;
        let chart = model.uv_chart(manifest.uv_resolution);
        let cameras = manifest.cameras()?;
        let mut subjects = Vec::new();
        for entry in manifest.subjects.iter().filter(|s| split.is_none_or(|sp| s.split == sp)) {
            let c = Container::load(root.join(&entry.container))?;
            c.expect_format("synthetic_subject")?;
            let (shape, tex) = c.get_f64("texture")?;
            let mut sequences = Vec::new();
            for q in &entry.sequences {
                let tc = Container::load(root.join(&q.tracking))?;
                tc.expect_format("synthetic_tracking")?;
                let (pshape, flat) = tc.get_f64("params")?;
                let params = flat
                    .chunks(pshape[1])
                    .map(|row| FlameParams::from_flat(row, model.n_shape, model.n_expr, model.n_joints()))
                    .collect::<Result<Vec<_>>>()?;
                let cc = Container::load(root.join(&q.conditioning))?;
                cc.expect_format("synthetic_conditioning")?;
                let frames = (0..q.frames)
                    .map(|f| q.frame_dirs.iter().map(|d| Frame::load(&root.join(frame_file(d, f)))).collect())
                    .collect::<Result<Vec<Vec<Frame>>>>()?;
                sequences.push(LoadedSequence {
                    params,
                    delta_p: cc.get_f32("delta_p")?.1,
                    m_mouth: cc.get_f32("m_mouth")?.1,
                    frames,
                });
            }
            subjects.push(LoadedSubject {
                entry: entry.clone(),
                shape: c.get_f64("shape")?.1,
                texture: Image::from_data(shape[0], shape[1], 3, tex)?,
                identity_one: read_bake(&c, "identity_one")?,
                identity_all: read_bake(&c, "identity_all")?,
                neutral: entry.neutral.iter().map(|f| Frame::load(&root.join(f))).collect::<Result<_>>()?,
                sequences,
            });
        }
        Ok(LoadedDataset { root, manifest, model, chart, cameras, subjects })
    }

    pub fn camera_indices(&self, role: CameraRole) -> Vec<usize> {
        self.manifest.camera_indices(role)
    }
}
