//! UV-space conditioning inputs: identity textures baked from 1–3 views,
//! expression offset maps, Sobel mouth-gradient maps and photometric
//! augmentation.

mod augment;
mod raster;

pub use augment::{
    augment, gaussian_blur, gaussian_kernel, luma, Augmentation, AUGMENT_PROBABILITY,
    BLUR_KERNEL, BLUR_SIGMA, HUE_RANGE, JITTER_FACTOR,
};
pub use raster::MeshRaster;

use crate::container::Container;
use crate::error::{ensure_dim, Error, Result};
use crate::head_model::{FlameParams, HeadModel, UvChart, Vec3};
use crate::image::Image;
use crate::render::Camera;

/// Guard for the max-abs normalisation of gradient maps.
pub const SOBEL_EPS: f64 = 1e-12;

/// Depth-test tolerance as a fraction of the camera-to-head distance.
pub const VISIBILITY_TOLERANCE: f64 = 1e-3;

/// Maximum depth gap, as a fraction of the camera-to-head distance, between a
/// texel's surface point and each pixel its bilinear sample reads.
pub const CONTINUITY_TOLERANCE: f64 = 2e-2;

/// Footprint pixels whose surface UV lies further than this many texels from
/// the baked texel are across a UV seam.
pub const UV_SEAM_TEXELS: f64 = 4.0;

/// Texels seen at a grazing angle (normal·view below this) are not baked.
pub const MIN_VIEW_COSINE: f64 = 0.25;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Single-channel luma image of an RGB image.
pub fn luma_image(img: &Image) -> Image {
    let mut out = Image::new(img.height, img.width, 1);
    for (o, px) in out.data.iter_mut().zip(img.data.chunks_exact(3)) {
        *o = luma([px[0], px[1], px[2]]);
    }
    out
}

/// 3×3 correlation with replicate border on a single-channel image.
pub fn correlate3(img: &Image, kernel: &[[f64; 3]; 3]) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::new(h, w, 1);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (dr, krow) in kernel.iter().enumerate() {
                let rr = (r as isize + dr as isize - 1).clamp(0, h as isize - 1) as usize;
                for (dc, &kv) in krow.iter().enumerate() {
                    let cc = (c as isize + dc as isize - 1).clamp(0, w as isize - 1) as usize;
                    acc += kv * img.data[rr * w + cc];
                }
            }
            out.data[r * w + c] = acc;
        }
    }
    out
}

/// Sobel gradient map of an RGB image: channels `(gx, gy)` share one
/// normalisation by their joint max-abs value; channel 2 is the gradient
/// magnitude divided by its own max. Constant images give an all-zero map.
pub fn sobel_gradient_map(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::InvalidInput(format!(
            "sobel_gradient_map needs 3 channels, got {}",
            img.channels
        )));
    }
    let l = luma_image(img);
    let gx = correlate3(&l, &SOBEL_X);
    let gy = correlate3(&l, &SOBEL_Y);
    let n = l.data.len();
    let mag: Vec<f64> = (0..n).map(|p| gx.data[p].hypot(gy.data[p])).collect();
    let max_xy = gx.data.iter().chain(&gy.data).fold(0.0f64, |m, v| m.max(v.abs()));
    let max_mag = mag.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut out = Image::new(img.height, img.width, 3);
    if max_xy > SOBEL_EPS {
        for p in 0..n {
            out.data[3 * p] = gx.data[p] / max_xy;
            out.data[3 * p + 1] = gy.data[p] / max_xy;
        }
    }
    if max_mag > SOBEL_EPS {
        for p in 0..n {
            out.data[3 * p + 2] = mag[p] / max_mag;
        }
    }
    Ok(out)
}

/// A UV texture with per-texel validity.
#[derive(Clone, Debug, PartialEq)]
pub struct UvBake {
    pub texture: Image,
    pub valid: Vec<bool>,
}

impl UvBake {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn validity_map(&self) -> Image {
        Image::from_data(
            self.texture.height,
            self.texture.width,
            1,
            self.valid.iter().map(|&v| v as u8 as f64).collect(),
        )
        .expect("validity shape")
    }
}

/// Projects every valid texel's surface point (on the posed mesh) into the
/// image and samples it bilinearly. Texels that are behind the camera, fall
/// outside the image or fail the depth test against the rasterized mesh are
/// invalid, as are texels whose bilinear footprint touches background or a
/// different depth layer (silhouettes, occlusion boundaries), that read pixels
/// of the other mouth/skin layer or across a UV seam, that lie on a degenerate
/// face, or that are seen at a grazing angle.
pub fn bake_to_uv(
    image: &Image,
    posed_vertices: &[Vec3],
    model: &HeadModel,
    cam: &Camera,
    chart: &UvChart,
) -> Result<UvBake> {
    ensure_dim("image height", cam.height, image.height)?;
    ensure_dim("image width", cam.width, image.width)?;
    ensure_dim("posed vertices", model.n_vertices(), posed_vertices.len())?;
    let raster = MeshRaster::new(posed_vertices, &model.faces, cam);
    let centroid =
        posed_vertices.iter().fold(Vec3::zeros(), |a, v| a + v) / posed_vertices.len() as f64;
    let dist = (cam.center() - centroid).norm();
    let tol = VISIBILITY_TOLERANCE * dist;
    let gap = CONTINUITY_TOLERANCE * dist;
    let points = chart.interpolate(model, posed_vertices);
    let res = chart.resolution;
    let mut texture = Image::new(res, res, image.channels);
    let mut valid = vec![false; res * res];
    let center = cam.center();
    let seam = UV_SEAM_TEXELS / res as f64;
    let pixel_uv = |i: usize| {
        let f = model.faces[raster.face[i] as usize];
        let b = raster.bary[i];
        let mut uv = [0.0; 2];
        for k in 0..3 {
            let q = model.uvs[f[k] as usize];
            uv[0] += b[k] * q[0];
            uv[1] += b[k] * q[1];
        }
        uv
    };
    for (t, p) in points.iter().enumerate() {
        let Some(p) = p else { continue };
        let face = model.faces[chart.face[t] as usize].map(|i| posed_vertices[i as usize]);
        let normal = (face[1] - face[0]).cross(&(face[2] - face[0]));
        let to_cam = center - p;
        let n = normal.norm();
        if n < 1e-12 || normal.dot(&to_cam).abs() < MIN_VIEW_COSINE * n * to_cam.norm() {
            continue;
        }
        let z = cam.to_camera(p).z;
        let (tu, tv) = (
            ((t % res) as f64 + 0.5) / res as f64,
            ((t / res) as f64 + 0.5) / res as f64,
        );
        let Some([x, y]) = cam.project_point(p) else {
            continue;
        };
        if !(x >= 0.0 && y >= 0.0 && x < cam.width as f64 && y < cam.height as f64) {
            continue;
        }
        match raster.depth_at(x, y) {
            Some(zbuf) if z <= zbuf + tol => {}
            _ => continue,
        }
        let fx = (x - 0.5).clamp(0.0, (cam.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (cam.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(cam.width - 1), (y0 + 1).min(cam.height - 1));
        let continuous = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
            .iter()
            .all(|&(r, c)| {
                let i = r * cam.width + c;
                let f = raster.face[i];
                f != u32::MAX
                    && model.mouth_faces[f as usize] == chart.mouth[t]
                    && (raster.depth[i] - z).abs() <= gap
                    && {
                        let uv = pixel_uv(i);
                        (uv[0] - tu).abs() <= seam && (uv[1] - tv).abs() <= seam
                    }
            });
        if !continuous {
            continue;
        }
        let s = image.sample_bilinear(x, y);
        texture.data[t * image.channels..(t + 1) * image.channels].copy_from_slice(&s);
        valid[t] = true;
    }
    Ok(UvBake { texture, valid })
}

/// A captured view: image, its tracking and camera.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub image: &'a Image,
    pub params: &'a FlameParams,
    pub camera: &'a Camera,
}

/// Identity texture `M_id`: per-texel mean of the valid bakes across views,
/// with the mouth region zeroed and marked invalid.
pub fn identity_texture(views: &[View], model: &HeadModel, chart: &UvChart) -> Result<UvBake> {
    if views.is_empty() {
        return Err(Error::InvalidInput("identity_texture needs at least one view".into()));
    }
    let res = chart.resolution;
    let mut sum = Image::new(res, res, 3);
    let mut count = vec![0usize; res * res];
    for v in views {
        let posed = model.posed(v.params)?.positions;
        let bake = bake_to_uv(v.image, &posed, model, v.camera, chart)?;
        if bake.texture.channels != 3 {
            return Err(Error::InvalidInput("identity views must be RGB".into()));
        }
        for t in 0..res * res {
            if bake.valid[t] {
                count[t] += 1;
                for ch in 0..3 {
                    sum.data[3 * t + ch] += bake.texture.data[3 * t + ch];
                }
            }
        }
    }
    let mut valid = vec![false; res * res];
    for t in 0..res * res {
        if count[t] > 0 && !chart.mouth[t] {
            valid[t] = true;
            for ch in 0..3 {
                sum.data[3 * t + ch] /= count[t] as f64;
            }
        } else {
            for ch in 0..3 {
                sum.data[3 * t + ch] = 0.0;
            }
        }
    }
    Ok(UvBake {
        texture: sum,
        valid,
    })
}

/// Mouth gradient map `M_mouth`: Sobel map of the whole frame, baked to UV and
/// masked to the mouth region.
pub fn mouth_gradient_map(
    frame: &Image,
    params: &FlameParams,
    cam: &Camera,
    model: &HeadModel,
    chart: &UvChart,
) -> Result<Image> {
    let grad = sobel_gradient_map(frame)?;
    let posed = model.posed(params)?.positions;
    let bake = bake_to_uv(&grad, &posed, model, cam, chart)?;
    let mut out = bake.texture;
    for t in 0..chart.n_texels() {
        if !(bake.valid[t] && chart.mouth[t]) {
            out.data[3 * t..3 * t + 3].fill(0.0);
        }
    }
    Ok(out)
}

/// All UV conditioning inputs of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub m_id: Image,
    pub id_valid: Vec<bool>,
    /// Canonical-space expression offsets (metres).
    pub delta_p: Image,
    pub m_mouth: Image,
    pub mouth_mask: Vec<bool>,
}

impl ConditioningBundle {
    pub fn build(
        identity: &UvBake,
        params: &FlameParams,
        m_mouth: Image,
        model: &HeadModel,
        chart: &UvChart,
    ) -> Result<Self> {
        let delta_p = model.expression_offset_map(chart, &params.expression, &params.jaw())?;
        let mut b = ConditioningBundle {
            m_id: identity.texture.clone(),
            id_valid: identity.valid.clone(),
            delta_p,
            m_mouth,
            mouth_mask: chart.mouth.clone(),
        };
        b.enforce_masks();
        Ok(b)
    }

    /// Zeroes `M_id` inside and `M_mouth` outside the mouth mask.
    pub fn enforce_masks(&mut self) {
        for (t, &m) in self.mouth_mask.iter().enumerate() {
            if m {
                self.m_id.data[3 * t..3 * t + 3].fill(0.0);
                self.id_valid[t] = false;
            } else {
                self.m_mouth.data[3 * t..3 * t + 3].fill(0.0);
            }
        }
    }

    /// `M_mouth ⊙ (1 − mask) = 0`, `M_id ⊙ mask = 0`, all values finite.
    pub fn masks_hold(&self) -> bool {
        self.mouth_mask.iter().enumerate().all(|(t, &m)| {
            let (id, mo) = (&self.m_id.data[3 * t..3 * t + 3], &self.m_mouth.data[3 * t..3 * t + 3]);
            if m {
                id.iter().all(|&v| v == 0.0)
            } else {
                mo.iter().all(|&v| v == 0.0)
            }
        }) && self
            .m_id
            .data
            .iter()
            .chain(&self.delta_p.data)
            .chain(&self.m_mouth.data)
            .all(|v| v.is_finite())
    }

    pub fn to_container(&self) -> Result<Container> {
        let res = self.m_id.height;
        let mut c = Container::new("conditioning_bundle");
        c.put_f64("m_id", &[res, res, 3], self.m_id.data.clone())?;
        c.put_u8("id_valid", &[res, res], self.id_valid.iter().map(|&v| v as u8).collect())?;
        c.put_f64("delta_p", &[res, res, 3], self.delta_p.data.clone())?;
        c.put_f64("m_mouth", &[res, res, 3], self.m_mouth.data.clone())?;
        c.put_u8("mouth_mask", &[res, res], self.mouth_mask.iter().map(|&v| v as u8).collect())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_format("conditioning_bundle")?;
        let (shape, m_id) = c.get_f64("m_id")?;
        let res = shape[0];
        let img = |d: Vec<f64>| Image::from_data(res, res, 3, d);
        Ok(ConditioningBundle {
            m_id: img(m_id)?,
            id_valid: c.get_u8("id_valid")?.1.iter().map(|&v| v != 0).collect(),
            delta_p: img(c.get_f64("delta_p")?.1)?,
            m_mouth: img(c.get_f64("m_mouth")?.1)?,
            mouth_mask: c.get_u8("mouth_mask")?.1.iter().map(|&v| v != 0).collect(),
        })
    }
}
