use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Homogeneous 4×4 colour transform `[r', g', b', 1] = C · [r, g, b, 1]`.
/// Only the top three rows act; the last row stays `[0, 0, 0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorAffine {
    pub matrix: [[f64; 4]; 4],
}

impl Default for ColorAffine {
    fn default() -> Self {
        Self::identity()
    }
}

impl ColorAffine {
    pub fn identity() -> Self {
        let mut matrix = [[0.0; 4]; 4];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        ColorAffine { matrix }
    }

    /// Per-channel gain and offset.
    pub fn diagonal(gain: [f64; 3], offset: [f64; 3]) -> Self {
        let mut c = Self::identity();
        for i in 0..3 {
            c.matrix[i][i] = gain[i];
            c.matrix[i][3] = offset[i];
        }
        c
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        let id = Self::identity();
        self.matrix.iter().flatten().zip(id.matrix.iter().flatten()).all(|(a, b)| (a - b).abs() <= tol)
    }

    fn map(&self, px: &[f64]) -> [f64; 3] {
        std::array::from_fn(|i| {
            let r = &self.matrix[i];
            r[0] * px[0] + r[1] * px[1] + r[2] * px[2] + r[3]
        })
    }

    pub fn apply(&self, img: &Image) -> Image {
        assert_eq!(img.channels, 3, "colour transform needs an RGB image");
        let mut out = img.clone();
        for px in out.data.chunks_exact_mut(3) {
            let v = self.map(px);
            px.copy_from_slice(&v);
        }
        out
    }

    /// Gradients w.r.t. the input image and the top three rows, given the
    /// gradient w.r.t. the output.
    pub fn backward(&self, input: &Image, d_out: &Image) -> (Image, [[f64; 4]; 3]) {
        let mut d_in = Image::new(input.height, input.width, 3);
        let mut d_m = [[0.0; 4]; 3];
        for ((x, g), d) in input.data.chunks_exact(3).zip(d_out.data.chunks_exact(3)).zip(d_in.data.chunks_exact_mut(3)) {
            for i in 0..3 {
                for j in 0..3 {
                    d[j] += self.matrix[i][j] * g[i];
                    d_m[i][j] += g[i] * x[j];
                }
                d_m[i][3] += g[i];
            }
        }
        (d_in, d_m)
    }

    /// Flat view of the twelve free entries.
    pub fn free(&self) -> [f64; 12] {
        std::array::from_fn(|k| self.matrix[k / 4][k % 4])
    }

    pub fn set_free(&mut self, v: &[f64]) {
        for (k, &x) in v.iter().enumerate().take(12) {
            self.matrix[k / 4][k % 4] = x;
        }
    }
}

/// Least-squares fit of the colour transform mapping `renders` onto
/// `targets` (all pixels, all image pairs).
pub fn fit_color_affine(renders: &[&Image], targets: &[&Image]) -> Result<ColorAffine> {
    if renders.is_empty() || renders.len() != targets.len() {
        return Err(Error::InvalidInput("fit_color_affine needs matching, non-empty image lists".into()));
    }
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = [Vector4::<f64>::zeros(); 3];
    for (r, t) in renders.iter().zip(targets) {
        if !r.same_shape(t) || r.channels != 3 {
            return Err(Error::Shape("fit_color_affine: render/target shapes differ".into()));
        }
        for (x, y) in r.data.chunks_exact(3).zip(t.data.chunks_exact(3)) {
            let h = Vector4::new(x[0], x[1], x[2], 1.0);
            ata += h * h.transpose();
            for c in 0..3 {
                atb[c] += h * y[c];
            }
        }
    }
    let svd = ata.svd(true, true);
    let mut out = ColorAffine::identity();
    for c in 0..3 {
        let sol = svd.solve(&atb[c], 1e-12).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for j in 0..4 {
            out.matrix[c][j] = sol[j];
        }
    }
    Ok(out)
}
