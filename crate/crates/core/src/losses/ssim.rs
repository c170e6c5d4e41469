use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            tmp[r * wo + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|i| k[i] * tmp[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `(h−n+1)×(w−n+1)` map back to `h×w`.
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * wo];
    for r in 0..ho {
        for c in 0..wo {
            let v = g[r * wo + c];
            for i in 0..n {
                tmp[(r + i) * wo + c] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..wo {
            let v = tmp[r * wo + c];
            for i in 0..n {
                out[r * w + c + i] += k[i] * v;
            }
        }
    }
    out
}

fn planes(img: &Image) -> Vec<Vec<f64>> {
    (0..img.channels)
        .map(|ch| img.data.iter().skip(ch).step_by(img.channels).copied().collect())
        .collect()
}

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "ssim: {}×{}×{} vs {}×{}×{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels")));
    }
    Ok(())
}

/// Mean SSIM over channels and valid-mode window positions, with the
/// gradient with respect to `x` when requested.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check(x, y)?;
    let k = window();
    let (h, w, c) = (x.height, x.width, x.channels);
    let n_out = (h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW);
    let count = (n_out * c) as f64;
    let (px, py) = (planes(x), planes(y));
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(h, w, c));
    for ch in 0..c {
        let (xs, ys) = (&px[ch], &py[ch]);
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a * b).collect();
        let mx = filter_valid(xs, h, w, &k);
        let my = filter_valid(ys, h, w, &k);
        let a = filter_valid(&xx, h, w, &k);
        let b = filter_valid(&yy, h, w, &k);
        let cxy = filter_valid(&xy, h, w, &k);
        let (mut gm, mut ga, mut gb) = (vec![0.0; n_out], vec![0.0; n_out], vec![0.0; n_out]);
        for q in 0..n_out {
            let (ux, uy) = (mx[q], my[q]);
            let vx = a[q] - ux * ux;
            let vy = b[q] - uy * uy;
            let vxy = cxy[q] - ux * uy;
            let n1 = 2.0 * ux * uy + SSIM_C1;
            let n2 = 2.0 * vxy + SSIM_C2;
            let d1 = ux * ux + uy * uy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dvx = -s / d2;
                let ds_dvxy = 2.0 * n1 / (d1 * d2);
                let ds_dux = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
                gm[q] = ds_dux - 2.0 * ux * ds_dvx - uy * ds_dvxy;
                ga[q] = ds_dvx;
                gb[q] = ds_dvxy;
            }
        }
        if let Some(gimg) = grad.as_mut() {
            let gm = filter_valid_adjoint(&gm, h, w, &k);
            let ga = filter_valid_adjoint(&ga, h, w, &k);
            let gb = filter_valid_adjoint(&gb, h, w, &k);
            for p in 0..h * w {
                gimg.data[p * c + ch] = (gm[p] + 2.0 * xs[p] * ga[p] + ys[p] * gb[p]) / count;
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, valid positions only).
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(ssim_impl(x, y, false)?.0)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Image, y: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(x, y, true)?;
    Ok((s, g.expect("gradient requested")))
}
