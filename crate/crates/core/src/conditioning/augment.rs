use rand::Rng;

use crate::image::Image;

pub const AUGMENT_PROBABILITY: f64 = 0.5;
pub const HUE_RANGE: f64 = 0.1;
pub const JITTER_FACTOR: f64 = 0.3;
pub const BLUR_KERNEL: usize = 5;
pub const BLUR_SIGMA: (f64, f64) = (0.1, 1.0);

/// One sampled photometric augmentation, applied identically to every image
/// of a training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    /// Hue shift as a fraction of the hue circle.
    pub hue: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub intensity: f64,
    pub blur_sigma: f64,
}

impl Augmentation {
    /// `None` with probability `1 − AUGMENT_PROBABILITY`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Option<Self> {
        if rng.random::<f64>() >= AUGMENT_PROBABILITY {
            return None;
        }
        let f = |rng: &mut R| rng.random_range(1.0 - JITTER_FACTOR..=1.0 + JITTER_FACTOR);
        Some(Augmentation {
            hue: rng.random_range(-HUE_RANGE..=HUE_RANGE),
            saturation: f(rng),
            contrast: f(rng),
            intensity: f(rng),
            blur_sigma: rng.random_range(BLUR_SIGMA.0..=BLUR_SIGMA.1),
        })
    }

    /// Colour jitter only. With a mask, the contrast pivot is the mean luma of
    /// masked pixels and unmasked pixels are left untouched.
    pub fn jitter(&self, img: &Image, mask: Option<&[bool]>) -> Image {
        assert_eq!(img.channels, 3, "jitter needs an RGB image");
        let n = img.height * img.width;
        let inside = |p: usize| mask.is_none_or(|m| m[p]);
        let mut out = img.clone();
        let mut luma_sum = 0.0;
        let mut count = 0usize;
        for p in 0..n {
            if !inside(p) {
                continue;
            }
            let px = &mut out.data[3 * p..3 * p + 3];
            let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
            let h = (h + self.hue).rem_euclid(1.0);
            let s = (s * self.saturation).clamp(0.0, 1.0);
            let rgb = hsv_to_rgb(h, s, v);
            px.copy_from_slice(&rgb);
            luma_sum += luma(rgb);
            count += 1;
        }
        let mean = if count > 0 { luma_sum / count as f64 } else { 0.0 };
        for p in 0..n {
            if !inside(p) {
                continue;
            }
            for v in &mut out.data[3 * p..3 * p + 3] {
                *v = (((*v - mean) * self.contrast + mean) * self.intensity).clamp(0.0, 1.0);
            }
        }
        out
    }

    pub fn blur(&self, img: &Image) -> Image {
        gaussian_blur(img, &gaussian_kernel(BLUR_KERNEL, self.blur_sigma))
    }

    /// Jitter followed by blur.
    pub fn apply(&self, img: &Image) -> Image {
        self.blur(&self.jitter(img, None))
    }
}

/// Samples an augmentation and applies it (or returns the input unchanged).
pub fn augment<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    match Augmentation::sample(rng) {
        Some(a) => a.apply(img),
        None => img.clone(),
    }
}

pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Normalized 1D Gaussian kernel of odd `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with replicate border.
pub fn gaussian_blur(img: &Image, kernel: &[f64]) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let half = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::new(h, w, c);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let cc = clampi(col as isize + k as isize - half, w);
                    acc += kv * img.data[(r * w + cc) * c + ch];
                }
                tmp.data[(r * w + col) * c + ch] = acc;
            }
        }
    }
    let mut out = Image::new(h, w, c);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let rr = clampi(r as isize + k as isize - half, h);
                    acc += kv * tmp.data[(rr * w + col) * c + ch];
                }
                out.data[(r * w + col) * c + ch] = acc;
            }
        }
    }
    out
}

fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max > 0.0 { d / max } else { 0.0 };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
