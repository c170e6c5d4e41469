use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::head_model::Vec3;
use crate::nn::{Graph, Tensor};
use crate::splat::SH_LEN;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(h, w, 3);
    for v in img.data.iter_mut() {
        *v = rng.random();
    }
    img
}

fn critics_f64() -> (Perceptual<f64>, Discriminator<f64>) {
    (Perceptual::new(FeatureNet::random(1)), Discriminator::new(FeatureNet::random(2), 3))
}

#[test]
fn identical_images_give_zero_components() {
    let img = random_image(24, 20, 1);
    let (p, _) = critics_f64();
    let critics = ImageCritics { perceptual: Some(&p), discriminator: None };
    let (c, _) = image_loss(&img, &img, &LossWeights::default(), &critics).unwrap();
    assert_eq!((c.l1, c.vgg, c.dssim), (0.0, 0.0, 0.0));
    assert_eq!(c.photometric(&LossWeights::default()), 0.0);
    assert_eq!(ssim(&img, &img).unwrap(), 1.0);
}

#[test]
fn constant_images_follow_closed_forms() {
    for (a, b) in [(0.2, 0.7), (0.5, 0.5), (0.9, 0.1), (0.0, 1.0)] {
        let x = Image::filled(16, 16, [a; 3]);
        let y = Image::filled(16, 16, [b; 3]);
        let (c, _) = image_loss::<f64>(&x, &y, &LossWeights::default(), &ImageCritics::default()).unwrap();
        assert!((c.l1 - f64::abs(a - b)).abs() < 1e-12);
        // zero variances: SSIM = (2ab + C1) / (a² + b² + C1)
        let expected = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert!((1.0 - c.dssim - expected).abs() < 1e-9, "{a},{b}: {} vs {expected}", 1.0 - c.dssim);
    }
}

#[test]
fn ssim_is_symmetric_and_bounded() {
    for seed in 0..5 {
        let x = random_image(20, 18, seed);
        let y = random_image(20, 18, seed + 100);
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&a));
    }
    let x = random_image(20, 18, 9);
    let neg = Image::from_data(20, 18, 3, x.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    let s = ssim(&x, &neg).unwrap();
    assert!((-1.0..0.0).contains(&s));
}

#[test]
fn ssim_rejects_bad_shapes() {
    assert!(ssim(&random_image(10, 10, 0), &random_image(10, 10, 1)).is_err());
    assert!(ssim(&random_image(12, 12, 0), &random_image(12, 13, 1)).is_err());
}

#[test]
fn ssim_gradient_matches_central_differences() {
    let x = random_image(14, 13, 2);
    let y = random_image(14, 13, 3);
    let (_, g) = ssim_with_grad(&x, &y).unwrap();
    let h = 1e-6;
    for i in (0..x.data.len()).step_by(7) {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data[i] += h;
        m.data[i] -= h;
        let fd = (ssim(&p, &y).unwrap() - ssim(&m, &y).unwrap()) / (2.0 * h);
        assert!((fd - g.data[i]).abs() < 1e-7 + 1e-5 * fd.abs(), "{i}: {} vs {fd}", g.data[i]);
    }
}

#[test]
fn image_loss_gradient_matches_central_differences() {
    let x = random_image(16, 16, 4);
    let y = random_image(16, 16, 5);
    let (p, d) = critics_f64();
    let critics = ImageCritics { perceptual: Some(&p), discriminator: Some(&d) };
    let w = LossWeights { gan: 0.5, vgg: 0.3, ..Default::default() };
    let total = |img: &Image| {
        let (c, _) = image_loss(img, &y, &w, &critics).unwrap();
        c.photometric(&w) + w.gan * c.gan_g
    };
    let (_, g) = image_loss(&x, &y, &w, &critics).unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for i in (0..x.data.len()).step_by(11) {
        let (mut pp, mut mm) = (x.clone(), x.clone());
        pp.data[i] += h;
        mm.data[i] -= h;
        let fd = (total(&pp) - total(&mm)) / (2.0 * h);
        // L1 kinks are measure-zero; skip pixels within h of the target
        if (x.data[i] - y.data[i]).abs() < 1e-3 {
            continue;
        }
        assert!((fd - g.data[i]).abs() < 1e-6 + 1e-4 * fd.abs(), "{i}: {} vs {fd}", g.data[i]);
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn zero_logit_discriminator_gives_five_log_two() {
    let mut d = Discriminator::<f64>::new(FeatureNet::random(4), 5);
    for i in 0..d.heads.len() {
        if d.heads.name(i).contains(".out.") {
            d.heads.get_mut(i).data.fill(0.0);
        }
    }
    let real = random_image(32, 32, 6);
    let fake = random_image(32, 32, 7);
    let mut g = Graph::new();
    let r = g.input(images_to_tensor(&[&real], INPUT_SHIFT).unwrap());
    let f = g.input(images_to_tensor(&[&fake], INPUT_SHIFT).unwrap());
    let lg = d.generator_loss(&mut g, f);
    let ld = d.discriminator_loss(&mut g, r, f);
    let expected = 5.0 * 2f64.ln();
    assert!((g.scalar(lg) - expected).abs() < 1e-12);
    assert!((g.scalar(ld) - expected).abs() < 1e-12);
}

#[test]
fn perfect_discriminator_loss_vanishes() {
    let mut g = Graph::<f64>::new();
    let mut terms = Vec::new();
    for _ in 0..FEATURE_LEVELS {
        let real = g.input(Tensor::from_vec([1, 1, 2, 2], vec![1e6, 50.0, 21.0, f64::MAX]).unwrap());
        let fake = g.input(Tensor::from_vec([1, 1, 2, 2], vec![-1e6, -50.0, -21.0, f64::MIN]).unwrap());
        terms.push((g.softplus_mean(real, -1.0), 0.5));
        terms.push((g.softplus_mean(fake, 1.0), 0.5));
    }
    let l = g.weighted_sum(&terms);
    let v = g.scalar(l);
    assert!(v > 0.0 && v < 1e-7, "{v}");
}

#[test]
fn adversarial_gradient_reaches_the_image() {
    let (_, d) = critics_f64();
    let img = random_image(32, 32, 8);
    let mut g = Graph::new();
    let x = g.leaf(images_to_tensor(&[&img], INPUT_SHIFT).unwrap());
    let l = d.generator_loss(&mut g, x);
    let grads = g.backward(&[(l, vec![1.0])]);
    assert!(grads.get(x).unwrap().iter().any(|v| v.abs() > 1e-9));
    // heads are frozen in the generator step
    assert!(grads.params(&g, d.heads.len()).iter().all(|p| p.is_none()));
}

fn prim(offset: Vec3, scale: Vec3) -> GaussianPrimitive {
    GaussianPrimitive { offset, opacity: 0.5, rotation: [1.0, 0.0, 0.0, 0.0], scale, sh: [0.0; SH_LEN] }
}

#[test]
fn regularizer_closed_forms() {
    let neutral = 0.01;
    let n = Vec3::repeat(neutral);
    let zero: Vec<_> = (0..10).map(|_| prim(Vec3::zeros(), n)).collect();
    assert_eq!(primitive_regularizers(&zero, &[true; 10], neutral), (0.0, 0.0));
    let shifted: Vec<_> = (0..10).map(|_| prim(Vec3::new(0.01, 0.0, 0.0), n)).collect();
    let (pos, scal) = primitive_regularizers(&shifted, &[true; 10], neutral);
    assert!((pos - 0.01 / 3.0).abs() < 1e-15);
    assert_eq!(scal, 0.0);
}

#[test]
fn regularizers_match_naive_reduction_and_ignore_invalid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prims: Vec<_> = (0..50)
        .map(|_| {
            prim(
                Vec3::from_fn(|_, _| rng.random_range(-0.02..0.02)),
                Vec3::from_fn(|_, _| rng.random_range(0.001..0.02)),
            )
        })
        .collect();
    let valid: Vec<bool> = (0..50).map(|i| i % 4 != 0).collect();
    let (pos, scal) = primitive_regularizers(&prims, &valid, 0.01);
    let (mut sp, mut ss, mut n) = (0.0, 0.0, 0.0);
    for i in 0..50 {
        if valid[i] {
            for k in 0..3 {
                sp += prims[i].offset[k].abs();
                ss += (prims[i].scale[k] - 0.01).abs();
                n += 1.0;
            }
        }
    }
    assert!((pos - sp / n).abs() < 1e-15 && (scal - ss / n).abs() < 1e-15);
    let mut grads = vec![PrimitiveGrad::default(); 50];
    regularizer_backward(&prims, &valid, 0.01, 1.0, 0.1, &mut grads);
    let h = 1e-7;
    for i in [1, 2, 5] {
        for k in 0..3 {
            let mut p = prims.clone();
            p[i].offset[k] += h;
            let fd = (primitive_regularizers(&p, &valid, 0.01).0 - pos) / h;
            assert!((fd - grads[i].offset[k]).abs() < 1e-6);
            let mut p = prims.clone();
            p[i].scale[k] += h;
            let fd = 0.1 * (primitive_regularizers(&p, &valid, 0.01).1 - scal) / h;
            assert!((fd - grads[i].scale[k]).abs() < 1e-6);
        }
    }
    assert_eq!(grads[0], PrimitiveGrad::default());
}

fn some_components() -> LossComponents {
    LossComponents { l1: 0.1, vgg: 0.7, dssim: 0.3, pos: 0.002, scal: 0.004, gan_g: 3.0, greg: 0.05 }
}

#[test]
fn objective_bookkeeping() {
    let w = LossWeights::default();
    let c = some_components();
    let expected = 5.0 * 0.1 + 0.1 * 0.7 + 0.2 * 0.3 + 1.0 * 0.002 + 0.1 * 0.004 + 0.01 * 3.0;
    assert!((c.training_total(&w) - expected).abs() < 1e-12);
    let no_gan = LossWeights { gan: 0.0, ..w };
    assert!((c.training_total(&no_gan) - (expected - 0.03)).abs() < 1e-12);
    assert_eq!(LossComponents::default().training_total(&w), 0.0);
    for k in [0.5, 2.0, 7.0] {
        assert!((c.training_total(&w.scaled(k)) - k * c.training_total(&w)).abs() < 1e-12);
    }
    let no_anchor = LossWeights { greg: 0.0, ..w };
    assert!((c.inversion_total(&no_anchor) - c.training_total(&no_gan)).abs() < 1e-12);
    assert!((c.inversion_total(&w) - c.inversion_total(&no_anchor) - 5.0 * 0.05).abs() < 1e-12);
}

#[test]
fn default_weights_are_the_published_values() {
    let w = LossWeights::default();
    assert_eq!(
        [w.pos, w.scal, w.l1, w.vgg, w.ssim, w.gan, w.greg],
        [1.0, 0.1, 5.0, 0.1, 0.2, 0.01, 5.0]
    );
}

#[test]
fn anchor_loss_is_zero_at_start_and_grows_along_a_ray() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let init: Vec<f32> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
    let delta: Vec<f32> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert_eq!(anchor_loss(&init, &init).0, 0.0);
    let mut last = 0.0;
    for t in [0.01f32, 0.1, 0.5, 1.0] {
        let moved: Vec<f32> = init.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
        let (l, g) = anchor_loss(&moved, &init);
        assert!(l > last);
        last = l;
        assert!(g.iter().all(|v| v.abs() == 1.0 / 200.0 || *v == 0.0));
    }
}

proptest! {
    #[test]
    fn losses_are_finite_and_nonnegative(seed in 0u64..1000) {
        let x = random_image(12, 12, seed);
        let y = random_image(12, 12, seed + 1);
        let (c, g) = image_loss::<f64>(&x, &y, &LossWeights::default(), &ImageCritics::default()).unwrap();
        prop_assert!(c.all_finite() && c.l1 >= 0.0 && c.dssim >= 0.0 && c.dssim <= 2.0);
        prop_assert!(g.data.iter().all(|v| v.is_finite()));
    }
}
