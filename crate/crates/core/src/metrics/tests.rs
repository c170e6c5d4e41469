use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::FeatureNet;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
    Image::from_data(h, w, 3, data).unwrap()
}

#[test]
fn identical_images_hit_the_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_image(&mut rng, 8, 8);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
}

#[test]
fn mse_one_hundredth_is_twenty_db() {
    let a = Image::filled(4, 4, [0.5; 3]);
    let b = Image::filled(4, 4, [0.6; 3]);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn psnr_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 9, 7);
    let b = random_image(&mut rng, 9, 7);
    let mut mse = 0.0;
    for i in 0..a.data.len() {
        mse += (a.data[i] - b.data[i]).powi(2);
    }
    mse /= a.data.len() as f64;
    let expected = 10.0 * (1.0 / mse).log10();
    assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
    let peak = 255.0;
    let expected = 10.0 * (peak * peak / mse).log10();
    assert!((psnr(&a, &b, peak).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn masked_psnr_counts_only_masked_pixels() {
    let a = Image::filled(2, 2, [0.5; 3]);
    let mut b = a.clone();
    b.set(0, 0, 0, 0.6);
    b.set(0, 0, 1, 0.6);
    b.set(0, 0, 2, 0.6);
    b.set(1, 1, 0, 0.0);
    let mask = [true, true, false, false];
    let (p, n) = psnr_masked(&a, &b, &mask, 1.0).unwrap();
    assert_eq!(n, 2);
    // mse = 3·0.01 / 6
    assert!((p.unwrap() - 10.0 * (1.0 / 0.005f64).log10()).abs() < 1e-9);
    let (none, zero) = psnr_masked(&a, &b, &[false; 4], 1.0).unwrap();
    assert_eq!((none, zero), (None, 0));
}

#[test]
fn temporal_proxy_orders_noise_above_static() {
    let net = Perceptual::new(FeatureNet::<f64>::random(3));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let still = random_image(&mut rng, 16, 16);
    let gt: Vec<Image> = (0..4).map(|_| still.clone()).collect();
    assert_eq!(temporal_consistency(&gt, &gt, &net).unwrap(), 0.0);
    let moving: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 16, 16)).collect();
    assert_eq!(temporal_consistency(&moving, &moving, &net).unwrap(), 0.0);
    let noisy = temporal_consistency(&moving, &gt, &net).unwrap();
    assert!(noisy > 0.0);
}

fn sample_report(name: &str, seed: u64) -> EvalReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preds: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 12, 12)).collect();
    let gts: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 12, 12)).collect();
    let region: Vec<bool> = (0..144).map(|p| p % 3 == 0).collect();
    let frames: Vec<EvalFrame> = preds
        .iter()
        .zip(&gts)
        .enumerate()
        .map(|(i, (p, g))| EvalFrame { name: format!("{i:04}"), pred: p, gt: g, mask: None, region: Some(&region) })
        .collect();
    evaluate(name, "abc", "test", &frames, &MetricSlots::default()).unwrap()
}

#[test]
fn aggregates_are_frame_means_and_absent_plugins_are_na() {
    let r = sample_report("run", 4);
    let mean = r.frames.iter().map(|f| f.psnr).sum::<f64>() / 3.0;
    assert!((r.aggregate.psnr - mean).abs() < 1e-9);
    let mean_ssim = r.frames.iter().map(|f| f.ssim).sum::<f64>() / 3.0;
    assert!((r.aggregate.ssim - mean_ssim).abs() < 1e-9);
    assert_eq!(r.aggregate.region_pixels, 3 * 48);
    assert!(r.aggregate.lpips.is_none() && r.aggregate.id.is_none());
    let t = table(std::slice::from_ref(&r));
    assert_eq!(t.lines().count(), 3);
    assert!(t.contains("n/a"));
}

#[test]
fn reports_round_trip_and_sort_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_report("zeta", 5);
    let b = sample_report("alpha", 6);
    a.save(dir.path().join("z")).unwrap();
    b.save(dir.path().join("a")).unwrap();
    let back = EvalReport::load(dir.path().join("z").join(REPORT_FILE)).unwrap();
    assert_eq!(back, a);
    let dirs = vec![dir.path().join("z"), dir.path().join("a")];
    let (t1, j1) = report(&dirs).unwrap();
    let (t2, j2) = report(&dirs).unwrap();
    assert_eq!((&t1, &j1), (&t2, &j2));
    let rows: Vec<&str> = t1.lines().skip(2).collect();
    assert!(rows[0].starts_with("| alpha") && rows[1].starts_with("| zeta"));
    assert!(j1.lines().next().unwrap().contains("\"alpha\""));
}

struct ConstMetric(f64);

impl ImageMetric for ConstMetric {
    fn name(&self) -> &str {
        "const"
    }
    fn eval(&self, _: &Image, _: &Image) -> Result<f64> {
        Ok(self.0)
    }
}

#[test]
fn plugin_slots_fill_their_columns() {
    let a = Image::filled(12, 12, [0.2; 3]);
    let slots = MetricSlots { lpips: Some(Box::new(ConstMetric(0.25))), ..Default::default() };
    let frames = [EvalFrame { name: "0".into(), pred: &a, gt: &a, mask: None, region: None }];
    let r = evaluate("x", "", "", &frames, &slots).unwrap();
    assert_eq!(r.aggregate.lpips, Some(0.25));
    assert!(table(&[r]).contains("0.2500"));
}

proptest! {
    #[test]
    fn bounds_hold(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 12, 12);
        let b = random_image(&mut rng, 12, 12);
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!(p >= 0.0 && p <= PSNR_CAP);
        let s = ssim_metric(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
