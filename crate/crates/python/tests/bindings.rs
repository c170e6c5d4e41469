use splathead_py::*;

#[test]
fn metrics_cross_the_boundary() {
    let a = vec![0.5; 12 * 12 * 3];
    let b = vec![0.6; 12 * 12 * 3];
    assert_eq!(psnr(a.clone(), a.clone(), 12, 12, 1.0).unwrap(), 99.0);
    assert!((psnr(a.clone(), b, 12, 12, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!((ssim(a.clone(), a, 12, 12).unwrap() - 1.0).abs() < 1e-12);
    assert!(psnr(vec![0.0; 5], vec![0.0; 5], 12, 12, 1.0).is_err());
}

#[test]
fn splat_math_matches_closed_forms() {
    let c = covariance([1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0]).unwrap();
    assert_eq!((c[0][0], c[1][1], c[2][2]), (1.0, 4.0, 9.0));
    let pdf = gaussian_pdf([0.0; 3], [0.0; 3], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    assert!((pdf - (2.0 * std::f64::consts::PI).powf(-1.5)).abs() < 1e-15);
    let mut sh = vec![0.0; 48];
    sh[0] = 1.0;
    let rgb = sh_eval(sh, [0.0, 0.0, 1.0]).unwrap();
    assert!((rgb[0] - (0.282_094_791_773_878_14 + 0.5)).abs() < 1e-15);
    assert!(sh_eval(vec![0.0; 3], [0.0, 0.0, 1.0]).is_err());
}

#[test]
fn sobel_of_a_ramp() {
    let (h, w) = (4, 8);
    let img: Vec<f64> = (0..h * w).flat_map(|p| [(p % w) as f64 / w as f64; 3]).collect();
    let m = sobel_gradient_map(img, h, w).unwrap();
    assert!((m[3 * (w + 3)] - 1.0).abs() < 1e-12);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let cfg = "train_subjects = 1\ntest_subjects = 1\nsequences = 1\nframes = 2\nimage_size = 16\n";
    assert!(generate(root, cfg).unwrap() > 0);
    let (h, w, px) = load_frame(root, 1, 0, 1, 0, "all").unwrap();
    assert_eq!((h, w, px.len()), (16, 16, 16 * 16 * 3));
    assert!(load_frame(root, 0, 0, 0, 0, "nope").is_err());
    assert!(generate(root, "bogus = [").is_err());
}
