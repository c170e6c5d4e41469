use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splathead::head_model::{
    joint_transforms, FlameParams, HeadModel, HeadModelConfig, Mat3, Vec3, JOINT_JAW, JOINT_NECK,
    JOINT_ROOT,
};
use splathead::splat::{
    covariance_from, deform_gaussians, CovarianceTransport, GaussianPrimitive, SH_LEN,
};

fn random_prims(rng: &mut ChaCha8Rng, n: usize, offset: f64) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            GaussianPrimitive {
                offset: Vec3::new(
                    rng.random_range(-offset..=offset),
                    rng.random_range(-offset..=offset),
                    rng.random_range(-offset..=offset),
                ),
                opacity: rng.random_range(0.0..1.0),
                rotation: q.map(|x| x / qn),
                scale: Vec3::new(
                    rng.random_range(1e-3..5e-3),
                    rng.random_range(1e-3..5e-3),
                    rng.random_range(1e-3..5e-3),
                ),
                sh: [0.1; SH_LEN],
            }
        })
        .collect()
}

fn sorted_eigenvalues(m: &Mat3) -> Vec<f64> {
    let mut e: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

fn setup() -> (HeadModel, splathead::head_model::UvChart) {
    let model = HeadModel::procedural(&HeadModelConfig::default());
    let chart = model.uv_chart(32);
    (model, chart)
}

#[test]
fn zero_offset_identity_pose_gives_canonical_anchors() {
    let (model, chart) = setup();
    let params = FlameParams::neutral(&model);
    let anchors = model.uv_surface_anchors(&params, &chart).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prims = random_prims(&mut rng, chart.n_texels(), 0.0);
    let set = deform_gaussians(&prims, &anchors, CovarianceTransport::Polar).unwrap();
    assert_eq!(set.len(), chart.n_valid());
    for (g, &t) in set.gaussians.iter().zip(&set.texels) {
        assert!((g.position - anchors.canonical[t]).norm() < 1e-12);
        let local = covariance_from(&prims[t].rotation, &prims[t].scale).unwrap();
        assert!((g.covariance - local).amax() < 1e-15);
    }
}

#[test]
fn global_rigid_pose_transports_rigidly() {
    let (model, chart) = setup();
    let mut params = FlameParams::neutral(&model);
    params.pose[JOINT_ROOT] = Vec3::new(0.3, -0.5, 0.2);
    params.translation = Vec3::new(0.05, -0.02, 0.1);
    let anchors = model.uv_surface_anchors(&params, &chart).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prims = random_prims(&mut rng, chart.n_texels(), 0.004);
    for mode in [CovarianceTransport::Polar, CovarianceTransport::FullAffine] {
        let set = deform_gaussians(&prims, &anchors, mode).unwrap();
        for (g, &t) in set.gaussians.iter().zip(&set.texels) {
            let local = covariance_from(&prims[t].rotation, &prims[t].scale).unwrap();
            let (a, b) = (sorted_eigenvalues(&g.covariance), sorted_eigenvalues(&local));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn random_pose_matches_direct_lbs_oracle() {
    let (model, chart) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = FlameParams::neutral(&model);
    for b in params.shape.iter_mut() {
        *b = rng.random_range(-1.5..1.5);
    }
    for e in params.expression.iter_mut() {
        *e = rng.random_range(-1.0..1.0);
    }
    for p in params.pose.iter_mut() {
        *p = Vec3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
    }
    params.translation = Vec3::new(0.01, 0.02, -0.03);
    let anchors = model.uv_surface_anchors(&params, &chart).unwrap();
    let prims = random_prims(&mut rng, chart.n_texels(), 0.004);
    let set = deform_gaussians(&prims, &anchors, CovarianceTransport::Polar).unwrap();

    let joints = model.regress_joints(&params.shape).unwrap();
    let transforms =
        joint_transforms(&joints, &model.parents, &params.pose, &params.translation).unwrap();
    let mesh = model.canonical_mesh(&params).unwrap();
    let mut single_joint = 0;
    for (g, &t) in set.gaussians.iter().zip(&set.texels) {
        // oracle: canonical anchor from the face's vertices and weights blended
        // barycentrically, then Σ_k w_k·T_k(anchor + Δx)
        let (fi, bary) = chart.texel(t).unwrap();
        let face = model.faces[fi];
        let nj = model.n_joints();
        let mut anchor = Vec3::zeros();
        let mut w = vec![0.0; nj];
        for k in 0..3 {
            let v = face[k] as usize;
            anchor += mesh[v] * bary[k];
            for j in 0..nj {
                w[j] += model.skinning_weights[v * nj + j] * bary[k];
            }
        }
        let x = anchor + prims[t].offset;
        let mut expected = Vec3::zeros();
        for (j, (r, tr)) in transforms.iter().enumerate() {
            expected += (r * x + tr) * w[j];
        }
        assert!((g.position - expected).norm() < 1e-8, "texel {t}");

        let c = &g.covariance;
        assert!((c - c.transpose()).amax() < 1e-12);
        assert!(sorted_eigenvalues(c)[0] > -1e-9);
        if w.iter().any(|&x| x == 1.0) {
            single_joint += 1;
            let local = covariance_from(&prims[t].rotation, &prims[t].scale).unwrap();
            let (a, b) = (sorted_eigenvalues(c), sorted_eigenvalues(&local));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }
    assert!(single_joint > 0);
}

#[test]
fn polar_transport_preserves_eigenvalues_under_blended_jaw() {
    let (model, chart) = setup();
    let mut params = FlameParams::neutral(&model);
    params.pose[JOINT_JAW] = Vec3::new(0.25, 0.0, 0.0);
    params.pose[JOINT_NECK] = Vec3::new(0.0, 0.3, 0.0);
    let anchors = model.uv_surface_anchors(&params, &chart).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let prims = random_prims(&mut rng, chart.n_texels(), 0.0);
    let set = deform_gaussians(&prims, &anchors, CovarianceTransport::Polar).unwrap();
    for (g, &t) in set.gaussians.iter().zip(&set.texels) {
        let local = covariance_from(&prims[t].rotation, &prims[t].scale).unwrap();
        let (a, b) = (sorted_eigenvalues(&g.covariance), sorted_eigenvalues(&local));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn mismatched_map_is_rejected() {
    let (model, chart) = setup();
    let anchors = model
        .uv_surface_anchors(&FlameParams::neutral(&model), &chart)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prims = random_prims(&mut rng, 10, 0.0);
    assert!(deform_gaussians(&prims, &anchors, CovarianceTransport::Polar).is_err());
}
