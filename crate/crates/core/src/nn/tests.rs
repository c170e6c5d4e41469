use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Small network touching every op; returns the scalar output.
fn toy<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, y: Var) -> Var {
    let p = |g: &mut Graph<T>, name: &str| g.param(store, store.id(name).unwrap(), true);
    let (w1, b1) = (p(g, "c1.w"), p(g, "c1.b"));
    let h = g.conv(x, w1, Some(b1), 2, 1);
    let (gg, gb) = (p(g, "n1.g"), p(g, "n1.b"));
    let h = g.group_norm(h, gg, gb, 2);
    let h = g.leaky_relu(h, 0.2);
    let h = g.upsample(h);
    let h = g.concat(&[h, y]);
    let (w2, b2) = (p(g, "c2.w"), p(g, "c2.b"));
    let h = g.conv(h, w2, Some(b2), 1, 0);
    let pooled = g.avg_pool(h);
    let sq = g.sum_squares(pooled);
    let scaled = g.scale(h, 0.7);
    let sum = g.add(h, scaled);
    let target = vec![T::of(0.05); g.value(sum).len()];
    let l1 = g.l1(sum, &target);
    let sp = g.softplus_mean(pooled, -1.0);
    let wts: Vec<T> = (0..g.value(h).len()).map(|i| T::of(((i * 7 % 5) as f64 - 2.0) * 0.1)).collect();
    let d = g.dot(h, &wts);
    g.weighted_sum(&[(sq, 0.3), (l1, 1.0), (sp, 0.5), (d, 1.0)])
}

fn toy_store(rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add_conv("c1", 4, 3, 3, 1.0, rng);
    s.add_norm("n1", 4);
    s.add_conv("c2", 3, 6, 1, 1.0, rng);
    // non-trivial affine and bias so every path is exercised
    for name in ["c1.b", "n1.g", "n1.b"] {
        let id = s.id(name).unwrap();
        for v in s.get_mut(id).data.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    s
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = toy_store(&mut rng);
    let x0 = random_tensor([2, 3, 6, 6], &mut rng);
    let y0 = random_tensor([2, 2, 6, 6], &mut rng);
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>, y: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let yv = g.leaf(y.clone());
        let out = toy(&mut g, store, xv, yv);
        (g, xv, yv, out)
    };
    let (g, xv, yv, out) = eval(&store, &x0, &y0);
    let grads = g.backward(&[(out, vec![1.0])]);
    let pgrads = grads.params(&g, store.len());
    let h = 1e-6;
    let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic - fd).abs() / fd.abs().max(1e-3);
        assert!(err < 1e-5, "{what}: analytic {analytic} vs fd {fd}");
    };
    let f = |s: &ParamStore<f64>, x: &Tensor<f64>, y: &Tensor<f64>| {
        let (g, _, _, o) = eval(s, x, y);
        g.scalar(o)
    };
    for i in (0..x0.len()).step_by(5) {
        let (mut xp, mut xm) = (x0.clone(), x0.clone());
        xp.data[i] += h;
        xm.data[i] -= h;
        check(grads.get(xv).unwrap()[i], f(&store, &xp, &y0), f(&store, &xm, &y0), "x");
    }
    for i in (0..y0.len()).step_by(3) {
        let (mut yp, mut ym) = (y0.clone(), y0.clone());
        yp.data[i] += h;
        ym.data[i] -= h;
        check(grads.get(yv).unwrap()[i], f(&store, &x0, &yp), f(&store, &x0, &ym), "y");
    }
    for id in 0..store.len() {
        for i in (0..store.get(id).len()).step_by(3) {
            let (mut sp, mut sm) = (store.clone(), store.clone());
            sp.get_mut(id).data[i] += h;
            sm.get_mut(id).data[i] -= h;
            let a = pgrads[id].as_ref().unwrap()[i];
            check(a, f(&sp, &x0, &y0), f(&sm, &x0, &y0), store.name(id));
        }
    }
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
        let x = random_tensor([2, 3, 7, 8], &mut rng);
        let w = random_tensor([5, 3, k, k], &mut rng);
        let b = random_tensor([1, 5, 1, 1], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let out = g.conv(xv, wv, Some(bv), stride, pad);
        let o = g.value(out);
        let (ho, wo) = (o.shape[2], o.shape[3]);
        assert_eq!(ho, (7 + 2 * pad - k) / stride + 1);
        for n in 0..2 {
            for co in 0..5 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data[co];
                        for ci in 0..3 {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && iy < 7 && ix >= 0 && ix < 8 {
                                        acc += w.data[((co * 3 + ci) * k + ki) * k + kj]
                                            * x.data[((n * 3 + ci) * 7 + iy as usize) * 8 + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = o.data[((n * 5 + co) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-12, "k={k} s={stride}: {got} vs {acc}");
                    }
                }
            }
        }
    }
}

#[test]
fn group_norm_standardises_each_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor([2, 6, 4, 4], &mut rng);
    let mut s = ParamStore::new();
    let (gid, bid) = s.add_norm("n", 6);
    let mut g = Graph::new();
    let xv = g.input(x);
    let (gv, bv) = (g.param(&s, gid, false), g.param(&s, bid, false));
    let y = g.group_norm(xv, gv, bv, 3);
    let out = g.value(y);
    for seg in out.data.chunks_exact(2 * 16) {
        let mean = seg.iter().sum::<f64>() / 32.0;
        let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn frozen_params_get_no_gradient_but_pass_it_on() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::<f64>::new();
    let (w, b) = s.add_conv("c", 2, 2, 3, 1.0, &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(random_tensor([1, 2, 4, 4], &mut rng));
    let (wv, bv) = (g.param(&s, w, false), g.param(&s, b, true));
    let y = g.conv(x, wv, Some(bv), 1, 1);
    let l = g.sum_squares(y);
    let grads = g.backward(&[(l, vec![1.0])]);
    let p = grads.params(&g, s.len());
    assert!(p[w].is_none());
    assert!(p[b].is_some());
    assert!(grads.get(x).unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn shared_parameter_gradients_add_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::<f64>::new();
    let (w, _) = s.add_conv("c", 1, 1, 1, 1.0, &mut rng);
    let x = random_tensor([1, 1, 2, 2], &mut rng);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let w1 = g.param(&s, w, true);
    let w2 = g.param(&s, w, true);
    let a = g.conv(xv, w1, None, 1, 0);
    let b = g.conv(xv, w2, None, 1, 0);
    let sum = g.add(a, b);
    let ones = vec![1.0; 4];
    let l = g.dot(sum, &ones);
    let grads = g.backward(&[(l, vec![1.0])]);
    let p = grads.params(&g, s.len());
    let expected = 2.0 * x.data.iter().sum::<f64>();
    assert!((p[w].as_ref().unwrap()[0] - expected).abs() < 1e-12);
}

#[test]
fn softplus_at_zero_and_clipped() {
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::zeros([1, 1, 3, 3]));
    let l = g.softplus_mean(z, 1.0);
    assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
    let big = g.input(Tensor::from_vec([1, 1, 1, 2], vec![1e6, -1e6]).unwrap());
    let real = g.softplus_mean(big, -1.0);
    // logit +1e6 on a real sample is clipped to 20: softplus(−20) ≈ 2e-9
    let expected = (softplus_ref(-20.0) + softplus_ref(20.0)) / 2.0;
    assert!((g.scalar(real) - expected).abs() < 1e-12);
}

fn softplus_ref(z: f64) -> f64 {
    (1.0 + z.exp()).ln()
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("p", Tensor::from_vec([1, 1, 1, 3], vec![3.0, -2.0, 0.5]).unwrap());
    let mut opt = Adam::new(&s, AdamConfig::default());
    for _ in 0..2000 {
        let g: Vec<f64> = s.get(id).data.iter().map(|v| 2.0 * (v - 1.0)).collect();
        opt.step(&mut s, &[Some(g)], 1e-2);
    }
    for v in &s.get(id).data {
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }
}

#[test]
fn adam_first_step_has_size_lr() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("p", Tensor::from_vec([1, 1, 1, 2], vec![0.0, 0.0]).unwrap());
    let mut opt = Adam::new(&s, AdamConfig::default());
    opt.step(&mut s, &[Some(vec![5.0, -0.01])], 0.1);
    let p = &s.get(id).data;
    assert!((p[0] + 0.1).abs() < 1e-6 && (p[1] - 0.1).abs() < 1e-4);
}

#[test]
fn store_and_optimizer_roundtrip_through_container() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s32: ParamStore<f32> = {
        let mut s = ParamStore::new();
        s.add_conv("a", 3, 2, 3, 1.0, &mut rng);
        s
    };
    let mut opt = Adam::new(&s32, AdamConfig::default());
    let mut s = s32.clone();
    let grads: Vec<Option<Vec<f32>>> = (0..s.len()).map(|i| Some(vec![0.5; s.get(i).len()])).collect();
    opt.step(&mut s, &grads, 1e-3);
    let mut c = Container::new("test");
    s.write(&mut c, "w.").unwrap();
    opt.write(&mut c, "o.").unwrap();
    let c = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    let mut s2 = s32.clone();
    s2.read(&c, "w.").unwrap();
    let mut opt2 = Adam::new(&s2, AdamConfig::default());
    opt2.read(&c, "o.").unwrap();
    assert_eq!(s2, s);
    assert_eq!(opt2, opt);
    assert_eq!(s2.digest(0), s.digest(0));
    assert_ne!(s2.digest(0), s32.digest(0));
}

#[test]
fn f32_and_f64_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let store = toy_store(&mut rng);
    let x = random_tensor([1, 3, 6, 6], &mut rng);
    let y = random_tensor([1, 2, 6, 6], &mut rng);
    let mut g = Graph::new();
    let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
    let o64 = toy(&mut g, &store, xv, yv);
    let mut s32 = ParamStore::<f32>::new();
    for i in 0..store.len() {
        s32.add(store.name(i), store.get(i).cast());
    }
    let mut g32 = Graph::new();
    let (xv, yv) = (g32.input(x.cast()), g32.input(y.cast()));
    let o32 = toy(&mut g32, &s32, xv, yv);
    let (a, b) = (g.scalar(o64), g32.scalar(o32) as f64);
    assert!((a - b).abs() < 1e-4 * a.abs().max(1.0), "{a} vs {b}");
}
