use super::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Upsample { x: Var },
    AvgPool { x: Var },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, s: T },
    L1 { x: Var, target: Vec<T> },
    Softplus { x: Var, sign: T },
    WeightedSum { xs: Vec<(Var, T)> },
    SumSquares { x: Var },
    Dot { x: Var, w: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Logits are clipped to this magnitude inside softplus.
pub const LOGIT_CLIP: f64 = 20.0;
pub const NORM_EPS: f64 = 1e-5;

/// Tape of operations recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients from [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Per-parameter gradients (summed over every use in the graph); `None`
    /// for parameters that were absent or frozen.
    pub fn params(&self, graph: &Graph<T>, n_params: usize) -> Vec<Option<Vec<T>>> {
        let mut out: Vec<Option<Vec<T>>> = vec![None; n_params];
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                match &mut out[*id] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one image `[c, h, w]` into `[c·k·k, ho·wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [T]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[c·k·k, ho·wo]` back into `[c, h, w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [T]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Real>(z: T) -> T {
    z.max(T::ZERO) + (T::ONE + (-z.abs()).exp()).ln()
}

fn logistic<T: Real>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Free variable that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Parameter `id` of `store`; frozen parameters still pass gradients
    /// through to their inputs but get none themselves.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), trainable)
    }

    /// 2D convolution with square kernel, zero padding.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape;
        let ws = self.value(w).shape;
        assert_eq!(xs[1], ws[1], "conv: input has {} channels, weight expects {}", xs[1], ws[1]);
        assert_eq!(ws[2], ws[3], "conv: square kernels only");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv: kernel larger than padded input");
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let p = ho * wo;
        let kk = c * k * k;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::ZERO; kk * p] };
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value.data;
            for i in 0..n {
                let src = xv.item(i);
                let colsr: &[T] = if direct {
                    src
                } else {
                    im2col(src, c, h, wd, k, stride, pad, &mut cols);
                    &cols
                };
                let dst = &mut out.data[i * co * p..(i + 1) * co * p];
                T::gemm(false, false, co, p, kk, wv, colsr, T::ZERO, dst);
                if let Some(b) = b {
                    let bv = &self.nodes[b.0].value.data;
                    for (o, row) in dst.chunks_exact_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[o]);
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b, stride, pad }, ng)
    }

    /// Group normalisation with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.value(x).shape;
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        let cg = c / groups;
        let m = cg * h * w;
        let eps = T::of(NORM_EPS);
        let inv_m = T::of(1.0 / m as f64);
        let mut out = Tensor::zeros(xs);
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        {
            let xv = &self.nodes[x.0].value.data;
            let gv = &self.nodes[gamma.0].value.data;
            let bv = &self.nodes[beta.0].value.data;
            for i in 0..n {
                for g in 0..groups {
                    let off = (i * c + g * cg) * h * w;
                    let seg = &xv[off..off + m];
                    let mean = seg.iter().copied().sum::<T>() * inv_m;
                    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
                    let rstd = T::ONE / (var + eps).sqrt();
                    means.push(mean);
                    rstds.push(rstd);
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        let o = off + cc * h * w;
                        for j in 0..h * w {
                            out.data[o + j] = (xv[o + j] - mean) * rstd * gv[ch] + bv[ch];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let v = self.value(x);
        let out = Tensor { shape: v.shape, data: v.data.iter().map(|&a| if a > T::ZERO { a } else { a * s }).collect() };
        let ng = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope: s }, ng)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape;
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.data[(p * 2 * h + y) * 2 * w + xx] = v.data[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Upsample { x }, ng)
    }

    /// 2×2 average pooling (odd trailing rows/columns are dropped).
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape;
        let (ho, wo) = (h / 2, w / 2);
        let q = T::of(0.25);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let at = |dy: usize, dx: usize| v.data[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                    out.data[(p * ho + y) * wo + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * q;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::AvgPool { x }, ng)
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let first = self.value(xs[0]).shape;
        let (n, h, w) = (first[0], first[2], first[3]);
        for &v in xs {
            let s = self.value(v).shape;
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat: {s:?} vs {first:?}");
        }
        let ctot: usize = xs.iter().map(|&v| self.value(v).shape[1]).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for i in 0..n {
            for &v in xs {
                data.extend_from_slice(self.value(v).item(i));
            }
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor { shape: [n, ctot, h, w], data }, Op::Concat { xs: xs.to_vec() }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add: shape mismatch");
        let out = Tensor { shape: va.shape, data: va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect() };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(x);
        let out = Tensor { shape: v.shape, data: v.data.iter().map(|&a| a * s).collect() };
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, s }, ng)
    }

    /// Scalar `mean |x − target|`.
    pub fn l1(&mut self, x: Var, target: &[T]) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), target.len(), "l1: target length");
        let s = v.data.iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum::<T>() / T::of(v.len() as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::L1 { x, target: target.to_vec() }, ng)
    }

    /// Scalar `mean softplus(sign · clip(x))`; sign +1 penalises positive
    /// logits, −1 negative ones.
    pub fn softplus_mean(&mut self, x: Var, sign: f64) -> Var {
        let sign = T::of(sign);
        let clip = T::of(LOGIT_CLIP);
        let v = self.value(x);
        let s = v.data.iter().map(|&a| softplus(sign * a.max(-clip).min(clip))).sum::<T>() / T::of(v.len() as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Softplus { x, sign }, ng)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, xs: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, T)> = xs.iter().map(|&(v, w)| (v, T::of(w))).collect();
        let mut s = T::ZERO;
        for &(v, w) in &terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum: scalars only");
            s += w * self.scalar(v);
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(s), Op::WeightedSum { xs: terms }, ng)
    }

    /// Scalar `Σ x²`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|&a| a * a).sum::<T>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, ng)
    }

    /// Scalar `Σ x·w` for a constant `w`.
    pub fn dot(&mut self, x: Var, w: &[T]) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), w.len(), "dot: length");
        let s = v.data.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Dot { x, w: w.to_vec() }, ng)
    }

    /// Reverse pass from the given seeds (`d output / d node`).
    pub fn backward(&self, seeds: &[(Var, Vec<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).len(), "seed length");
            accumulate(&mut grads, *v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, stride, pad } => self.conv_backward(&mut grads, &g, *x, *w, *b, *stride, *pad),
                Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                    self.norm_backward(&mut grads, &g, *x, *gamma, *beta, *groups, mean, rstd)
                }
                Op::LeakyRelu { x, slope } => {
                    if self.needs(*x) {
                        let xv = &self.value(*x).data;
                        let d: Vec<T> = xv.iter().zip(&g).map(|(&a, &d)| if a > T::ZERO { d } else { d * *slope }).collect();
                        accumulate(&mut grads, *x, &d);
                    }
                }
                Op::Upsample { x } => {
                    if self.needs(*x) {
                        let [n, c, h, w] = self.value(*x).shape;
                        let mut d = vec![T::ZERO; n * c * h * w];
                        for p in 0..n * c {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    d[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, &d);
                    }
                }
                Op::AvgPool { x } => {
                    if self.needs(*x) {
                        let [n, c, h, w] = self.value(*x).shape;
                        let (ho, wo) = (h / 2, w / 2);
                        let q = T::of(0.25);
                        let mut d = vec![T::ZERO; n * c * h * w];
                        for p in 0..n * c {
                            for y in 0..ho {
                                for xx in 0..wo {
                                    let gv = g[(p * ho + y) * wo + xx] * q;
                                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        d[(p * h + 2 * y + dy) * w + 2 * xx + dx] += gv;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, &d);
                    }
                }
                Op::Concat { xs } => {
                    let [n, ctot, h, w] = node.value.shape;
                    let hw = h * w;
                    let mut c0 = 0;
                    for &v in xs {
                        let c = self.value(v).shape[1];
                        if self.needs(v) {
                            let mut d = Vec::with_capacity(n * c * hw);
                            for i in 0..n {
                                d.extend_from_slice(&g[(i * ctot + c0) * hw..(i * ctot + c0 + c) * hw]);
                            }
                            accumulate(&mut grads, v, &d);
                        }
                        c0 += c;
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            accumulate(&mut grads, v, &g);
                        }
                    }
                }
                Op::Scale { x, s } => {
                    if self.needs(*x) {
                        let d: Vec<T> = g.iter().map(|&a| a * *s).collect();
                        accumulate(&mut grads, *x, &d);
                    }
                }
                Op::L1 { x, target } => {
                    if self.needs(*x) {
                        let xv = &self.value(*x).data;
                        let k = g[0] / T::of(xv.len() as f64);
                        let d: Vec<T> = xv
                            .iter()
                            .zip(target)
                            .map(|(&a, &b)| {
                                if a > b {
                                    k
                                } else if a < b {
                                    -k
                                } else {
                                    T::ZERO
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *x, &d);
                    }
                }
                Op::Softplus { x, sign } => {
                    if self.needs(*x) {
                        let xv = &self.value(*x).data;
                        let clip = T::of(LOGIT_CLIP);
                        let k = g[0] / T::of(xv.len() as f64);
                        let d: Vec<T> = xv
                            .iter()
                            .map(|&a| {
                                if a > clip || a < -clip {
                                    T::ZERO
                                } else {
                                    k * *sign * logistic(*sign * a)
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *x, &d);
                    }
                }
                Op::WeightedSum { xs } => {
                    for &(v, w) in xs {
                        if self.needs(v) {
                            accumulate(&mut grads, v, &[g[0] * w]);
                        }
                    }
                }
                Op::SumSquares { x } => {
                    if self.needs(*x) {
                        let two = T::of(2.0) * g[0];
                        let d: Vec<T> = self.value(*x).data.iter().map(|&a| two * a).collect();
                        accumulate(&mut grads, *x, &d);
                    }
                }
                Op::Dot { x, w } => {
                    if self.needs(*x) {
                        let d: Vec<T> = w.iter().map(|&a| a * g[0]).collect();
                        accumulate(&mut grads, *x, &d);
                    }
                }
            }
        }
        Grads { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, grads: &mut [Option<Vec<T>>], g: &[T], x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, c, h, wd] = xv.shape;
        let (co, k) = (wv.shape[0], wv.shape[2]);
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let p = ho * wo;
        let kk = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let mut db = vec![T::ZERO; co];
            for i in 0..n {
                for (o, row) in g[i * co * p..(i + 1) * co * p].chunks_exact(p).enumerate() {
                    db[o] += row.iter().copied().sum::<T>();
                }
            }
            accumulate(grads, b, &db);
        }
        let mut dw = if need_w { vec![T::ZERO; co * kk] } else { Vec::new() };
        let mut dx = if need_x { vec![T::ZERO; n * c * h * wd] } else { Vec::new() };
        let mut cols = if direct || !need_w { Vec::new() } else { vec![T::ZERO; kk * p] };
        let mut dcols = if direct || !need_x { Vec::new() } else { vec![T::ZERO; kk * p] };
        for i in 0..n {
            let gi = &g[i * co * p..(i + 1) * co * p];
            if need_w {
                let colsr: &[T] = if direct {
                    xv.item(i)
                } else {
                    im2col(xv.item(i), c, h, wd, k, stride, pad, &mut cols);
                    &cols
                };
                T::gemm(false, true, co, kk, p, gi, colsr, T::ONE, &mut dw);
            }
            if need_x {
                let dxi = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
                if direct {
                    T::gemm(true, false, kk, p, co, &wv.data, gi, T::ONE, dxi);
                } else {
                    T::gemm(true, false, kk, p, co, &wv.data, gi, T::ZERO, &mut dcols);
                    col2im(&dcols, c, h, wd, k, stride, pad, dxi);
                }
            }
        }
        if need_w {
            accumulate(grads, w, &dw);
        }
        if need_x {
            accumulate(grads, x, &dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[T],
        rstd: &[T],
    ) {
        let xv = self.value(x);
        let gv = &self.value(gamma).data;
        let [n, c, h, w] = xv.shape;
        let hw = h * w;
        let cg = c / groups;
        let m = cg * hw;
        let inv_m = T::of(1.0 / m as f64);
        let mut dgamma = vec![T::ZERO; c];
        let mut dbeta = vec![T::ZERO; c];
        let need_x = self.needs(x);
        let mut dx = if need_x { vec![T::ZERO; xv.len()] } else { Vec::new() };
        for i in 0..n {
            for gr in 0..groups {
                let (mu, rs) = (mean[i * groups + gr], rstd[i * groups + gr]);
                let off = (i * c + gr * cg) * hw;
                let mut s1 = T::ZERO;
                let mut s2 = T::ZERO;
                for cc in 0..cg {
                    let ch = gr * cg + cc;
                    for j in 0..hw {
                        let idx = off + cc * hw + j;
                        let xhat = (xv.data[idx] - mu) * rs;
                        dgamma[ch] += g[idx] * xhat;
                        dbeta[ch] += g[idx];
                        let dxhat = g[idx] * gv[ch];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                    }
                }
                if need_x {
                    let (m1, m2) = (s1 * inv_m, s2 * inv_m);
                    for cc in 0..cg {
                        let ch = gr * cg + cc;
                        for j in 0..hw {
                            let idx = off + cc * hw + j;
                            let xhat = (xv.data[idx] - mu) * rs;
                            dx[idx] = rs * (g[idx] * gv[ch] - m1 - xhat * m2);
                        }
                    }
                }
            }
        }
        if self.needs(gamma) {
            accumulate(grads, gamma, &dgamma);
        }
        if self.needs(beta) {
            accumulate(grads, beta, &dbeta);
        }
        if need_x {
            accumulate(grads, x, &dx);
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
        slot => *slot = Some(g.to_vec()),
    }
}
