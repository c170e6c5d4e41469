//! Small reverse-mode autodiff over NCHW tensors, enough for the generator,
//! the discriminator and the fixed feature pyramids used by the losses.
//!
//! Everything runs single-threaded with a fixed summation order, so results
//! are bit-reproducible for a given input.

mod adam;
mod graph;
#[cfg(test)]
mod tests;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use graph::{Grads, Graph, Var};

/// Floating-point element type of the network (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, o: Self) -> Self;
    fn min(self, o: Self) -> Self;
    fn is_finite(self) -> bool;

    /// `c[m×n] = op(a)[m×k] · op(b)[k×n] + beta·c`, all row-major; `ta`/`tb`
    /// mean the stored matrix is the transpose.
    #[allow(clippy::too_many_arguments)]
    fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn put(c: &mut Container, name: &str, shape: &[usize], data: &[Self]) -> Result<()>;
    fn get(c: &Container, name: &str) -> Result<(Vec<usize>, Vec<Self>)>;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $put:ident, $get:ident) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NAME: &'static str = stringify!($t);

            fn of(x: f64) -> Self {
                x as $t
            }
            fn f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn max(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
            fn min(self, o: Self) -> Self {
                <$t>::min(self, o)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the slices cover every element addressed by the
                // strides above (checked by the assert).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn put(c: &mut Container, name: &str, shape: &[usize], data: &[Self]) -> Result<()> {
                c.$put(name, shape, data.to_vec())
            }
            fn get(c: &Container, name: &str) -> Result<(Vec<usize>, Vec<Self>)> {
                c.$get(name)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, put_f32, get_f32);
impl_real!(f64, matrixmultiply::dgemm, put_f64, get_f64);

/// Dense NCHW tensor. Weights use `[c_out, c_in, k, k]`, biases `[1, c, 1, 1]`,
/// scalars `[1, 1, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![T::ZERO; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("tensor {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Slice of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * s..(n + 1) * s]
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let mut shape = first.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!("stack: {:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        Ok(Tensor { shape, data })
    }

    /// Batch item `n` as a standalone tensor.
    pub fn select(&self, n: usize) -> Self {
        Tensor { shape: [1, self.shape[1], self.shape[2], self.shape[3]], data: self.item(n).to_vec() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of a tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Named, ordered collection of tensors (network weights or optimisable
/// feature maps).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// He-normal convolution weight `[c_out, c_in, k, k]` plus zero bias;
    /// returns `(weight, bias)` ids named `{name}.w` / `{name}.b`.
    pub fn add_conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        gain: f64,
        rng: &mut R,
    ) -> (ParamId, ParamId) {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid std");
        let data = (0..c_out * c_in * k * k).map(|_| T::of(normal.sample(rng))).collect();
        let w = self.add(format!("{name}.w"), Tensor { shape: [c_out, c_in, k, k], data });
        let b = self.add(format!("{name}.b"), Tensor::zeros([1, c_out, 1, 1]));
        (w, b)
    }

    /// Group-norm affine parameters (γ=1, β=0) named `{name}.g` / `{name}.b`.
    pub fn add_norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        let g = self.add(format!("{name}.g"), Tensor { shape: [1, c, 1, 1], data: vec![T::ONE; c] });
        let b = self.add(format!("{name}.b"), Tensor::zeros([1, c, 1, 1]));
        (g, b)
    }

    /// SHA-256 over the name, shape and little-endian bytes of one tensor.
    pub fn digest(&self, id: ParamId) -> String {
        let mut h = Sha256::new();
        h.update(self.names[id].as_bytes());
        for s in self.tensors[id].shape {
            h.update((s as u64).to_le_bytes());
        }
        for v in &self.tensors[id].data {
            h.update(v.f64().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Writes every tensor as `{prefix}{name}`.
    pub fn write(&self, c: &mut Container, prefix: &str) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            T::put(c, &format!("{prefix}{n}"), &t.shape, &t.data)?;
        }
        Ok(())
    }

    /// Overwrites every tensor from `{prefix}{name}`, checking shapes.
    pub fn read(&mut self, c: &Container, prefix: &str) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let (shape, data) = T::get(c, &format!("{prefix}{n}"))?;
            if shape != t.shape {
                return Err(Error::Shape(format!("parameter {n}: stored {shape:?}, expected {:?}", t.shape)));
            }
            t.data = data;
        }
        Ok(())
    }
}
