//! Dense row-major tensors and the numeric primitives the attention,
//! embedding and metric modules are built from.
//!
//! Every forward primitive has a matching vector-Jacobian product (`*_vjp`).
//! Backward composition is wired by hand per architecture; there is no tape.

pub(crate) mod activation;
mod conv;
mod linalg;

pub use activation::{
    cross_entropy, cross_entropy_vjp, elementwise, elementwise_vjp, relu, relu_vjp,
    softmax_scaled, softmax_scaled_vjp, ElementwiseOp,
};
pub use conv::{
    conv2d, conv2d_vjp, maxpool2d, maxpool2d_vjp, maxpool2d_with_indices, window_extent,
    MaxPoolOutput,
};
pub use linalg::{matmul, matmul_vjp};
pub(crate) use linalg::{gemm_nn, gemm_nt, gemm_tn};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + std::ops::AddAssign + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Loops with fewer multiply-adds than this stay on the calling thread.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

/// Contiguous row-major N-d array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar = f64> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<F>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} holds {n} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data,
        })
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every multi-index, row-major.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> F) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data,
        }
    }

    /// I.i.d. normal entries with mean zero and the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite");
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::of(normal.sample(rng))).collect();
        Tensor {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data,
        }
    }

    /// I.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::of(rng.random_range(lo..hi))).collect();
        Tensor {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Flat offset of a multi-index. Panics when out of bounds.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter()
            .zip(&self.shape)
            .zip(&self.strides)
            .map(|((&i, &n), &s)| {
                assert!(i < n, "index {i} out of bounds for extent {n}");
                i * s
            })
            .sum()
    }

    pub fn at(&self, idx: &[usize]) -> F {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: F) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest...]`.
    pub fn row(&self, i: usize) -> &[F] {
        let w = self.strides.first().copied().unwrap_or(1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Reorders axes; `axes[i]` names the source axis that becomes axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::arg(
                "permute",
                format!("{axes:?} is not a permutation of {nd} axes"),
            ));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| self.strides[a]).collect();
        let out = Tensor::from_fn(&shape, |idx| {
            let o: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            self.data[o]
        });
        Ok(out)
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::dim("t", format!("expected a matrix, got {:?}", self.shape)));
        }
        self.permute(&[1, 0])
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            strides: self.strides.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: F, other: &Self) -> Result<()> {
        same_shape("axpy", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            strides: self.strides.clone(),
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    /// Fails with [`Error::NonFinite`] on NaN or infinity. Compiled out of
    /// release builds.
    #[inline]
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if cfg!(debug_assertions) {
            if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op, index });
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Default for Tensor<F> {
    fn default() -> Self {
        Tensor::zeros(&[0])
    }
}

/// Draws from the standard normal in the tensor's precision.
pub fn standard_normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R) -> F {
    let v: f64 = StandardNormal.sample(rng);
    F::of(v)
}

pub(crate) fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape, b.shape),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), &[12, 4, 1]);
        let r = t.reshape(&[6, 4]).unwrap();
        assert_eq!(r.strides(), &[4, 1]);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::zeros(&[4]).reshape(&[3]).is_err());
    }

    #[test]
    fn permute_rejects_non_permutation() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0]).is_err());
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let t = Tensor::<f64>::new(&[3], vec![0.0, f64::NAN, 1.0]).unwrap();
        if cfg!(debug_assertions) {
            assert_eq!(
                t.ensure_finite("test"),
                Err(Error::NonFinite { op: "test", index: 1 })
            );
        }
    }

    proptest! {
        #[test]
        fn reshape_and_permute_round_trip(
            a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in any::<u64>()
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f64>::randn(&[a, b, c], 1.0, &mut rng);
            let flat = t.reshape(&[a * b * c]).unwrap().reshape(&[a, b, c]).unwrap();
            prop_assert_eq!(&flat, &t);
            let p = t.permute(&[2, 0, 1]).unwrap();
            prop_assert_eq!(p.shape(), &[c, a, b]);
            let back = p.permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(&back, &t);
            for i in 0..a { for j in 0..b { for k in 0..c {
                prop_assert_eq!(p.at(&[k, i, j]), t.at(&[i, j, k]));
            }}}
        }
    }
}
