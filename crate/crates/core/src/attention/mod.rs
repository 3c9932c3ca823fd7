//! Multi-head attention: dense, 2-D neighborhood, and Hydra (per-head-group
//! kernel and dilation), each with an analytic backward pass.
//!
//! Projections follow the row-vector convention `y = x · W`. Q, K and V are
//! each computed by one fused `d_model × d_model` projection and split into
//! contiguous head slices; head `h` owns columns `h·d_h .. (h+1)·d_h`.

mod cost;
mod dense;
mod local;

pub use cost::{flop_mem_estimate, AttentionKind, CostEstimate};
pub use dense::{mha_dense, mha_dense_forward, mha_dense_vjp, DenseState};
pub use local::{hydra_forward_2d, na_forward_2d, na_vjp, NaState};

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nbhd::NeighborhoodSpec;
use crate::tensor::{Scalar, Tensor};

/// Projection weights plus one relative-position bias table per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<F: Scalar = f64> {
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
    /// `(2k_h − 1) × (2k_h − 1)` per head, indexed by relative rank along
    /// rows then columns. Empty for dense attention.
    pub biases: Vec<Tensor<F>>,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn new(
        w_q: Tensor<F>,
        w_k: Tensor<F>,
        w_v: Tensor<F>,
        w_o: Tensor<F>,
        biases: Vec<Tensor<F>>,
    ) -> Result<Self> {
        let d = w_q.shape().first().copied().unwrap_or(0);
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [d, d] {
                return Err(Error::dim(
                    "AttentionParams",
                    format!("projection {:?} is not {d}×{d}", w.shape()),
                ));
            }
        }
        for b in &biases {
            if b.ndim() != 2 || b.shape()[0] != b.shape()[1] || b.shape()[0] % 2 == 0 {
                return Err(Error::dim(
                    "AttentionParams",
                    format!("bias table {:?} is not (2k−1)×(2k−1)", b.shape()),
                ));
            }
        }
        Ok(AttentionParams { w_q, w_k, w_v, w_o, biases })
    }

    /// Normal projections with standard deviation `std` and zero bias tables
    /// sized for `bias_kernels` (one kernel per head; empty for dense).
    pub fn random<R: Rng + ?Sized>(d_model: usize, bias_kernels: &[usize], std: f64, rng: &mut R) -> Self {
        let mut w = || Tensor::randn(&[d_model, d_model], std, rng);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let biases = bias_kernels
            .iter()
            .map(|&k| Tensor::zeros(&[2 * k - 1, 2 * k - 1]))
            .collect();
        AttentionParams { w_q, w_k, w_v, w_o, biases }
    }

    /// Replaces every bias table with normal draws.
    pub fn randomize_biases<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for b in &mut self.biases {
            *b = Tensor::randn(b.shape(), std, rng);
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            w_q: Tensor::zeros(self.w_q.shape()),
            w_k: Tensor::zeros(self.w_k.shape()),
            w_v: Tensor::zeros(self.w_v.shape()),
            w_o: Tensor::zeros(self.w_o.shape()),
            biases: self.biases.iter().map(|b| Tensor::zeros(b.shape())).collect(),
        }
    }

    /// All parameter tensors in a fixed order: `W_Q, W_K, W_V, W_O, B_0, …`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<F>> {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
            .into_iter()
            .chain(self.biases.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
            .into_iter()
            .chain(self.biases.iter_mut())
    }

    /// In-place `self += alpha · other` over every tensor.
    pub fn axpy(&mut self, alpha: F, other: &Self) -> Result<()> {
        if self.biases.len() != other.biases.len() {
            return Err(Error::dim("AttentionParams::axpy", "bias table counts differ"));
        }
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    fn check_heads(&self, heads: usize) -> Result<usize> {
        let d = self.d_model();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::arg(
                "attention",
                format!("d_model {d} is not divisible by {heads} heads"),
            ));
        }
        Ok(d / heads)
    }
}

/// Gradients of an attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads<F: Scalar = f64> {
    pub dx: Tensor<F>,
    pub params: AttentionParams<F>,
}

/// A run of consecutive heads sharing one receptive field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadGroup {
    pub heads: usize,
    pub spec: NeighborhoodSpec,
}

/// Ordered partition of a layer's heads into groups with their own
/// (kernel, dilation). Concatenation follows partition order.
///
/// Parses from comma-separated `KxD:HEADS` groups, e.g. `7x1:2,7x32:2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HydraConfig {
    groups: Vec<HeadGroup>,
}

impl HydraConfig {
    pub fn new(groups: Vec<HeadGroup>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(|g| g.heads == 0) {
            return Err(Error::arg(
                "HydraConfig",
                "need at least one group and every group needs a head",
            ));
        }
        Ok(HydraConfig { groups })
    }

    pub fn uniform(heads: usize, spec: NeighborhoodSpec) -> Result<Self> {
        Self::new(vec![HeadGroup { heads, spec }])
    }

    pub fn groups(&self) -> &[HeadGroup] {
        &self.groups
    }

    pub fn total_heads(&self) -> usize {
        self.groups.iter().map(|g| g.heads).sum()
    }

    /// The spec of every head, in concatenation order.
    pub fn head_specs(&self) -> Vec<NeighborhoodSpec> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.spec, g.heads))
            .collect()
    }

    pub fn bias_kernels(&self) -> Vec<usize> {
        self.head_specs().iter().map(|s| s.kernel()).collect()
    }

    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        for g in &self.groups {
            g.spec.validate(height)?;
            g.spec.validate(width)?;
        }
        Ok(())
    }
}

impl FromStr for HydraConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |part: &str| {
            Error::arg(
                "HydraConfig",
                format!("cannot parse group {part:?}; expected KxD:HEADS"),
            )
        };
        let mut groups = Vec::new();
        for part in s.split(',').map(str::trim) {
            let (kd, heads) = part.split_once(':').ok_or_else(|| bad(part))?;
            let (k, d) = kd.split_once('x').ok_or_else(|| bad(part))?;
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| bad(part));
            let spec = NeighborhoodSpec::new(parse(k)?, parse(d)?)?;
            groups.push(HeadGroup { heads: parse(heads)?, spec });
        }
        HydraConfig::new(groups)
    }
}

impl fmt::Display for HydraConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}x{}:{}", g.spec.kernel(), g.spec.dilation(), g.heads)?;
        }
        Ok(())
    }
}

/// Identifies the exact input and parameters a forward pass ran on.
fn fingerprint<F: Scalar>(x: &Tensor<F>, params: &AttentionParams<F>) -> u64 {
    let mut h = DefaultHasher::new();
    for t in std::iter::once(x).chain(params.tensors()) {
        t.shape().hash(&mut h);
        for v in t.data() {
            v.as_f64().to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// `x[n×d] · w[d×d]`
fn project<F: Scalar>(x: &[F], w: &Tensor<F>, n: usize) -> Vec<F> {
    let d = w.shape()[0];
    let mut out = vec![F::zero(); n * d];
    crate::tensor::gemm_nn(n, d, d, x, w.data(), &mut out);
    out
}

/// Copies head `h`'s columns of an `n×d` buffer into a contiguous `n×dh` one.
fn head_slice<F: Scalar>(src: &[F], n: usize, d: usize, dh: usize, h: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(n * dh);
    for row in src.chunks(d).take(n) {
        out.extend_from_slice(&row[h * dh..(h + 1) * dh]);
    }
    out
}

fn scatter_head<F: Scalar>(dst: &mut [F], src: &[F], d: usize, dh: usize, h: usize) {
    for (drow, srow) in dst.chunks_mut(d).zip(src.chunks(dh)) {
        drow[h * dh..(h + 1) * dh].copy_from_slice(srow);
    }
}

/// Shared tail of every backward pass: given per-token gradients of the
/// concatenated head outputs and of Q, K, V, produce the full gradient set.
struct ProjectionBackward<'a, F: Scalar> {
    x: &'a [F],
    n: usize,
    params: &'a AttentionParams<F>,
}

impl<F: Scalar> ProjectionBackward<'_, F> {
    /// `dmixed = dY · W_Oᵀ` and `dW_O = mixedᵀ · dY`.
    fn output(&self, mixed: &[F], dy: &[F]) -> (Vec<F>, Tensor<F>) {
        let d = self.params.d_model();
        let mut dmixed = vec![F::zero(); self.n * d];
        crate::tensor::gemm_nt(self.n, d, d, dy, self.params.w_o.data(), &mut dmixed);
        let mut dw_o = Tensor::zeros(&[d, d]);
        crate::tensor::gemm_tn(self.n, d, d, mixed, dy, dw_o.data_mut());
        (dmixed, dw_o)
    }

    fn finish(
        &self,
        x_shape: &[usize],
        dq: &[F],
        dk: &[F],
        dv: &[F],
        dw_o: Tensor<F>,
        biases: Vec<Tensor<F>>,
    ) -> Result<AttentionGrads<F>> {
        let d = self.params.d_model();
        let n = self.n;
        let mut dx = vec![F::zero(); n * d];
        let mut grad_w = |g: &[F], w: &Tensor<F>| {
            crate::tensor::gemm_nt(n, d, d, g, w.data(), &mut dx);
            let mut dw = Tensor::zeros(&[d, d]);
            crate::tensor::gemm_tn(n, d, d, self.x, g, dw.data_mut());
            dw
        };
        let dw_q = grad_w(dq, &self.params.w_q);
        let dw_k = grad_w(dk, &self.params.w_k);
        let dw_v = grad_w(dv, &self.params.w_v);
        Ok(AttentionGrads {
            dx: Tensor::new(x_shape, dx)?,
            params: AttentionParams {
                w_q: dw_q,
                w_k: dw_k,
                w_v: dw_v,
                w_o: dw_o,
                biases,
            },
        })
    }
}
