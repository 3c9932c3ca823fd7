use rayon::prelude::*;

use super::{fingerprint, head_slice, project, scatter_head, AttentionGrads, AttentionParams, HydraConfig, ProjectionBackward};
use crate::error::{Error, Result};
use crate::nbhd::{NeighborhoodSpec, Window};
use crate::tensor::activation::{softmax_row, softmax_row_vjp};
use crate::tensor::{gemm_nn, Scalar, Tensor};

/// Saved forward state of a neighborhood or Hydra attention call.
#[derive(Clone, Debug)]
pub struct NaState<F: Scalar = f64> {
    dims: (usize, usize),
    head_specs: Vec<NeighborhoodSpec>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    mixed: Vec<F>,
    probs: Vec<Tensor<F>>,
    fingerprint: u64,
}

impl<F: Scalar> NaState<F> {
    /// Attention probabilities of head `h`, shaped `[H × W × k_h²]`; the
    /// last axis enumerates the neighborhood in row-major window order.
    pub fn probs(&self, head: usize) -> &Tensor<F> {
        &self.probs[head]
    }

    pub fn heads(&self) -> usize {
        self.head_specs.len()
    }

    pub fn head_specs(&self) -> &[NeighborhoodSpec] {
        &self.head_specs
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }
}

struct Layout {
    h: usize,
    w: usize,
    d: usize,
    dh: usize,
}

impl Layout {
    fn n(&self) -> usize {
        self.h * self.w
    }
}

fn check<F: Scalar>(x: &Tensor<F>, params: &AttentionParams<F>, config: &HydraConfig) -> Result<Layout> {
    let d = params.d_model();
    if x.ndim() != 3 || x.shape()[2] != d {
        return Err(Error::dim(
            "hydra_forward_2d",
            format!("input {:?} is not H×W×{d}", x.shape()),
        ));
    }
    let dh = params.check_heads(config.total_heads())?;
    let (h, w) = (x.shape()[0], x.shape()[1]);
    config.validate_for(h, w)?;
    let specs = config.head_specs();
    if params.biases.len() != specs.len() {
        return Err(Error::dim(
            "hydra_forward_2d",
            format!("{} bias tables for {} heads", params.biases.len(), specs.len()),
        ));
    }
    for (i, (b, s)) in params.biases.iter().zip(&specs).enumerate() {
        let e = s.bias_extent();
        if b.shape() != [e, e] {
            return Err(Error::dim(
                "hydra_forward_2d",
                format!("head {i} bias table {:?} does not match kernel {}", b.shape(), s.kernel()),
            ));
        }
    }
    Ok(Layout { h, w, d, dh })
}

/// Querying token `(r, c)` of head `h` visits keys `rows[r] × cols[c]`.
struct HeadGeometry {
    rows: Vec<Window>,
    cols: Vec<Window>,
    kernel: usize,
    bias_extent: usize,
}

impl HeadGeometry {
    fn new(spec: NeighborhoodSpec, h: usize, w: usize) -> Self {
        HeadGeometry {
            rows: (0..h).map(|r| spec.window_unchecked(r, h)).collect(),
            cols: (0..w).map(|c| spec.window_unchecked(c, w)).collect(),
            kernel: spec.kernel(),
            bias_extent: spec.bias_extent(),
        }
    }

    /// `(key token, bias offset)` for every neighbor of `(r, c)`.
    #[inline]
    fn neighbors(&self, r: usize, c: usize, w: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (rw, cw) = (self.rows[r], self.cols[c]);
        (0..self.kernel).flat_map(move |a| {
            let row = rw.index(a) * w;
            let brow = rw.bias_slot(a) * self.bias_extent;
            (0..self.kernel).map(move |b| (row + cw.index(b), brow + cw.bias_slot(b)))
        })
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// One head's forward: returns `(head output [n×dh], probabilities [n×k²])`.
fn head_forward<F: Scalar>(
    lay: &Layout,
    geo: &HeadGeometry,
    q: &[F],
    k: &[F],
    v: &[F],
    bias: &[F],
) -> (Vec<F>, Vec<F>) {
    let (w, dh) = (lay.w, lay.dh);
    let m = geo.kernel * geo.kernel;
    let scale = F::of((dh as f64).sqrt());
    let mut probs = vec![F::zero(); lay.n() * m];
    let mut out = vec![F::zero(); lay.n() * dh];
    let per_row = |(r, (prow, orow)): (usize, (&mut [F], &mut [F]))| {
        for c in 0..w {
            let p = r * w + c;
            let qp = &q[p * dh..(p + 1) * dh];
            let logits = &mut prow[c * m..(c + 1) * m];
            for (slot, (key, off)) in logits.iter_mut().zip(geo.neighbors(r, c, w)) {
                *slot = dot(qp, &k[key * dh..(key + 1) * dh]) + bias[off];
            }
            softmax_row(logits, scale);
            let op = &mut orow[c * dh..(c + 1) * dh];
            for (&pj, (key, _)) in logits.iter().zip(geo.neighbors(r, c, w)) {
                for (o, &vv) in op.iter_mut().zip(&v[key * dh..(key + 1) * dh]) {
                    *o += pj * vv;
                }
            }
        }
    };
    probs
        .par_chunks_mut(w * m)
        .zip(out.par_chunks_mut(w * dh))
        .enumerate()
        .for_each(per_row);
    (out, probs)
}

/// Neighborhood attention with a single receptive field for every head.
pub fn na_forward_2d<F: Scalar>(
    x: &Tensor<F>,
    params: &AttentionParams<F>,
    heads: usize,
    spec: NeighborhoodSpec,
) -> Result<(Tensor<F>, NaState<F>)> {
    hydra_forward_2d(x, params, &HydraConfig::uniform(heads, spec)?)
}

/// Neighborhood attention where each head group carries its own kernel and
/// dilation. Input and output are `H × W × d_model`.
///
/// Logits are `q·k + B` over the head's `k²` neighbors, softmaxed with
/// temperature `sqrt(d_head)`; heads are concatenated in partition order and
/// projected by one `W_O`.
pub fn hydra_forward_2d<F: Scalar>(
    x: &Tensor<F>,
    params: &AttentionParams<F>,
    config: &HydraConfig,
) -> Result<(Tensor<F>, NaState<F>)> {
    let lay = check(x, params, config)?;
    x.ensure_finite("hydra_forward_2d")?;
    let n = lay.n();
    let q = project(x.data(), &params.w_q, n);
    let k = project(x.data(), &params.w_k, n);
    let v = project(x.data(), &params.w_v, n);
    let specs = config.head_specs();

    let mut mixed = vec![F::zero(); n * lay.d];
    let mut probs = Vec::with_capacity(specs.len());
    for (h, spec) in specs.iter().enumerate() {
        let geo = HeadGeometry::new(*spec, lay.h, lay.w);
        let (out, p) = head_forward(
            &lay,
            &geo,
            &head_slice(&q, n, lay.d, lay.dh, h),
            &head_slice(&k, n, lay.d, lay.dh, h),
            &head_slice(&v, n, lay.d, lay.dh, h),
            params.biases[h].data(),
        );
        scatter_head(&mut mixed, &out, lay.d, lay.dh, h);
        let kk = spec.kernel();
        probs.push(Tensor::new(&[lay.h, lay.w, kk * kk], p)?);
    }

    let mut y = Tensor::zeros(&[lay.h, lay.w, lay.d]);
    gemm_nn(n, lay.d, lay.d, &mixed, params.w_o.data(), y.data_mut());
    let state = NaState {
        dims: (lay.h, lay.w),
        head_specs: specs,
        q,
        k,
        v,
        mixed,
        probs,
        fingerprint: fingerprint(x, params),
    };
    Ok((y, state))
}

struct HeadGrads<F: Scalar> {
    dq: Vec<F>,
    dk: Vec<F>,
    dv: Vec<F>,
    dbias: Tensor<F>,
}

fn head_backward<F: Scalar>(
    lay: &Layout,
    geo: &HeadGeometry,
    probs: &[F],
    [q, k, v]: [&[F]; 3],
    dout: &[F],
) -> HeadGrads<F> {
    let (w, dh, n) = (lay.w, lay.dh, lay.n());
    let m = geo.kernel * geo.kernel;
    let scale = F::of((dh as f64).sqrt());
    let mut g = HeadGrads {
        dq: vec![F::zero(); n * dh],
        dk: vec![F::zero(); n * dh],
        dv: vec![F::zero(); n * dh],
        dbias: Tensor::zeros(&[geo.bias_extent, geo.bias_extent]),
    };
    let mut dp = vec![F::zero(); m];
    let mut da = vec![F::zero(); m];
    // Scatter-adds into dk/dv/dbias run in a fixed query order.
    for r in 0..lay.h {
        for c in 0..w {
            let p = r * w + c;
            let prow = &probs[p * m..(p + 1) * m];
            let gp = &dout[p * dh..(p + 1) * dh];
            for (slot, (key, _)) in dp.iter_mut().zip(geo.neighbors(r, c, w)) {
                *slot = dot(gp, &v[key * dh..(key + 1) * dh]);
            }
            softmax_row_vjp(prow, &dp, scale, &mut da);
            let qp = &q[p * dh..(p + 1) * dh];
            for (j, (key, off)) in geo.neighbors(r, c, w).enumerate() {
                let (a, pj) = (da[j], prow[j]);
                let ks = key * dh..(key + 1) * dh;
                for ((dq, &kv), (dk, &qv)) in g.dq[p * dh..(p + 1) * dh]
                    .iter_mut()
                    .zip(&k[ks.clone()])
                    .zip(g.dk[ks.clone()].iter_mut().zip(qp))
                {
                    *dq += a * kv;
                    *dk += a * qv;
                }
                for (dv, &gv) in g.dv[ks].iter_mut().zip(gp) {
                    *dv += pj * gv;
                }
                g.dbias.data_mut()[off] += a;
            }
        }
    }
    g
}

/// Backward pass of [`hydra_forward_2d`] / [`na_forward_2d`].
pub fn na_vjp<F: Scalar>(
    state: &NaState<F>,
    x: &Tensor<F>,
    params: &AttentionParams<F>,
    dy: &Tensor<F>,
) -> Result<AttentionGrads<F>> {
    if dy.shape() != x.shape() {
        return Err(Error::dim(
            "na_vjp",
            format!("upstream gradient {:?} but output {:?}", dy.shape(), x.shape()),
        ));
    }
    if x.ndim() != 3 || (x.shape()[0], x.shape()[1]) != state.dims || state.fingerprint != fingerprint(x, params) {
        return Err(Error::State(
            "neighborhood state was not produced from this input and parameters".into(),
        ));
    }
    let d = params.d_model();
    let n = state.dims.0 * state.dims.1;
    let dh = params.check_heads(state.heads())?;
    let lay = Layout {
        h: state.dims.0,
        w: state.dims.1,
        d,
        dh,
    };
    let back = ProjectionBackward { x: x.data(), n, params };
    let (dmixed, dw_o) = back.output(&state.mixed, dy.data());

    let per_head: Vec<HeadGrads<F>> = state
        .head_specs
        .par_iter()
        .enumerate()
        .map(|(h, spec)| {
            let geo = HeadGeometry::new(*spec, lay.h, lay.w);
            head_backward(
                &lay,
                &geo,
                state.probs[h].data(),
                [
                    &head_slice(&state.q, n, d, dh, h),
                    &head_slice(&state.k, n, d, dh, h),
                    &head_slice(&state.v, n, d, dh, h),
                ],
                &head_slice(&dmixed, n, d, dh, h),
            )
        })
        .collect();

    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    let mut dbias = Vec::with_capacity(per_head.len());
    for (h, g) in per_head.into_iter().enumerate() {
        scatter_head(&mut dq, &g.dq, d, dh, h);
        scatter_head(&mut dk, &g.dk, d, dh, h);
        scatter_head(&mut dv, &g.dv, d, dh, h);
        dbias.push(g.dbias);
    }
    back.finish(x.shape(), &dq, &dk, &dv, dw_o, dbias)
}
