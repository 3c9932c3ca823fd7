use rayon::prelude::*;

use super::{fingerprint, head_slice, project, scatter_head, AttentionGrads, AttentionParams, ProjectionBackward};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_scaled, softmax_scaled_vjp, Scalar, Tensor};

/// Everything the dense backward pass needs from its forward call.
#[derive(Clone, Debug)]
pub struct DenseState<F: Scalar = f64> {
    heads: usize,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    mixed: Vec<F>,
    /// `[heads × n × n]`
    probs: Tensor<F>,
    fingerprint: u64,
}

impl<F: Scalar> DenseState<F> {
    pub fn probs(&self) -> &Tensor<F> {
        &self.probs
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

fn check_input<F: Scalar>(x: &Tensor<F>, params: &AttentionParams<F>, heads: usize) -> Result<(usize, usize)> {
    let dh = params.check_heads(heads)?;
    let d = params.d_model();
    if x.ndim() != 2 || x.shape()[1] != d {
        return Err(Error::dim(
            "mha_dense",
            format!("input {:?} is not n×{d}", x.shape()),
        ));
    }
    Ok((x.shape()[0], dh))
}

/// Full softmax attention over an `n × d_model` sequence.
pub fn mha_dense<F: Scalar>(x: &Tensor<F>, params: &AttentionParams<F>, heads: usize) -> Result<Tensor<F>> {
    mha_dense_forward(x, params, heads).map(|(y, _)| y)
}

pub fn mha_dense_forward<F: Scalar>(
    x: &Tensor<F>,
    params: &AttentionParams<F>,
    heads: usize,
) -> Result<(Tensor<F>, DenseState<F>)> {
    let (n, dh) = check_input(x, params, heads)?;
    x.ensure_finite("mha_dense")?;
    let d = params.d_model();
    let q = project(x.data(), &params.w_q, n);
    let k = project(x.data(), &params.w_k, n);
    let v = project(x.data(), &params.w_v, n);
    let scale = F::of((dh as f64).sqrt());

    let per_head: Vec<(Vec<F>, Tensor<F>)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let qh = head_slice(&q, n, d, dh, h);
            let kh = head_slice(&k, n, d, dh, h);
            let vh = head_slice(&v, n, d, dh, h);
            let mut scores = Tensor::zeros(&[n, n]);
            gemm_nt(n, dh, n, &qh, &kh, scores.data_mut());
            let p = softmax_scaled(&scores, scale)?;
            let mut out = vec![F::zero(); n * dh];
            gemm_nn(n, n, dh, p.data(), &vh, &mut out);
            Ok((out, p))
        })
        .collect::<Result<_>>()?;

    let mut mixed = vec![F::zero(); n * d];
    let mut probs = Vec::with_capacity(heads * n * n);
    for (h, (out, p)) in per_head.into_iter().enumerate() {
        scatter_head(&mut mixed, &out, d, dh, h);
        probs.extend_from_slice(p.data());
    }
    let mut y = Tensor::zeros(&[n, d]);
    gemm_nn(n, d, d, &mixed, params.w_o.data(), y.data_mut());
    let state = DenseState {
        heads,
        q,
        k,
        v,
        mixed,
        probs: Tensor::new(&[heads, n, n], probs)?,
        fingerprint: fingerprint(x, params),
    };
    Ok((y, state))
}

/// Backward pass of [`mha_dense_forward`]. `params.biases` of the result is empty.
pub fn mha_dense_vjp<F: Scalar>(
    state: &DenseState<F>,
    x: &Tensor<F>,
    params: &AttentionParams<F>,
    dy: &Tensor<F>,
) -> Result<AttentionGrads<F>> {
    let heads = state.heads;
    let (n, dh) = check_input(x, params, heads)?;
    if dy.shape() != x.shape() {
        return Err(Error::dim(
            "mha_dense_vjp",
            format!("upstream gradient {:?} but output {:?}", dy.shape(), x.shape()),
        ));
    }
    if state.fingerprint != fingerprint(x, params) {
        return Err(Error::State(
            "dense state was not produced from this input and parameters".into(),
        ));
    }
    let d = params.d_model();
    let scale = F::of((dh as f64).sqrt());
    let back = ProjectionBackward { x: x.data(), n, params };
    let (dmixed, dw_o) = back.output(&state.mixed, dy.data());

    let per_head: Vec<[Vec<F>; 3]> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let qh = head_slice(&state.q, n, d, dh, h);
            let kh = head_slice(&state.k, n, d, dh, h);
            let vh = head_slice(&state.v, n, d, dh, h);
            let dout = head_slice(&dmixed, n, d, dh, h);
            let p = Tensor::new(&[n, n], state.probs.data()[h * n * n..(h + 1) * n * n].to_vec())?;
            let mut dp = Tensor::zeros(&[n, n]);
            gemm_nt(n, dh, n, &dout, &vh, dp.data_mut());
            let ds = softmax_scaled_vjp(&p, &dp, scale)?;
            let mut dq = vec![F::zero(); n * dh];
            gemm_nn(n, n, dh, ds.data(), &kh, &mut dq);
            let mut dk = vec![F::zero(); n * dh];
            gemm_tn(n, n, dh, ds.data(), &qh, &mut dk);
            let mut dv = vec![F::zero(); n * dh];
            gemm_tn(n, n, dh, p.data(), &dout, &mut dv);
            Ok([dq, dk, dv])
        })
        .collect::<Result<_>>()?;

    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    for (h, [q, k, v]) in per_head.iter().enumerate() {
        scatter_head(&mut dq, q, d, dh, h);
        scatter_head(&mut dk, k, d, dh, h);
        scatter_head(&mut dv, v, d, dh, h);
    }
    back.finish(x.shape(), &dq, &dk, &dv, dw_o, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Per-head loops straight from the definition.
    fn naive(x: &Tensor<f64>, p: &AttentionParams<f64>, heads: usize) -> Tensor<f64> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let dh = d / heads;
        let proj = |w: &Tensor<f64>| {
            Tensor::from_fn(&[n, d], |i| (0..d).map(|t| x.at(&[i[0], t]) * w.at(&[t, i[1]])).sum::<f64>())
        };
        let (q, k, v) = (proj(&p.w_q), proj(&p.w_k), proj(&p.w_v));
        let mut mixed = Tensor::<f64>::zeros(&[n, d]);
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|t| q.at(&[i, h * dh + t]) * k.at(&[j, h * dh + t])).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for t in 0..dh {
                    let s: f64 = (0..n).map(|j| (logits[j] - m).exp() / z * v.at(&[j, h * dh + t])).sum();
                    mixed.set(&[i, h * dh + t], s);
                }
            }
        }
        Tensor::from_fn(&[n, d], |i| (0..d).map(|t| mixed.at(&[i[0], t]) * p.w_o.at(&[t, i[1]])).sum())
    }

    #[test]
    fn single_token_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::<f64>::random(4, &[], 0.5, &mut rng);
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let y = mha_dense(&x, &p, 2).unwrap();
        let want = crate::tensor::matmul(&crate::tensor::matmul(&x, &p.w_v).unwrap(), &p.w_o).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn zero_logits_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let z = Tensor::<f64>::zeros(&[d, d]);
        let p = AttentionParams::new(z.clone(), z, Tensor::eye(d), Tensor::eye(d), vec![]).unwrap();
        let x = Tensor::randn(&[5, d], 1.0, &mut rng);
        let y = mha_dense(&x, &p, 2).unwrap();
        for t in 0..d {
            let mean: f64 = (0..5).map(|i| x.at(&[i, t])).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((y.at(&[i, t]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::<f64>::random(8, &[], 0.4, &mut rng);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let d = mha_dense(&x, &p, 2).unwrap().max_abs_diff(&naive(&x, &p, 2)).unwrap();
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn rejects_indivisible_heads_and_stale_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::<f64>::random(6, &[], 0.4, &mut rng);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        assert!(matches!(mha_dense(&x, &p, 4), Err(Error::Argument { .. })));
        let (y, state) = mha_dense_forward(&x, &p, 2).unwrap();
        let other = x.map(|v| v + 1.0);
        assert!(matches!(mha_dense_vjp(&state, &other, &p, &y), Err(Error::State(_))));
        let grads = mha_dense_vjp(&state, &x, &p, &Tensor::zeros(&[3, 6])).unwrap();
        assert_eq!(grads.dx.max_abs(), 0.0);
    }
}
