use rayon::prelude::*;

use super::{Scalar, Tensor, PAR_THRESHOLD};
use crate::error::{Error, Result};

/// `out[m×q] += a[m×p] · b[p×q]`
pub(crate) fn gemm_nn<F: Scalar>(m: usize, p: usize, q: usize, a: &[F], b: &[F], out: &mut [F]) {
    let row = |(i, o): (usize, &mut [F])| {
        let ar = &a[i * p..(i + 1) * p];
        for (kk, &aik) in ar.iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let br = &b[kk * q..(kk + 1) * q];
            for (oj, &bj) in o.iter_mut().zip(br) {
                *oj += aik * bj;
            }
        }
    };
    if q == 0 {
        return;
    }
    if m * p * q >= PAR_THRESHOLD {
        out[..m * q].par_chunks_mut(q).enumerate().for_each(row);
    } else {
        out[..m * q].chunks_mut(q).enumerate().for_each(row);
    }
}

/// `out[m×p] += a[m×q] · b[p×q]ᵀ`
pub(crate) fn gemm_nt<F: Scalar>(m: usize, q: usize, p: usize, a: &[F], b: &[F], out: &mut [F]) {
    let row = |(i, o): (usize, &mut [F])| {
        let ar = &a[i * q..(i + 1) * q];
        for (j, oj) in o.iter_mut().enumerate() {
            let br = &b[j * q..(j + 1) * q];
            let mut acc = F::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *oj += acc;
        }
    };
    if p == 0 {
        return;
    }
    if m * p * q >= PAR_THRESHOLD {
        out[..m * p].par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out[..m * p].chunks_mut(p).enumerate().for_each(row);
    }
}

/// `out[p×q] += a[m×p]ᵀ · b[m×q]`
pub(crate) fn gemm_tn<F: Scalar>(m: usize, p: usize, q: usize, a: &[F], b: &[F], out: &mut [F]) {
    let row = |(kk, o): (usize, &mut [F])| {
        for i in 0..m {
            let aik = a[i * p + kk];
            if aik == F::zero() {
                continue;
            }
            let br = &b[i * q..(i + 1) * q];
            for (oj, &bj) in o.iter_mut().zip(br) {
                *oj += aik * bj;
            }
        }
    };
    if q == 0 {
        return;
    }
    if m * p * q >= PAR_THRESHOLD {
        out[..p * q].par_chunks_mut(q).enumerate().for_each(row);
    } else {
        out[..p * q].chunks_mut(q).enumerate().for_each(row);
    }
}

/// Resolved geometry of a (possibly batched) matrix product.
struct Plan {
    m: usize,
    p: usize,
    q: usize,
    lead: Vec<usize>,
    a_lead: Vec<usize>,
    b_lead: Vec<usize>,
}

impl Plan {
    fn new<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Self> {
        let mismatch = || {
            Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
            )
        };
        if a.ndim() < 2 || b.ndim() < 2 {
            return Err(mismatch());
        }
        let (sa, sb) = (a.shape(), b.shape());
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (p2, q) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if p != p2 {
            return Err(mismatch());
        }
        let a_lead = sa[..sa.len() - 2].to_vec();
        let b_lead = sb[..sb.len() - 2].to_vec();
        let nd = a_lead.len().max(b_lead.len());
        let pad = |v: &[usize]| {
            let mut out = vec![1; nd - v.len()];
            out.extend_from_slice(v);
            out
        };
        let (pa, pb) = (pad(&a_lead), pad(&b_lead));
        let mut lead = Vec::with_capacity(nd);
        for (&x, &y) in pa.iter().zip(&pb) {
            lead.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(mismatch()),
            });
        }
        Ok(Plan {
            m,
            p,
            q,
            lead,
            a_lead: pa,
            b_lead: pb,
        })
    }

    fn batches(&self) -> usize {
        self.lead.iter().product()
    }

    /// Maps a broadcast batch number to the batch numbers of `a` and `b`.
    fn operands(&self, batch: usize) -> (usize, usize) {
        let (mut rem, mut ia, mut ib, mut sa, mut sb) = (batch, 0, 0, 1, 1);
        for ax in (0..self.lead.len()).rev() {
            let i = rem % self.lead[ax];
            rem /= self.lead[ax];
            if self.a_lead[ax] != 1 {
                ia += i * sa;
            }
            if self.b_lead[ax] != 1 {
                ib += i * sb;
            }
            sa *= self.a_lead[ax];
            sb *= self.b_lead[ax];
        }
        (ia, ib)
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.lead.clone();
        s.extend([self.m, self.q]);
        s
    }
}

/// Matrix product over the last two axes. Leading axes broadcast.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let plan = Plan::new(a, b)?;
    a.ensure_finite("matmul")?;
    b.ensure_finite("matmul")?;
    let (m, p, q) = (plan.m, plan.p, plan.q);
    let mut out = Tensor::zeros(&plan.out_shape());
    for batch in 0..plan.batches() {
        let (ia, ib) = plan.operands(batch);
        gemm_nn(
            m,
            p,
            q,
            &a.data()[ia * m * p..(ia + 1) * m * p],
            &b.data()[ib * p * q..(ib + 1) * p * q],
            &mut out.data_mut()[batch * m * q..(batch + 1) * m * q],
        );
    }
    Ok(out)
}

/// Gradients of [`matmul`] with respect to both operands. Broadcast axes are
/// summed back down to each operand's own shape.
pub fn matmul_vjp<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    dc: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let plan = Plan::new(a, b)?;
    if dc.shape() != plan.out_shape().as_slice() {
        return Err(Error::dim(
            "matmul_vjp",
            format!(
                "upstream gradient {:?} does not match product shape {:?}",
                dc.shape(),
                plan.out_shape()
            ),
        ));
    }
    let (m, p, q) = (plan.m, plan.p, plan.q);
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for batch in 0..plan.batches() {
        let (ia, ib) = plan.operands(batch);
        let g = &dc.data()[batch * m * q..(batch + 1) * m * q];
        gemm_nt(
            m,
            q,
            p,
            g,
            &b.data()[ib * p * q..(ib + 1) * p * q],
            &mut da.data_mut()[ia * m * p..(ia + 1) * m * p],
        );
        gemm_tn(
            m,
            p,
            q,
            &a.data()[ia * m * p..(ia + 1) * m * p],
            g,
            &mut db.data_mut()[ib * p * q..(ib + 1) * p * q],
        );
    }
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, q]);
        for i in 0..m {
            for j in 0..q {
                let mut s = 0.0;
                for k in 0..p {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn identity_and_hand_cases() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let col = Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&x, &col).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn random_pair_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn batched_broadcasts_leading_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 4, 2]);
        for batch in 0..3 {
            let ab = Tensor::new(&[4, 5], a.row(batch).to_vec()).unwrap();
            let want = naive(&ab, &b);
            assert_eq!(c.row(batch), want.data());
        }
        let bb = Tensor::randn(&[2, 1, 5, 2], 1.0, &mut rng);
        assert_eq!(matmul(&a, &bb).unwrap().shape(), &[2, 3, 4, 2]);
    }

    #[test]
    fn vjp_reduces_broadcast_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let dc = Tensor::randn(&[3, 2, 3], 1.0, &mut rng);
        let (_, db) = matmul_vjp(&a, &b, &dc).unwrap();
        let mut want = Tensor::<f64>::zeros(&[4, 3]);
        for batch in 0..3 {
            let ab = Tensor::new(&[2, 4], a.row(batch).to_vec()).unwrap();
            let g = Tensor::new(&[2, 3], dc.row(batch).to_vec()).unwrap();
            want.axpy(1.0, &naive(&ab.t().unwrap(), &g)).unwrap();
        }
        assert!(db.max_abs_diff(&want).unwrap() < 1e-12);
    }
}
