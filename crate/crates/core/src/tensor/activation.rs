use super::{same_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Softmax of `x / scale` along the last axis.
///
/// `scale` is a temperature divisor: attention passes `sqrt(d_head)`.
pub fn softmax_scaled<F: Scalar>(x: &Tensor<F>, scale: F) -> Result<Tensor<F>> {
    if scale <= F::zero() || !scale.is_finite() {
        return Err(Error::arg(
            "softmax_scaled",
            format!("scale must be positive and finite, got {scale}"),
        ));
    }
    x.ensure_finite("softmax_scaled")?;
    let n = x.shape().last().copied().unwrap_or(0);
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(n) {
        softmax_row(row, scale);
    }
    Ok(out)
}

/// In-place stable softmax of `row / scale`.
pub(crate) fn softmax_row<F: Scalar>(row: &mut [F], scale: F) {
    let inv = F::one() / scale;
    let c = row
        .iter()
        .fold(F::neg_infinity(), |m, &v| m.max(v * inv));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v * inv - c).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// VJP of [`softmax_scaled`] from its output `y`.
pub fn softmax_scaled_vjp<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>, scale: F) -> Result<Tensor<F>> {
    same_shape("softmax_scaled_vjp", y, dy)?;
    let n = y.shape().last().copied().unwrap_or(0);
    let mut dx = Tensor::zeros(y.shape());
    if n == 0 {
        return Ok(dx);
    }
    for ((yr, gr), dr) in y
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.data_mut().chunks_mut(n))
    {
        softmax_row_vjp(yr, gr, scale, dr);
    }
    Ok(dx)
}

/// `dx = y ⊙ (dy − ⟨y, dy⟩) / scale`, written into `dx`.
pub(crate) fn softmax_row_vjp<F: Scalar>(y: &[F], dy: &[F], scale: F, dx: &mut [F]) {
    let dot: F = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &p), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d = p * (g - dot) / scale;
    }
}

/// Pointwise operators. Tensor operands must match the input's shape.
#[derive(Clone, Copy, Debug)]
pub enum ElementwiseOp<'a, F: Scalar> {
    Relu,
    AddConst(F),
    MulConst(F),
    Add(&'a Tensor<F>),
    Mul(&'a Tensor<F>),
}

pub fn elementwise<F: Scalar>(x: &Tensor<F>, op: ElementwiseOp<'_, F>) -> Result<Tensor<F>> {
    x.ensure_finite("elementwise")?;
    Ok(match op {
        ElementwiseOp::Relu => x.map(|v| v.max(F::zero())),
        ElementwiseOp::AddConst(c) => x.map(|v| v + c),
        ElementwiseOp::MulConst(c) => x.map(|v| v * c),
        ElementwiseOp::Add(y) => zip(x, y, |a, b| a + b)?,
        ElementwiseOp::Mul(y) => zip(x, y, |a, b| a * b)?,
    })
}

/// Returns `(dx, d_operand)`; the second entry is `Some` only for the
/// tensor-tensor variants.
pub fn elementwise_vjp<F: Scalar>(
    x: &Tensor<F>,
    op: ElementwiseOp<'_, F>,
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
    same_shape("elementwise_vjp", x, dy)?;
    Ok(match op {
        ElementwiseOp::Relu => (relu_vjp(x, dy)?, None),
        ElementwiseOp::AddConst(_) => (dy.clone(), None),
        ElementwiseOp::MulConst(c) => (dy.map(|g| g * c), None),
        ElementwiseOp::Add(y) => {
            same_shape("elementwise_vjp", x, y)?;
            (dy.clone(), Some(dy.clone()))
        }
        ElementwiseOp::Mul(y) => (zip(dy, y, |g, b| g * b)?, Some(zip(dy, x, |g, a| g * a)?)),
    })
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    elementwise(x, ElementwiseOp::Relu)
}

/// Subgradient 0 at the kink.
pub fn relu_vjp<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
    zip(x, dy, |a, g| if a > F::zero() { g } else { F::zero() })
}

fn zip<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    same_shape("elementwise", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

fn check_labels<F: Scalar>(op: &'static str, logits: &Tensor<F>, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim(
            op,
            format!(
                "logits {:?} do not pair with {} labels",
                logits.shape(),
                labels.len()
            ),
        ));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if b == 0 {
        return Err(Error::arg(op, "empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::arg(op, format!("label {bad} out of range for {c} classes")));
    }
    Ok((b, c))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let (b, c) = check_labels("cross_entropy", logits, labels)?;
    logits.ensure_finite("cross_entropy")?;
    let mut total = F::zero();
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
        total += lse - row[label];
    }
    Ok(total / F::of(b as f64))
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_vjp<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let (b, c) = check_labels("cross_entropy_vjp", logits, labels)?;
    let mut g = logits.clone();
    let inv_b = F::one() / F::of(b as f64);
    for (row, &label) in g.data_mut().chunks_mut(c).zip(labels) {
        softmax_row(row, F::one());
        row[label] = row[label] - F::one();
        for v in row.iter_mut() {
            *v = *v * inv_b;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let y = softmax_scaled(&t(&[2], &[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_scaled(&t(&[2], &[3f64.ln(), 0.0]), 1.0).unwrap();
        assert!((y.data()[0] - 0.75).abs() < 1e-15 && (y.data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_scale() {
        let x = t(&[2], &[0.0, 1.0]);
        assert!(matches!(softmax_scaled(&x, 0.0), Err(Error::Argument { .. })));
        assert!(matches!(softmax_scaled(&x, -1.0), Err(Error::Argument { .. })));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions_and_shift_invariant(
            v in prop::collection::vec(-20.0f64..20.0, 1..12), shift in -50.0f64..50.0, scale in 0.1f64..8.0
        ) {
            let n = v.len();
            let x = t(&[1, n], &v);
            let y = softmax_scaled(&x, scale).unwrap();
            let s: f64 = y.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
            let shifted = softmax_scaled(&x.map(|a| a + shift), scale).unwrap();
            prop_assert!(shifted.max_abs_diff(&y).unwrap() < 1e-12);
        }
    }

    #[test]
    fn elementwise_identities() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(elementwise(&x, ElementwiseOp::AddConst(0.0)).unwrap(), x);
        let ones = Tensor::ones(&[3]);
        assert_eq!(elementwise(&x, ElementwiseOp::Mul(&ones)).unwrap(), x);
        let short = Tensor::ones(&[2]);
        assert!(elementwise(&x, ElementwiseOp::Add(&short)).is_err());
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let l = cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = cross_entropy(&t(&[1, 2], &[1e3, 0.0]), &[0]).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]),
            Err(Error::Argument { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::<f64>::randn(&[4, 3], 1.5, &mut rng);
        let labels = [0, 2, 1, 2];
        let mut want = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let z: f64 = (0..3).map(|j| logits.at(&[i, j]).exp()).sum();
            want -= (logits.at(&[i, lab]).exp() / z).ln();
        }
        want /= 4.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - want).abs() < 1e-8);
    }
}
