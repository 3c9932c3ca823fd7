//! Central finite differences, the independent oracle every analytic VJP in
//! this crate is checked against.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

/// `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate `i`.
///
/// Coordinates are evaluated in parallel, so `f` must be reentrant.
pub fn finite_diff_grad<G>(f: G, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    G: Fn(&Tensor<f64>) -> Result<f64> + Sync,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::arg("finite_diff_grad", format!("eps must be positive, got {eps}")));
    }
    let grads: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = x.clone();
            let base = x.data()[i];
            probe.data_mut()[i] = base + eps;
            let up = f(&probe)?;
            probe.data_mut()[i] = base - eps;
            let down = f(&probe)?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff_grad", index: i });
            }
            Ok((up - down) / (2.0 * eps))
        })
        .collect::<Result<_>>()?;
    Tensor::new(x.shape(), grads)
}

/// `max_i |a_i − b_i| / (max(‖a‖∞, ‖b‖∞) + 1e-12)`
pub fn rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let diff = a.max_abs_diff(b).map_err(|_| {
        Error::dim(
            "rel_error",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        )
    })?;
    Ok(diff / (a.max_abs().max(b.max_abs()) + 1e-12))
}

/// Outcome of comparing an analytic gradient with finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Multi-index of the coordinate with the largest absolute discrepancy.
    pub worst: Vec<usize>,
    pub passed: bool,
}

impl GradReport {
    pub fn compare(analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64) -> Result<Self> {
        let max_rel_error = rel_error(analytic, numeric)?;
        let flat = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .enumerate()
            .fold((0, -1.0), |best, (i, (a, b))| {
                let e = (a - b).abs();
                if e > best.1 { (i, e) } else { best }
            })
            .0;
        let mut worst = vec![0; analytic.ndim()];
        let mut rem = flat;
        for (w, &s) in worst.iter_mut().zip(analytic.strides()) {
            *w = rem / s;
            rem %= s;
        }
        Ok(GradReport {
            max_rel_error,
            worst,
            passed: max_rel_error < tol,
        })
    }

    /// Keeps whichever report has the larger error.
    pub fn worse(self, other: GradReport) -> GradReport {
        if other.max_rel_error > self.max_rel_error || (other.max_rel_error.is_nan() && !self.max_rel_error.is_nan()) {
            other
        } else {
            self
        }
    }
}

/// Finite-difference check of `analytic` as the gradient of `f` at `x`.
pub fn check_gradient<G>(f: G, x: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradReport>
where
    G: Fn(&Tensor<f64>) -> Result<f64> + Sync,
{
    let numeric = finite_diff_grad(f, x, eps)?;
    GradReport::compare(analytic, &numeric, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_and_linear() {
        let g = finite_diff_grad(|x| Ok(x.data().iter().map(|v| v * v).sum()), &t(&[1.0, 2.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-9 && (g.data()[1] - 4.0).abs() < 1e-9);
        let g = finite_diff_grad(|x| Ok(x.sum()), &t(&[-3.0, 0.5, 9.0]), 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn exact_on_low_degree_polynomials() {
        let x = t(&[0.3, -1.2, 2.5]);
        let f = |x: &Tensor<f64>| {
            let d = x.data();
            Ok(1.5 * d[0] * d[0] - 0.5 * d[0] * d[1] + 2.0 * d[2] + 0.25 * d[2] * d[2] - 4.0)
        };
        let exact = t(&[3.0 * 0.3 + 0.6, -0.15, 2.0 + 0.5 * 2.5]);
        for eps in [1e-6, 1e-5, 1e-4, 1e-3] {
            let g = finite_diff_grad(f, &x, eps).unwrap();
            assert!(rel_error(&g, &exact).unwrap() < 1e-8, "eps {eps}");
        }
    }

    #[test]
    fn rel_error_cases() {
        assert_eq!(rel_error(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap(), 0.0);
        assert!((rel_error(&t(&[1.0]), &t(&[1.0001])).unwrap() - 1e-4).abs() < 1e-6);
        assert_eq!(rel_error(&t(&[0.0]), &t(&[0.0])).unwrap(), 0.0);
        assert!(rel_error(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn report_locates_worst_coordinate() {
        let a = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.5, 1.0]).unwrap();
        let r = GradReport::compare(&a, &b, 1e-5).unwrap();
        assert_eq!(r.worst, vec![1, 0]);
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_evaluations_error() {
        let r = finite_diff_grad(|x| Ok(x.data()[0].ln()), &t(&[0.0]), 1e-5);
        assert!(r.is_err());
        assert!(finite_diff_grad(|x| Ok(x.sum()), &t(&[0.0]), 0.0).is_err());
    }
}
