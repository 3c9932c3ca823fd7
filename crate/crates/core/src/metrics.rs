//! Fréchet distance between Gaussians, the closed form behind FID, and
//! sample-moment estimation for externally extracted feature vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;
const RESIDUE_TOL: f64 = 1e-8;

/// Mean and covariance of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    mu: Vec<f64>,
    sigma: Tensor<f64>,
}

impl GaussianMoments {
    /// Validates that `sigma` is `m × m`, symmetric and PSD up to 1e-9
    /// (relative to its largest entry when that exceeds one).
    pub fn new(mu: Vec<f64>, sigma: Tensor<f64>) -> Result<Self> {
        let m = mu.len();
        if sigma.shape() != [m, m] {
            return Err(Error::dim(
                "GaussianMoments",
                format!("covariance {:?} does not match mean of length {m}", sigma.shape()),
            ));
        }
        let scale = sigma.max_abs().max(1.0);
        for i in 0..m {
            for j in 0..i {
                if (sigma.at(&[i, j]) - sigma.at(&[j, i])).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::arg("GaussianMoments", format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        let min_eig = SymmetricEigen::new(to_matrix(&sigma)).eigenvalues.min();
        if m > 0 && min_eig < -PSD_TOL * scale {
            return Err(Error::arg(
                "GaussianMoments",
                format!("covariance has eigenvalue {min_eig:e} below zero"),
            ));
        }
        Ok(GaussianMoments { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn to_matrix(t: &Tensor<f64>) -> DMatrix<f64> {
    let m = t.shape()[0];
    DMatrix::from_row_slice(m, m, t.data())
}

/// Principal square root of a symmetric PSD matrix; negative roundoff
/// eigenvalues are treated as zero.
fn psd_sqrt(a: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `sqrt(‖μ0 − μ1‖² + Tr(Σ0 + Σ1 − 2(Σ0Σ1)^{1/2}))`.
///
/// The covariance term is evaluated as `min_U ‖Σ0^{1/2} − Σ1^{1/2}·U‖²_F`
/// over orthogonal `U`, which equals the trace expression but is a sum of
/// squares, so identical moments give zero instead of a roundoff residue.
pub fn frechet_gaussian(g0: &GaussianMoments, g1: &GaussianMoments) -> Result<f64> {
    if g0.dim() != g1.dim() {
        return Err(Error::dim(
            "frechet_gaussian",
            format!("moment dimensions {} and {} differ", g0.dim(), g1.dim()),
        ));
    }
    let mean_sq: f64 = g0.mu.iter().zip(&g1.mu).map(|(a, b)| (a - b).powi(2)).sum();
    if g0.dim() == 0 {
        return Ok(mean_sq.sqrt());
    }
    let a = psd_sqrt(to_matrix(&g0.sigma));
    let b = psd_sqrt(to_matrix(&g1.sigma));
    let svd = (b.transpose() * &a).svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let rotation = u * v_t;
    let cov_sq = (a - b * rotation).norm_squared();
    let total = mean_sq + cov_sq;
    if total < -RESIDUE_TOL {
        return Err(Error::arg("frechet_gaussian", format!("negative squared distance {total:e}")));
    }
    Ok(total.max(0.0).sqrt())
}

/// Sample mean and unbiased (`1/(N−1)`) covariance of `N × m` samples.
pub fn gaussian_moments(samples: &Tensor<f64>) -> Result<GaussianMoments> {
    if samples.ndim() != 2 {
        return Err(Error::dim("gaussian_moments", format!("expected N×m samples, got {:?}", samples.shape())));
    }
    let (n, m) = (samples.shape()[0], samples.shape()[1]);
    if n < 2 {
        return Err(Error::arg("gaussian_moments", format!("need at least 2 samples, got {n}")));
    }
    samples.ensure_finite("gaussian_moments")?;
    let x = DMatrix::from_row_slice(n, m, samples.data());
    let mu: DVector<f64> = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - mu[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    let sigma = Tensor::from_fn(&[m, m], |i| cov[(i[0], i[1])]);
    GaussianMoments::new(mu.iter().copied().collect(), sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(mu: &[f64], var: &[f64]) -> GaussianMoments {
        let m = mu.len();
        let s = Tensor::from_fn(&[m, m], |i| if i[0] == i[1] { var[i[0]] } else { 0.0 });
        GaussianMoments::new(mu.to_vec(), s).unwrap()
    }

    fn random_psd(m: usize, rng: &mut ChaCha8Rng) -> GaussianMoments {
        let a = Tensor::<f64>::randn(&[m, m + 2], 1.0, rng);
        let s = crate::tensor::matmul(&a, &a.t().unwrap()).unwrap();
        let s = Tensor::from_fn(&[m, m], |i| 0.5 * (s.at(&[i[0], i[1]]) + s.at(&[i[1], i[0]])));
        let mu = Tensor::<f64>::randn(&[m], 1.0, rng).into_data();
        GaussianMoments::new(mu, s).unwrap()
    }

    /// The textbook route: eigendecompose Σ0^{1/2} Σ1 Σ0^{1/2} and take the trace.
    fn trace_form_sq(g0: &GaussianMoments, g1: &GaussianMoments) -> f64 {
        let s0 = to_matrix(g0.sigma());
        let s1 = to_matrix(g1.sigma());
        let r = psd_sqrt(s0.clone());
        let inner = &r * &s1 * &r;
        let inner = (&inner + inner.transpose()) * 0.5;
        let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
        let mean_sq: f64 = g0.mu().iter().zip(g1.mu()).map(|(a, b)| (a - b).powi(2)).sum();
        mean_sq + s0.trace() + s1.trace() - 2.0 * tr_sqrt
    }

    #[test]
    fn closed_forms() {
        let a = diag(&[0.0], &[1.0]);
        assert_eq!(frechet_gaussian(&a, &a).unwrap(), 0.0);
        let d = frechet_gaussian(&a, &diag(&[3.0], &[1.0])).unwrap();
        assert!((d - 3.0).abs() < 1e-9);
        let d = frechet_gaussian(&a, &diag(&[0.0], &[4.0])).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_matches_per_coordinate_formula() {
        let (m0, v0): ([f64; 3], [f64; 3]) = ([0.5, -1.0, 2.0], [1.0, 0.25, 3.0]);
        let (m1, v1) = ([0.0, 1.0, 2.5], [2.0, 0.5, 0.1]);
        let want: f64 = (0..3)
            .map(|i| (m0[i] - m1[i]).powi(2) + v0[i] + v1[i] - 2.0 * (v0[i] * v1[i]).sqrt())
            .sum::<f64>()
            .sqrt();
        let got = frechet_gaussian(&diag(&m0, &v0), &diag(&m1, &v1)).unwrap();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn agrees_with_trace_form_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in 1..=6 {
            let (a, b) = (random_psd(m, &mut rng), random_psd(m, &mut rng));
            let ab = frechet_gaussian(&a, &b).unwrap();
            let ba = frechet_gaussian(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8);
            assert!((ab * ab - trace_form_sq(&a, &b)).abs() < 1e-8 * (1.0 + ab * ab));
            assert!(frechet_gaussian(&a, &a).unwrap() < 1e-9);
            assert!(ab > 1e-3);
        }
    }

    #[test]
    fn rejects_bad_moments() {
        let s = Tensor::new(&[2, 2], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(GaussianMoments::new(vec![0.0; 2], s).is_err());
        let s = Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(GaussianMoments::new(vec![0.0; 2], s).is_err());
        assert!(frechet_gaussian(&diag(&[0.0], &[1.0]), &diag(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn sample_moments() {
        let x = Tensor::new(&[2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let g = gaussian_moments(&x).unwrap();
        assert_eq!(g.mu(), &[1.0, 1.0]);
        assert_eq!(g.sigma().data(), &[2.0, 2.0, 2.0, 2.0]);
        let c = Tensor::full(&[5, 3], 1.5);
        assert_eq!(gaussian_moments(&c).unwrap().sigma().max_abs(), 0.0);
        assert!(gaussian_moments(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn seeded_draw_recovers_known_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mu, l) = ([1.0, -2.0], [[1.4, 0.0], [0.5, 0.8]]);
        let n = 20_000;
        let z = Tensor::<f64>::randn(&[n, 2], 1.0, &mut rng);
        let x = Tensor::from_fn(&[n, 2], |i| {
            mu[i[1]] + (0..2).map(|k| l[i[1]][k] * z.at(&[i[0], k])).sum::<f64>()
        });
        let g = gaussian_moments(&x).unwrap();
        let truth = [[1.96, 0.7], [0.7, 0.89]];
        for j in 0..2 {
            assert!((g.mu()[j] - mu[j]).abs() < 0.05 * mu[j].abs());
            for k in 0..2 {
                let got = g.sigma().at(&[j, k]);
                assert!((got - truth[j][k]).abs() < 0.05 * truth[j][k], "{j},{k}: {got}");
            }
        }
    }
}
