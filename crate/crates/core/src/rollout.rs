//! Per-head density maps for windowed attention: every query's neighborhood
//! probabilities are scattered back onto the key grid.

use std::fs;
use std::io;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nbhd::NeighborhoodSpec;
use crate::tensor::{Scalar, Tensor};

/// Max-normalized attention mass per grid cell for one `(layer, head)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, all in `[0, 1]`.
    pub values: Vec<f64>,
    pub layer: usize,
    pub head: usize,
}

impl DensityMap {
    /// Scales a raw mass grid so its maximum is 1. An all-zero grid stays zero.
    pub fn from_raw(raw: &Tensor<f64>, layer: usize, head: usize) -> Result<Self> {
        if raw.ndim() != 2 {
            return Err(Error::dim("DensityMap", format!("expected H×W mass grid, got {:?}", raw.shape())));
        }
        if raw.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::arg("DensityMap", "mass must be finite and non-negative"));
        }
        let max = raw.data().iter().fold(0.0f64, |m, &v| m.max(v));
        let values = if max > 0.0 {
            raw.data().iter().map(|v| v / max).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Ok(DensityMap {
            height: raw.shape()[0],
            width: raw.shape()[1],
            values,
            layer,
            head,
        })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// Largest absolute cell difference between two maps of equal extent.
    pub fn max_abs_diff(&self, other: &DensityMap) -> Option<f64> {
        ((self.height, self.width) == (other.height, other.width)).then(|| {
            self.values
                .iter()
                .zip(&other.values)
                .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
        })
    }
}

/// Unnormalized mass each key cell receives from all queries.
///
/// `probs` is `[H × W × k²]` as saved by the neighborhood forward pass; each
/// row must be a distribution (±1e-6), so the result sums to `H·W`.
pub fn accumulate_raw<F: Scalar>(probs: &Tensor<F>, spec: NeighborhoodSpec) -> Result<Tensor<f64>> {
    let k = spec.kernel();
    if probs.ndim() != 3 || probs.shape()[2] != k * k {
        return Err(Error::dim(
            "accumulate_density",
            format!("probabilities {:?} do not match a {k}×{k} neighborhood", probs.shape()),
        ));
    }
    let (h, w) = (probs.shape()[0], probs.shape()[1]);
    spec.validate(h)?;
    spec.validate(w)?;
    let mut raw = Tensor::zeros(&[h, w]);
    for r in 0..h {
        let rw = spec.window_unchecked(r, h);
        for c in 0..w {
            let cw = spec.window_unchecked(c, w);
            let row = &probs.data()[(r * w + c) * k * k..(r * w + c + 1) * k * k];
            let total: f64 = row.iter().map(|p| p.as_f64()).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::arg(
                    "accumulate_density",
                    format!("query ({r}, {c}) carries mass {total}, expected 1"),
                ));
            }
            let mut j = 0;
            for nr in rw.indices() {
                for nc in cw.indices() {
                    raw.data_mut()[nr * w + nc] += row[j].as_f64();
                    j += 1;
                }
            }
        }
    }
    Ok(raw)
}

pub fn accumulate_density<F: Scalar>(
    probs: &Tensor<F>,
    spec: NeighborhoodSpec,
    layer: usize,
    head: usize,
) -> Result<DensityMap> {
    DensityMap::from_raw(&accumulate_raw(probs, spec)?, layer, head)
}

/// Binary greymap: header `P5 {width} {height} 255\n`, then one byte
/// `round(255·v)` per cell, row-major.
pub fn encode_pgm(map: &DensityMap) -> Vec<u8> {
    let mut out = format!("P5 {} {} 255\n", map.width, map.height).into_bytes();
    out.extend(map.values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

pub fn write_pgm(map: &DensityMap, path: impl AsRef<Path>) -> io::Result<()> {
    fs::write(path, encode_pgm(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbhd::neighbors_2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(k: usize, d: usize) -> NeighborhoodSpec {
        NeighborhoodSpec::new(k, d).unwrap()
    }

    fn random_probs(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut p = Tensor::<f64>::uniform(&[h, w, k * k], 0.0, 1.0, rng);
        for row in p.data_mut().chunks_mut(k * k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        p
    }

    #[test]
    fn trivial_maps() {
        let one = Tensor::<f64>::ones(&[1, 1, 1]);
        assert_eq!(accumulate_density(&one, spec(1, 1), 0, 0).unwrap().values, vec![1.0]);
        let selfish = Tensor::<f64>::ones(&[4, 5, 1]);
        let m = accumulate_density(&selfish, spec(1, 1), 0, 0).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
        let zero = DensityMap::from_raw(&Tensor::zeros(&[2, 2]), 0, 0).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_scatter_and_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w, k, d) in [(6, 7, 3, 1), (9, 8, 3, 2), (5, 5, 5, 1)] {
            let s = spec(k, d);
            let p = random_probs(h, w, k, &mut rng);
            let mut want = Tensor::<f64>::zeros(&[h, w]);
            for r in 0..h {
                for c in 0..w {
                    for (j, (nr, nc)) in neighbors_2d((r, c), (h, w), s).unwrap().into_iter().enumerate() {
                        let v = want.at(&[nr, nc]) + p.at(&[r, c, j]);
                        want.set(&[nr, nc], v);
                    }
                }
            }
            let raw = accumulate_raw(&p, s).unwrap();
            assert!(raw.max_abs_diff(&want).unwrap() < 1e-12);
            assert!((raw.sum() - (h * w) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_attention_is_symmetric() {
        let (n, k) = (9, 3);
        let p = Tensor::<f64>::full(&[n, n, k * k], 1.0 / (k * k) as f64);
        let m = accumulate_density(&p, spec(k, 1), 0, 0).unwrap();
        for r in 0..n {
            for c in 0..n {
                assert!((m.at(r, c) - m.at(c, r)).abs() < 1e-12);
                assert!((m.at(r, c) - m.at(n - 1 - r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Tensor::<f64>::ones(&[3, 3, 4]);
        assert!(accumulate_raw(&p, spec(3, 1)).is_err());
        let p = Tensor::<f64>::full(&[3, 3, 9], 0.5);
        assert!(accumulate_raw(&p, spec(3, 1)).is_err());
    }

    #[test]
    fn pgm_bytes() {
        let one = DensityMap { height: 1, width: 1, values: vec![1.0], layer: 0, head: 0 };
        assert_eq!(encode_pgm(&one), b"P5 1 1 255\n\xff");
        let two = DensityMap { height: 1, width: 2, values: vec![0.0, 1.0], layer: 0, head: 0 };
        assert!(encode_pgm(&two).ends_with(&[0x00, 0xff]));
    }
}
