//! Window geometry, counting formulas and pooling invariants over broad
//! randomized ranges.

use hydra_core::embed::{seqpool, SeqPoolWeights, TokenizerConfig};
use hydra_core::metrics::{frechet_gaussian, GaussianMoments};
use hydra_core::nbhd::{count_head_configs, count_head_configs_simplified, neighbors_1d, neighbors_2d};
use hydra_core::rollout::accumulate_raw;
use hydra_core::tensor::softmax_scaled;
use hydra_core::{NeighborhoodSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `{(k, d) : k = 3, 5, …, R−1, 1 ≤ d ≤ ⌊R/k⌋}` counted directly.
fn enumerate(r: usize) -> u64 {
    let mut n = 0;
    for k in (3..r).step_by(2) {
        for d in 1..=r {
            if k * d <= r {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn counts_match_enumeration() {
    for r in (4..=128).step_by(2) {
        assert_eq!(count_head_configs(r).unwrap(), enumerate(r), "R = {r}");
    }
    for r in (4..=1024).step_by(4) {
        assert_eq!(count_head_configs_simplified(r).unwrap(), count_head_configs(r).unwrap());
    }
}

#[test]
fn token_grid_follows_floor_formulas() {
    let cfg = TokenizerConfig::single(1, 2, (3, 1, 1), (3, 2, 1)).unwrap();
    let out = |n: usize| {
        let conv = (n + 2 - 3) + 1;
        (conv + 2 - 3) / 2 + 1
    };
    for h in 8..=40 {
        for w in 8..=40 {
            assert_eq!(cfg.grid_for(h, w).unwrap(), (out(h), out(w)));
        }
    }
}

proptest! {
    #[test]
    fn neighbors_2d_is_product_of_axes(
        kh in 0usize..3, d in 1usize..4, eh in 0usize..12, ew in 0usize..12, fr in 0.0f64..1.0, fc in 0.0f64..1.0,
    ) {
        let k = 2 * kh + 1;
        let (h, w) = (k * d + eh, k * d + ew);
        let (r, c) = ((fr * h as f64) as usize, (fc * w as f64) as usize);
        let s = NeighborhoodSpec::new(k, d).unwrap();
        let rows = neighbors_1d(r, h, s).unwrap();
        let cols = neighbors_1d(c, w, s).unwrap();
        let want: Vec<(usize, usize)> = rows.iter().flat_map(|&a| cols.iter().map(move |&b| (a, b))).collect();
        prop_assert_eq!(neighbors_2d((r, c), (h, w), s).unwrap(), want);
    }

    #[test]
    fn invalid_axes_are_rejected(kh in 0usize..4, d in 1usize..6, f in 0.0f64..1.0) {
        let k = 2 * kh + 1;
        prop_assume!(k * d > 1);
        let len = 1 + (f * (k * d - 1) as f64) as usize;
        prop_assert!(neighbors_1d(0, len, NeighborhoodSpec::new(k, d).unwrap()).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(&[rows, cols], -30.0, 30.0, &mut rng);
        let y = softmax_scaled(&x, scale).unwrap();
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seqpool_weights_are_distributions(seed in any::<u64>(), b in 1usize..4, n in 1usize..8, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[b, n, d], 2.0, &mut rng);
        let g = SeqPoolWeights { weight: Tensor::randn(&[d], 2.0, &mut rng), offset: 0.0 };
        let out = seqpool(&x, &g).unwrap();
        for row in out.weights.data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>(), m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let a = Tensor::<f64>::randn(&[m, m], 1.0, &mut rng);
            let s = Tensor::from_fn(&[m, m], |i| (0..m).map(|t| a.at(&[i[0], t]) * a.at(&[i[1], t])).sum::<f64>());
            let mu = Tensor::<f64>::randn(&[m], 1.0, &mut rng).into_data();
            GaussianMoments::new(mu, s).unwrap()
        };
        let (a, b) = (draw(), draw());
        let (ab, ba) = (frechet_gaussian(&a, &b).unwrap(), frechet_gaussian(&b, &a).unwrap());
        prop_assert!(ab >= 0.0 && (ab - ba).abs() < 1e-8);
        prop_assert!(frechet_gaussian(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn density_mass_equals_query_count(seed in any::<u64>(), d in 1usize..3, eh in 0usize..6, ew in 0usize..6) {
        let k = 3;
        let (h, w) = (k * d + eh, k * d + ew);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::<f64>::uniform(&[h, w, k * k], -2.0, 2.0, &mut rng);
        let probs = softmax_scaled(&logits, 1.0).unwrap();
        let raw = accumulate_raw(&probs, NeighborhoodSpec::new(k, d).unwrap()).unwrap();
        prop_assert!((raw.sum() - (h * w) as f64).abs() < 1e-9 * (h * w) as f64);
    }
}
