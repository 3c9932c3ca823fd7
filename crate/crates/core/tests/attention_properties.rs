//! Structural properties of windowed attention: locality, translation
//! equivariance, the full-window limit and precision agreement.

use hydra_core::attention::{hydra_forward_2d, mha_dense, na_forward_2d, AttentionParams, HydraConfig};
use hydra_core::nbhd::neighbors_2d;
use hydra_core::{NeighborhoodSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64, h: usize, w: usize, d: usize, kernels: &[usize]) -> (Tensor, AttentionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = AttentionParams::random(d, kernels, 0.5, &mut rng);
    p.randomize_biases(0.5, &mut rng);
    (Tensor::randn(&[h, w, d], 1.0, &mut rng), p)
}

fn token(t: &Tensor, r: usize, c: usize) -> &[f64] {
    let d = t.shape()[2];
    let o = (r * t.shape()[1] + c) * d;
    &t.data()[o..o + d]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn output_ignores_tokens_outside_the_window(
        seed in any::<u64>(), kh in 0usize..2, dil in 1usize..3, eh in 0usize..5, ew in 0usize..5,
        fr in 0.0f64..1.0, fc in 0.0f64..1.0,
    ) {
        let k = 2 * kh + 1;
        let (h, w) = (k * dil + eh, k * dil + ew);
        let (qr, qc) = ((fr * h as f64) as usize, (fc * w as f64) as usize);
        let spec = NeighborhoodSpec::new(k, dil).unwrap();
        let (x, p) = setup(seed, h, w, 4, &[k, k]);
        let (y, _) = na_forward_2d(&x, &p, 2, spec).unwrap();
        let window = neighbors_2d((qr, qc), (h, w), spec).unwrap();
        let mut moved = x.clone();
        for r in 0..h {
            for c in 0..w {
                if !window.contains(&(r, c)) {
                    for t in 0..4 {
                        moved.set(&[r, c, t], x.at(&[r, c, t]) * -3.0 + 1.0);
                    }
                }
            }
        }
        let (y2, _) = na_forward_2d(&moved, &p, 2, spec).unwrap();
        prop_assert_eq!(token(&y, qr, qc), token(&y2, qr, qc));
    }

    #[test]
    fn interior_outputs_shift_with_the_input(seed in any::<u64>(), dr in 0usize..3, dc in 0usize..3) {
        let (h, w, k) = (9, 9, 3);
        let spec = NeighborhoodSpec::new(k, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::<f64>::random(4, &[k], 0.5, &mut rng);
        let big = Tensor::randn(&[h + 2, w + 2, 4], 1.0, &mut rng);
        let crop = |or: usize, oc: usize| Tensor::from_fn(&[h, w, 4], |i| big.at(&[i[0] + or, i[1] + oc, i[2]]));
        let (a, _) = na_forward_2d(&crop(0, 0), &p, 1, spec).unwrap();
        let (b, _) = na_forward_2d(&crop(dr, dc), &p, 1, spec).unwrap();
        for r in 1 + dr..h - 1 {
            for c in 1 + dc..w - 1 {
                if r - dr >= 1 && c - dc >= 1 {
                    prop_assert_eq!(token(&a, r, c), token(&b, r - dr, c - dc));
                }
            }
        }
    }

    #[test]
    fn full_window_is_dense_attention(seed in any::<u64>(), side in 1usize..4, heads in 1usize..3) {
        let n = 2 * side - 1;
        let d = 4;
        let spec = NeighborhoodSpec::new(n, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::<f64>::random(d, &vec![n; heads], 0.5, &mut rng);
        let x = Tensor::randn(&[n, n, d], 1.0, &mut rng);
        let (y, _) = na_forward_2d(&x, &p, heads, spec).unwrap();
        let dense_p = AttentionParams::new(p.w_q.clone(), p.w_k.clone(), p.w_v.clone(), p.w_o.clone(), vec![]).unwrap();
        let dense = mha_dense(&x.reshape(&[n * n, d]).unwrap(), &dense_p, heads).unwrap();
        prop_assert!(y.reshape(&[n * n, d]).unwrap().max_abs_diff(&dense).unwrap() < 1e-9);
    }
}

#[test]
fn single_precision_tracks_double() {
    let cfg: HydraConfig = "3x1:1,3x2:1".parse().unwrap();
    let (x, p) = setup(3, 7, 6, 4, &cfg.bias_kernels());
    let (y64, _) = hydra_forward_2d(&x, &p, &cfg).unwrap();
    let p32 = AttentionParams::new(
        p.w_q.cast(),
        p.w_k.cast(),
        p.w_v.cast(),
        p.w_o.cast(),
        p.biases.iter().map(Tensor::cast).collect(),
    )
    .unwrap();
    let (y32, _) = hydra_forward_2d(&x.cast::<f32>(), &p32, &cfg).unwrap();
    assert!(y32.cast::<f64>().max_abs_diff(&y64).unwrap() < 1e-4);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let cfg: HydraConfig = "5x1:2,3x3:2".parse().unwrap();
    let (x, p) = setup(8, 48, 40, 8, &cfg.bias_kernels());
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| hydra_forward_2d(&x, &p, &cfg).unwrap().0)
    };
    assert_eq!(run(1), run(3));
}
