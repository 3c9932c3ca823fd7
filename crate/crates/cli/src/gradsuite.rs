//! Randomized finite-difference suites for every differentiable operator.
//!
//! Each case draws shapes, inputs and an upstream cotangent `R`, and checks
//! the analytic VJP of `Σ f(inputs) ⊙ R` against central differences over
//! all differentiated inputs at once.

use std::fmt;
use std::str::FromStr;

use hydra_core::attention::{
    hydra_forward_2d, mha_dense_forward, mha_dense_vjp, na_forward_2d, na_vjp, AttentionParams,
    HeadGroup, HydraConfig,
};
use hydra_core::embed::{
    conv_tokenize, conv_tokenize_vjp, patch_tokenize, patch_tokenize_vjp, seqpool, seqpool_vjp,
    ConvBlock, PoolSpec, SeqPoolWeights, TokenizerConfig,
};
use hydra_core::gradcheck::{finite_diff_grad, GradReport, DEFAULT_EPS, DEFAULT_TOL};
use hydra_core::tensor::{
    conv2d, conv2d_vjp, cross_entropy, cross_entropy_vjp, elementwise, elementwise_vjp, matmul,
    matmul_vjp, maxpool2d, maxpool2d_vjp, maxpool2d_with_indices, relu, relu_vjp, softmax_scaled,
    softmax_scaled_vjp, window_extent, ElementwiseOp,
};
use hydra_core::{Error, NeighborhoodSpec, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Matmul,
    SoftmaxScaled,
    Elementwise,
    Relu,
    CrossEntropy,
    Conv2d,
    Maxpool2d,
    MhaDense,
    NaForward2d,
    HydraForward2d,
    ConvTokenize,
    PatchTokenize,
    Seqpool,
}

impl Op {
    pub const ALL: [Op; 13] = [
        Op::Matmul,
        Op::SoftmaxScaled,
        Op::Elementwise,
        Op::Relu,
        Op::CrossEntropy,
        Op::Conv2d,
        Op::Maxpool2d,
        Op::MhaDense,
        Op::NaForward2d,
        Op::HydraForward2d,
        Op::ConvTokenize,
        Op::PatchTokenize,
        Op::Seqpool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::SoftmaxScaled => "softmax_scaled",
            Op::Elementwise => "elementwise",
            Op::Relu => "relu",
            Op::CrossEntropy => "cross_entropy",
            Op::Conv2d => "conv2d",
            Op::Maxpool2d => "maxpool2d",
            Op::MhaDense => "mha_dense",
            Op::NaForward2d => "na_forward_2d",
            Op::HydraForward2d => "hydra_forward_2d",
            Op::ConvTokenize => "conv_tokenize",
            Op::PatchTokenize => "patch_tokenize",
            Op::Seqpool => "seqpool",
        }
    }

    fn draw(self, rng: &mut ChaCha8Rng) -> Result<Case> {
        match self {
            Op::Matmul => case_matmul(rng),
            Op::SoftmaxScaled => case_softmax(rng),
            Op::Elementwise => case_elementwise(rng),
            Op::Relu => case_relu(rng),
            Op::CrossEntropy => case_cross_entropy(rng),
            Op::Conv2d => case_conv2d(rng),
            Op::Maxpool2d => case_maxpool(rng),
            Op::MhaDense => case_dense(rng),
            Op::NaForward2d => case_na(rng),
            Op::HydraForward2d => case_hydra(rng),
            Op::ConvTokenize => case_tokenize(rng),
            Op::PatchTokenize => case_patch(rng),
            Op::Seqpool => case_seqpool(rng),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Op::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| format!("unknown operator {s:?}"))
    }
}

/// Worst case of one operator's suite; `worst` is `None` when no case ran.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: Op,
    pub cases: usize,
    pub worst: Option<GradReport>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().is_none_or(|r| r.passed)
    }
}

type Loss = Box<dyn Fn(&[Tensor]) -> Result<f64> + Sync + Send>;

struct Case {
    inputs: Vec<Tensor>,
    analytic: Vec<Tensor>,
    loss: Loss,
}

impl Case {
    fn new(
        inputs: Vec<Tensor>,
        analytic: Vec<Tensor>,
        loss: impl Fn(&[Tensor]) -> Result<f64> + Sync + Send + 'static,
    ) -> Self {
        Case {
            inputs,
            analytic,
            loss: Box::new(loss),
        }
    }

    /// `sabotage` corrupts the first analytic coordinate, a negative control
    /// for the suite itself.
    fn check(&self, sabotage: bool) -> Result<GradReport> {
        let shapes: Vec<Vec<usize>> = self.inputs.iter().map(|t| t.shape().to_vec()).collect();
        let theta = flatten(&self.inputs);
        let mut analytic = flatten(&self.analytic);
        if analytic.len() != theta.len() {
            return Err(Error::State(
                "analytic gradient does not cover every input".into(),
            ));
        }
        if sabotage {
            let bump = 0.5 * analytic.max_abs() + 1e-3;
            analytic.data_mut()[0] += bump;
        }
        let f = |t: &Tensor| (self.loss)(&unflatten(t, &shapes)?);
        let numeric = finite_diff_grad(f, &theta, DEFAULT_EPS)?;
        GradReport::compare(&analytic, &numeric, DEFAULT_TOL)
    }
}

fn flatten(ts: &[Tensor]) -> Tensor {
    let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len();
    Tensor::new(&[n], data).expect("flat length matches")
}

fn unflatten(flat: &Tensor, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat.data()[at..at + n].to_vec());
            at += n;
            t
        })
        .collect()
}

fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::State(format!(
            "cotangent {:?} vs output {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

/// Runs `cases` seeded instances of `op`. Each operator draws from its own
/// stream, so suites are independent of one another and of `cases`.
pub fn run_op(op: Op, seed: u64, cases: usize, sabotage: bool) -> Result<OpReport> {
    let mut worst: Option<GradReport> = None;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((op as u64) << 32 | case as u64);
        let report = op.draw(&mut rng)?.check(sabotage && case == 0)?;
        worst = Some(match worst {
            None => report,
            Some(w) => w.worse(report),
        });
    }
    Ok(OpReport { op, cases, worst })
}

pub fn run_all(seed: u64, cases: usize, sabotage: Option<Op>) -> Result<Vec<OpReport>> {
    Op::ALL
        .into_iter()
        .map(|op| run_op(op, seed, cases, sabotage == Some(op)))
        .collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (m, p, q) = (
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    let (sa, sb): (Vec<usize>, Vec<usize>) = match rng.random_range(0..3) {
        0 => (vec![m, p], vec![p, q]),
        1 => (vec![2, m, p], vec![p, q]),
        _ => (vec![2, m, p], vec![2, p, q]),
    };
    let (a, b) = (randn(&sa, rng), randn(&sb, rng));
    let r = randn(matmul(&a, &b)?.shape(), rng);
    let (da, db) = matmul_vjp(&a, &b, &r)?;
    Ok(Case::new(vec![a, b], vec![da, db], move |t| {
        dot(&matmul(&t[0], &t[1])?, &r)
    }))
}

/// Logits `x / scale` stay in `[−3, 3]`.
fn case_softmax(rng: &mut ChaCha8Rng) -> Result<Case> {
    let scale = rng.random_range(0.5..2.0);
    let shape = if rng.random_bool(0.5) {
        vec![rng.random_range(1..=4), rng.random_range(1..=6)]
    } else {
        vec![2, rng.random_range(1..=3), rng.random_range(1..=5)]
    };
    let x = Tensor::uniform(&shape, -3.0 * scale, 3.0 * scale, rng);
    let r = randn(&shape, rng);
    let y = softmax_scaled(&x, scale)?;
    let dx = softmax_scaled_vjp(&y, &r, scale)?;
    Ok(Case::new(vec![x], vec![dx], move |t| {
        dot(&softmax_scaled(&t[0], scale)?, &r)
    }))
}

fn case_elementwise(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = [rng.random_range(1..=4), rng.random_range(1..=4)];
    let (x, y, r) = (randn(&shape, rng), randn(&shape, rng), randn(&shape, rng));
    let (dx, dy) = elementwise_vjp(&x, ElementwiseOp::Mul(&y), &r)?;
    let dy = dy.ok_or_else(|| Error::State("missing operand gradient".into()))?;
    Ok(Case::new(vec![x, y], vec![dx, dy], move |t| {
        dot(&elementwise(&t[0], ElementwiseOp::Mul(&t[1]))?, &r)
    }))
}

/// Inputs are kept at least 0.01 away from the kink.
fn case_relu(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = [rng.random_range(1..=5), rng.random_range(1..=5)];
    let x = Tensor::<f64>::uniform(&shape, -1.0, 1.0, rng).map(|v| v + 0.01 * v.signum());
    let r = randn(&shape, rng);
    let dx = relu_vjp(&x, &r)?;
    Ok(Case::new(vec![x], vec![dx], move |t| {
        dot(&relu(&t[0])?, &r)
    }))
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, c) = (rng.random_range(1..=5), rng.random_range(2..=5));
    let logits = Tensor::uniform(&[b, c], -3.0, 3.0, rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let d = cross_entropy_vjp(&logits, &labels)?;
    Ok(Case::new(vec![logits], vec![d], move |t| {
        cross_entropy(&t[0], &labels)
    }))
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (c, f) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = rng.random_range(1..=3);
    let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
    let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
    let x = randn(&[c, h, w], rng);
    let kernels = randn(&[f, c, k, k], rng);
    let r = randn(conv2d(&x, &kernels, stride, pad)?.shape(), rng);
    let (dx, dk) = conv2d_vjp(&x, &kernels, stride, pad, &r)?;
    Ok(Case::new(vec![x, kernels], vec![dx, dk], move |t| {
        dot(&conv2d(&t[0], &t[1], stride, pad)?, &r)
    }))
}

/// Distinct input values 0.1 apart, so every window has a clear winner.
fn case_maxpool(rng: &mut ChaCha8Rng) -> Result<Case> {
    let k = rng.random_range(2..=3);
    let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=k / 2));
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(k..=6),
        rng.random_range(k..=6),
    ];
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let x = Tensor::new(
        &shape,
        ranks
            .iter()
            .map(|&i| 0.1 * i as f64 - 0.05 * n as f64)
            .collect(),
    )?;
    let pooled = maxpool2d_with_indices(&x, k, stride, pad)?;
    let r = randn(pooled.output.shape(), rng);
    let dx = maxpool2d_vjp(x.shape(), &pooled, &r)?;
    Ok(Case::new(vec![x], vec![dx], move |t| {
        dot(&maxpool2d(&t[0], k, stride, pad)?, &r)
    }))
}

fn attention_inputs(p: &AttentionParams) -> Vec<Tensor> {
    p.tensors().cloned().collect()
}

fn rebuild(t: &[Tensor]) -> Result<AttentionParams> {
    AttentionParams::new(
        t[1].clone(),
        t[2].clone(),
        t[3].clone(),
        t[4].clone(),
        t[5..].to_vec(),
    )
}

fn model_width(rng: &mut ChaCha8Rng, heads: usize) -> usize {
    heads * rng.random_range(1..=2)
}

fn case_dense(rng: &mut ChaCha8Rng) -> Result<Case> {
    let heads = rng.random_range(1..=2);
    let (n, d) = (rng.random_range(1..=6), model_width(rng, heads));
    let p = AttentionParams::random(d, &[], 0.6, rng);
    let x = randn(&[n, d], rng);
    let r = randn(&[n, d], rng);
    let (_, state) = mha_dense_forward(&x, &p, heads)?;
    let g = mha_dense_vjp(&state, &x, &p, &r)?;
    let mut inputs = vec![x];
    inputs.extend(attention_inputs(&p));
    let mut analytic = vec![g.dx];
    analytic.extend(attention_inputs(&g.params));
    Ok(Case::new(inputs, analytic, move |t| {
        dot(&mha_dense_forward(&t[0], &rebuild(t)?, heads)?.0, &r)
    }))
}

fn local_case(
    rng: &mut ChaCha8Rng,
    config: HydraConfig,
    h: usize,
    w: usize,
    single: bool,
) -> Result<Case> {
    let d = model_width(rng, config.total_heads());
    let mut p = AttentionParams::random(d, &config.bias_kernels(), 0.6, rng);
    p.randomize_biases(0.5, rng);
    let x = randn(&[h, w, d], rng);
    let r = randn(&[h, w, d], rng);
    let forward = move |x: &Tensor, p: &AttentionParams| {
        if single {
            let g = config.groups()[0];
            na_forward_2d(x, p, g.heads, g.spec)
        } else {
            hydra_forward_2d(x, p, &config)
        }
    };
    let (_, state) = forward(&x, &p)?;
    let g = na_vjp(&state, &x, &p, &r)?;
    let mut inputs = vec![x];
    inputs.extend(attention_inputs(&p));
    let mut analytic = vec![g.dx];
    analytic.extend(attention_inputs(&g.params));
    Ok(Case::new(inputs, analytic, move |t| {
        dot(&forward(&t[0], &rebuild(t)?)?.0, &r)
    }))
}

fn case_na(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
    let k = if rng.random_bool(0.8) { 3 } else { 1 };
    let dilation = rng.random_range(1..=h.min(w) / k);
    let heads = rng.random_range(1..=2);
    let config = HydraConfig::uniform(heads, NeighborhoodSpec::new(k, dilation)?)?;
    local_case(rng, config, h, w, true)
}

/// Two or three groups with distinct receptive fields on grids of 6 or 7.
fn case_hydra(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w) = (rng.random_range(6..=7), rng.random_range(6..=7));
    let fields = [(3, 1), (3, 2), (5, 1), (1, 1), (3, 2)];
    let count = rng.random_range(2..=3);
    let start = rng.random_range(0..fields.len() - count + 1);
    let groups = fields[start..start + count]
        .iter()
        .map(|&(k, d)| {
            Ok(HeadGroup {
                heads: 1,
                spec: NeighborhoodSpec::new(k, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    local_case(rng, HydraConfig::new(groups)?, h, w, false)
}

/// Smallest gap between a positive window maximum and the runner-up.
fn pool_margin(x: &Tensor, k: usize, stride: usize, pad: usize) -> f64 {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (
        window_extent(h, k, stride, pad).unwrap_or(0),
        window_extent(w, k, stride, pad).unwrap_or(0),
    );
    let mut margin = f64::INFINITY;
    for ch in 0..c {
        for (orow, ocol) in (0..oh).flat_map(|r| (0..ow).map(move |q| (r, q))) {
            let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for dr in 0..k {
                for dc in 0..k {
                    let (r, q) = (
                        (orow * stride + dr).wrapping_sub(pad),
                        (ocol * stride + dc).wrapping_sub(pad),
                    );
                    if r < h && q < w {
                        let v = x.at(&[ch, r, q]);
                        if v > top {
                            second = top;
                            top = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
            }
            if top > 0.0 {
                margin = margin.min(top - second);
            }
        }
    }
    margin
}

/// Redraws until every pre-activation clears the relu kink and every pool
/// window has a clear winner by 1e-3, far above the probe size.
fn case_tokenize(rng: &mut ChaCha8Rng) -> Result<Case> {
    const CLEARANCE: f64 = 1e-3;
    for _ in 0..200 {
        let channels = rng.random_range(1..=2);
        let depth = rng.random_range(1..=2);
        let blocks: Vec<ConvBlock> = (0..depth)
            .map(|_| ConvBlock {
                filters: rng.random_range(2..=3),
                kernel: 3,
                stride: 1,
                pad: 1,
            })
            .collect();
        let pool = [
            PoolSpec {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            PoolSpec {
                kernel: 2,
                stride: 2,
                pad: 0,
            },
            PoolSpec {
                kernel: 2,
                stride: 1,
                pad: 1,
            },
        ][rng.random_range(0..3)];
        let d = blocks[depth - 1].filters;
        let cfg = TokenizerConfig::new(channels, blocks, pool, d)?;
        let (h, w) = (rng.random_range(5..=8), rng.random_range(5..=8));
        let image = randn(&[channels, h, w], rng);
        let kernels: Vec<Tensor> = cfg.init_kernels(rng);

        let mut x = image.clone();
        let mut clear = true;
        for (b, k) in cfg.blocks().iter().zip(&kernels) {
            let pre = conv2d(&x, k, b.stride, b.pad)?;
            let act = relu(&pre)?;
            clear &= pre.data().iter().all(|v| v.abs() > CLEARANCE);
            clear &= pool_margin(&act, pool.kernel, pool.stride, pool.pad) > CLEARANCE;
            x = maxpool2d(&act, pool.kernel, pool.stride, pool.pad)?;
        }
        if !clear {
            continue;
        }
        let (tokens, cache) = conv_tokenize(&image, &cfg, &kernels)?;
        let r = randn(tokens.shape(), rng);
        let (dimage, dkernels) = conv_tokenize_vjp(&cache, &kernels, &cfg, &r)?;
        let mut inputs = vec![image];
        inputs.extend(kernels);
        let mut analytic = vec![dimage];
        analytic.extend(dkernels);
        return Ok(Case::new(inputs, analytic, move |t| {
            dot(&conv_tokenize(&t[0], &cfg, &t[1..])?.0, &r)
        }));
    }
    Err(Error::State(
        "could not draw a tokenizer case away from kinks".into(),
    ))
}

fn case_patch(rng: &mut ChaCha8Rng) -> Result<Case> {
    let patch = rng.random_range(1..=3);
    let c = rng.random_range(1..=2);
    let (h, w) = (
        patch * rng.random_range(1..=3),
        patch * rng.random_range(1..=3),
    );
    let d = rng.random_range(1..=4);
    let image = randn(&[c, h, w], rng);
    let proj = randn(&[c * patch * patch, d], rng);
    let r = randn(&[(h / patch) * (w / patch), d], rng);
    let (di, dp) = patch_tokenize_vjp(&image, patch, &proj, &r)?;
    Ok(Case::new(vec![image, proj], vec![di, dp], move |t| {
        dot(&patch_tokenize(&t[0], patch, &t[1])?, &r)
    }))
}

fn case_seqpool(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, n, d) = (
        rng.random_range(1..=3),
        rng.random_range(1..=5),
        rng.random_range(1..=4),
    );
    let x = randn(&[b, n, d], rng);
    let g = SeqPoolWeights {
        weight: randn(&[d], rng),
        offset: rng.random_range(-1.0..1.0),
    };
    let r = randn(&[b, d], rng);
    let out = seqpool(&x, &g)?;
    let (dx, dg) = seqpool_vjp(&x, &g, &out, &r)?;
    let offset = Tensor::new(&[1], vec![g.offset])?;
    let doffset = Tensor::new(&[1], vec![dg.offset])?;
    Ok(Case::new(
        vec![x, g.weight, offset],
        vec![dx, dg.weight, doffset],
        move |t| {
            let g = SeqPoolWeights {
                weight: t[1].clone(),
                offset: t[2].data()[0],
            };
            dot(&seqpool(&t[0], &g)?.pooled, &r)
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for op in Op::ALL {
            assert_eq!(op.name().parse::<Op>().unwrap(), op);
        }
        assert!("conv3d".parse::<Op>().is_err());
    }

    #[test]
    fn zero_cases_pass_trivially() {
        let r = run_op(Op::Conv2d, 0, 0, true).unwrap();
        assert!(r.passed() && r.worst.is_none());
    }

    #[test]
    fn sabotage_is_caught() {
        for op in [Op::Matmul, Op::Seqpool] {
            assert!(run_op(op, 0, 2, false).unwrap().passed());
            assert!(!run_op(op, 0, 2, true).unwrap().passed());
        }
    }

    #[test]
    fn flatten_round_trip() {
        let ts = vec![
            Tensor::ones(&[2, 3]),
            Tensor::zeros(&[1]),
            Tensor::full(&[2], 3.0),
        ];
        let shapes: Vec<Vec<usize>> = ts.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(unflatten(&flatten(&ts), &shapes).unwrap(), ts);
    }
}
