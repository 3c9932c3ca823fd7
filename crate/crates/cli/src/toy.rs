//! Desk-scale classifier: convolutional tokenizer, residual Hydra blocks,
//! SeqPool and a linear head, trained with full-batch gradient descent on a
//! built-in stripes dataset.

use std::fs::File;
use std::path::Path;

use hydra_core::attention::{hydra_forward_2d, na_vjp, AttentionParams, HydraConfig, NaState};
use hydra_core::embed::{
    conv_tokenize, conv_tokenize_vjp, positional_embedding, seqpool, seqpool_vjp, PosEmbedKind,
    SeqPoolOutput, SeqPoolWeights, TokenizerCache, TokenizerConfig,
};
use hydra_core::tensor::{cross_entropy, cross_entropy_vjp, matmul, matmul_vjp};
use hydra_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const IMAGE_SIZE: usize = 16;
pub const TRAIN_SIZE: usize = 256;
pub const TEST_SIZE: usize = 64;
pub const NOISE_STD: f64 = 0.1;
pub const CLASSES: usize = 2;
pub const D_MODEL: usize = 8;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_HYDRA: &str = "7x1:2,3x1:2";

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

#[derive(Clone, Debug)]
pub struct Sample {
    /// `1 × S × S`
    pub image: Tensor,
    pub label: usize,
}

/// Label 0 is horizontal stripes, label 1 vertical. Stripes are two pixels
/// wide at a random phase, levels ±1, plus Gaussian noise of [`NOISE_STD`].
/// Labels alternate, so every even-sized set is balanced.
pub fn stripes(count: usize, size: usize, seed: u64, stream: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count)
        .map(|i| {
            let label = i % CLASSES;
            let phase = rng.random_range(0..4);
            let mut image = Tensor::randn(&[1, size, size], NOISE_STD, &mut rng);
            for r in 0..size {
                for c in 0..size {
                    let t = if label == 0 { r } else { c };
                    let level = if (t + phase) / 2 % 2 == 0 { 1.0 } else { -1.0 };
                    image.data_mut()[r * size + c] += level;
                }
            }
            Sample { image, label }
        })
        .collect()
}

/// Trainable state of [`ToyModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams {
    pub kernels: Vec<Tensor>,
    pub blocks: Vec<AttentionParams>,
    pub pool: SeqPoolWeights,
    /// `d_model × classes`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ToyParams {
    pub fn zeros_like(&self) -> Self {
        ToyParams {
            kernels: self
                .kernels
                .iter()
                .map(|k| Tensor::zeros(k.shape()))
                .collect(),
            blocks: self
                .blocks
                .iter()
                .map(AttentionParams::zeros_like)
                .collect(),
            pool: SeqPoolWeights::zeros(self.pool.weight.len()),
            head_w: Tensor::zeros(self.head_w.shape()),
            head_b: Tensor::zeros(self.head_b.shape()),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            a.axpy(alpha, b)?;
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.axpy(alpha, b)?;
        }
        self.pool.weight.axpy(alpha, &other.pool.weight)?;
        self.pool.offset += alpha * other.pool.offset;
        self.head_w.axpy(alpha, &other.head_w)?;
        self.head_b.axpy(alpha, &other.head_b)
    }
}

/// Intermediates of one image's forward pass.
pub struct Trace {
    cache: TokenizerCache,
    inputs: Vec<Tensor>,
    pub states: Vec<NaState>,
    seq: Tensor,
    pooled: SeqPoolOutput,
    /// `1 × classes`
    pub logits: Tensor,
}

/// Fixed architecture around a configurable head partition.
#[derive(Clone, Debug)]
pub struct ToyModel {
    hydra: HydraConfig,
    blocks: usize,
    d_model: usize,
    tokenizer: TokenizerConfig,
    grid: (usize, usize),
    pos: Tensor,
}

impl ToyModel {
    /// One `conv3 → relu → maxpool(3, 2, 1)` tokenizer block, so tokens sit
    /// on a grid of half the image side, followed by `blocks` residual
    /// attention layers and sinusoidal positions.
    pub fn new(
        image_size: usize,
        d_model: usize,
        blocks: usize,
        hydra: HydraConfig,
    ) -> std::result::Result<Self, CliError> {
        let tokenizer =
            TokenizerConfig::single(1, d_model, (3, 1, 1), (3, 2, 1)).map_err(CliError::usage)?;
        let grid = tokenizer
            .grid_for(image_size, image_size)
            .map_err(CliError::usage)?;
        hydra
            .validate_for(grid.0, grid.1)
            .map_err(CliError::usage)?;
        if !d_model.is_multiple_of(hydra.total_heads()) {
            return Err(CliError::Usage(format!(
                "{} heads do not divide the model width {d_model}",
                hydra.total_heads()
            )));
        }
        let pos = positional_embedding(
            PosEmbedKind::Sinusoidal,
            grid.0 * grid.1,
            d_model,
            Some(grid),
            0,
        )
        .map_err(CliError::usage)?;
        Ok(ToyModel {
            hydra,
            blocks,
            d_model,
            tokenizer,
            grid,
            pos,
        })
    }

    pub fn hydra(&self) -> &HydraConfig {
        &self.hydra
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// He-normal kernels, attention projections with σ = 1/√d, zero bias
    /// tables, zero pooling scorer and zero classifier.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ToyParams {
        let d = self.d_model;
        let kernels = self.tokenizer.init_kernels(rng);
        let blocks = (0..self.blocks)
            .map(|_| {
                AttentionParams::random(d, &self.hydra.bias_kernels(), 1.0 / (d as f64).sqrt(), rng)
            })
            .collect();
        ToyParams {
            kernels,
            blocks,
            pool: SeqPoolWeights::zeros(d),
            head_w: Tensor::zeros(&[d, CLASSES]),
            head_b: Tensor::zeros(&[CLASSES]),
        }
    }

    pub fn forward(&self, p: &ToyParams, image: &Tensor) -> Result<Trace> {
        let ((gh, gw), d) = (self.grid, self.d_model);
        let (mut tokens, cache) = conv_tokenize(image, &self.tokenizer, &p.kernels)?;
        tokens.axpy(1.0, &self.pos)?;
        let mut x = tokens.into_reshape(&[gh, gw, d])?;
        let mut inputs = Vec::with_capacity(self.blocks);
        let mut states = Vec::with_capacity(self.blocks);
        for params in &p.blocks {
            let (y, state) = hydra_forward_2d(&x, params, &self.hydra)?;
            inputs.push(x.clone());
            states.push(state);
            x.axpy(1.0, &y)?;
        }
        let seq = x.into_reshape(&[1, gh * gw, d])?;
        let pooled = seqpool(&seq, &p.pool)?;
        let mut logits = matmul(&pooled.pooled, &p.head_w)?;
        for (l, b) in logits.data_mut().iter_mut().zip(p.head_b.data()) {
            *l += b;
        }
        Ok(Trace {
            cache,
            inputs,
            states,
            seq,
            pooled,
            logits,
        })
    }

    pub fn backward(&self, p: &ToyParams, trace: &Trace, dlogits: &Tensor) -> Result<ToyParams> {
        let ((gh, gw), d) = (self.grid, self.d_model);
        let (dpooled, head_w) = matmul_vjp(&trace.pooled.pooled, &p.head_w, dlogits)?;
        let head_b = dlogits.reshape(&[CLASSES])?;
        let (dseq, pool) = seqpool_vjp(&trace.seq, &p.pool, &trace.pooled, &dpooled)?;
        let mut dx = dseq.into_reshape(&[gh, gw, d])?;
        let mut blocks = Vec::with_capacity(self.blocks);
        for b in (0..self.blocks).rev() {
            let g = na_vjp(&trace.states[b], &trace.inputs[b], &p.blocks[b], &dx)?;
            dx.axpy(1.0, &g.dx)?;
            blocks.push(g.params);
        }
        blocks.reverse();
        let dtokens = dx.into_reshape(&[gh * gw, d])?;
        let (_, kernels) = conv_tokenize_vjp(&trace.cache, &p.kernels, &self.tokenizer, &dtokens)?;
        Ok(ToyParams {
            kernels,
            blocks,
            pool,
            head_w,
            head_b,
        })
    }
}

/// First index of the largest logit.
pub fn predict(logits: &Tensor) -> usize {
    let row = logits.data();
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training cross-entropy before the update of this step.
    pub loss: f64,
    pub accuracy: f64,
    pub test_accuracy: f64,
}

pub const METRICS_HEADER: &str = "step,loss,accuracy,test_accuracy";

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub hydra: HydraConfig,
    pub lr: f64,
}

impl TrainConfig {
    pub fn new(seed: u64, steps: usize) -> Self {
        TrainConfig {
            seed,
            steps,
            hydra: DEFAULT_HYDRA
                .parse()
                .expect("default head partition parses"),
            lr: DEFAULT_LR,
        }
    }
}

/// Returns rows for steps `0..=steps`; row `t` is measured after `t`
/// updates. Per-image work runs in parallel and is reduced in index order,
/// so results do not depend on the thread count.
pub fn train(cfg: &TrainConfig) -> std::result::Result<Vec<MetricsRow>, CliError> {
    let model = ToyModel::new(IMAGE_SIZE, D_MODEL, 1, cfg.hydra.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_INIT);
    let mut params = model.init(&mut rng);
    let train_set = stripes(TRAIN_SIZE, IMAGE_SIZE, cfg.seed, STREAM_TRAIN);
    let test_set = stripes(TEST_SIZE, IMAGE_SIZE, cfg.seed, STREAM_TEST);
    let scale = 1.0 / train_set.len() as f64;

    let mut rows = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let per_image = train_set
            .par_iter()
            .map(|s| {
                let trace = model.forward(&params, &s.image)?;
                let loss = cross_entropy(&trace.logits, &[s.label])?;
                let dlogits = cross_entropy_vjp(&trace.logits, &[s.label])?.map(|v| v * scale);
                let grads = model.backward(&params, &trace, &dlogits)?;
                Ok((loss, predict(&trace.logits) == s.label, grads))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(CliError::failure)?;
        let test_hits = test_set
            .par_iter()
            .map(|s| Ok(predict(&model.forward(&params, &s.image)?.logits) == s.label))
            .collect::<Result<Vec<bool>>>()
            .map_err(CliError::failure)?;

        let mut grads = params.zeros_like();
        let (mut loss, mut hits) = (0.0, 0);
        for (l, hit, g) in &per_image {
            loss += l * scale;
            hits += usize::from(*hit);
            grads.axpy(1.0, g).map_err(CliError::failure)?;
        }
        rows.push(MetricsRow {
            step,
            loss,
            accuracy: hits as f64 * scale,
            test_accuracy: test_hits.iter().filter(|&&h| h).count() as f64 / test_set.len() as f64,
        });
        if step < cfg.steps {
            params.axpy(-cfg.lr, &grads).map_err(CliError::failure)?;
        }
    }
    Ok(rows)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> std::result::Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::Failure(format!("cannot create {}: {e}", path.display())))?;
    let mut out = csv::Writer::from_writer(file);
    for r in rows {
        out.serialize(r).map_err(CliError::failure)?;
    }
    out.flush().map_err(CliError::failure)
}

pub fn read_metrics(path: &Path) -> std::result::Result<Vec<MetricsRow>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(CliError::failure)?;
    let header: Vec<&str> = reader
        .headers()
        .map_err(CliError::failure)?
        .iter()
        .collect();
    if header.join(",") != METRICS_HEADER {
        return Err(CliError::Failure(format!(
            "unexpected metrics header {:?}",
            header.join(",")
        )));
    }
    reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(CliError::failure)
}
