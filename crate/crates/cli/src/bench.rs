//! Forward-pass timing with the closed-form cost model alongside.

use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use hydra_core::attention::{
    flop_mem_estimate, hydra_forward_2d, mha_dense_forward, AttentionKind, AttentionParams,
    HydraConfig,
};
use hydra_core::{NeighborhoodSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CSV_HEADER: &str = "kind,H,W,d_model,heads,k,d,time_ns,macs,attn_state";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Dense,
    Na,
    Hydra,
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::Dense => "dense",
            BenchKind::Na => "na",
            BenchKind::Hydra => "hydra",
        }
    }
}

impl FromStr for BenchKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "dense" => Ok(BenchKind::Dense),
            "na" => Ok(BenchKind::Na),
            "hydra" => Ok(BenchKind::Hydra),
            _ => Err(CliError::Usage(format!(
                "unknown kind {s:?}; expected dense, na or hydra"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub kind: BenchKind,
    pub height: usize,
    pub width: usize,
    pub d_model: usize,
    pub heads: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// Head groups for `hydra`; `heads`, `kernel` and `dilation` are ignored then.
    pub hydra: Option<HydraConfig>,
    pub repeats: usize,
    pub seed: u64,
}

/// One CSV row. For `dense`, `k` and `d` are 0; for `hydra` they are the
/// largest kernel and dilation among the groups and `heads` is the total.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kind: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub d_model: usize,
    pub heads: usize,
    pub k: usize,
    pub d: usize,
    /// Median over the repeats.
    pub time_ns: u64,
    pub macs: u64,
    pub attn_state: u64,
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// Times `repeats` 32-bit forward passes on seeded random input. The
/// attention state the pass actually kept is compared against the estimate.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchRecord, CliError> {
    if cfg.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let (h, w, d) = (cfg.height, cfg.width, cfg.d_model);
    let hydra = match (cfg.kind, &cfg.hydra) {
        (BenchKind::Dense, _) => None,
        (BenchKind::Na, _) => {
            let spec = NeighborhoodSpec::new(cfg.kernel, cfg.dilation).map_err(CliError::usage)?;
            Some(HydraConfig::uniform(cfg.heads, spec).map_err(CliError::usage)?)
        }
        (BenchKind::Hydra, Some(c)) => Some(c.clone()),
        (BenchKind::Hydra, None) => {
            return Err(CliError::Usage("--kind hydra needs --hydra".into()))
        }
    };
    let kind = match &hydra {
        None => AttentionKind::Dense {
            tokens: h * w,
            heads: cfg.heads,
        },
        Some(config) => AttentionKind::Hydra {
            height: h,
            width: w,
            config,
        },
    };
    let estimate = flop_mem_estimate(&kind, d).map_err(CliError::usage)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = 1.0 / (d as f64).sqrt();
    let kernels = hydra.as_ref().map(|c| c.bias_kernels()).unwrap_or_default();
    let params = AttentionParams::<f32>::random(d, &kernels, std, &mut rng);
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut kept = 0;
    match &hydra {
        None => {
            let x = Tensor::<f32>::randn(&[h * w, d], 1.0, &mut rng);
            for _ in 0..cfg.repeats {
                let t = Instant::now();
                let (_, state) =
                    mha_dense_forward(&x, &params, cfg.heads).map_err(CliError::usage)?;
                times.push(t.elapsed().as_nanos() as u64);
                kept = state.probs().len();
            }
        }
        Some(config) => {
            let x = Tensor::<f32>::randn(&[h, w, d], 1.0, &mut rng);
            for _ in 0..cfg.repeats {
                let t = Instant::now();
                let (_, state) = hydra_forward_2d(&x, &params, config).map_err(CliError::usage)?;
                times.push(t.elapsed().as_nanos() as u64);
                kept = (0..state.heads()).map(|i| state.probs(i).len()).sum();
            }
        }
    }
    if kept as u64 != estimate.attn_state {
        return Err(CliError::Failure(format!(
            "forward kept {kept} attention scalars but the estimate is {}",
            estimate.attn_state
        )));
    }

    let (heads, k, dil) = match &hydra {
        None => (cfg.heads, 0, 0),
        Some(c) => {
            let specs = c.head_specs();
            (
                specs.len(),
                specs.iter().map(|s| s.kernel()).max().unwrap_or(0),
                specs.iter().map(|s| s.dilation()).max().unwrap_or(0),
            )
        }
    };
    Ok(BenchRecord {
        kind: cfg.kind.name().into(),
        height: h,
        width: w,
        d_model: d,
        heads,
        k,
        d: dil,
        time_ns: median(times),
        macs: estimate.macs,
        attn_state: estimate.attn_state,
    })
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_csv(path: &Path, records: &[BenchRecord]) -> Result<(), CliError> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::Failure(format!("cannot open {}: {e}", path.display())))?;
    let fresh = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut out = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for r in records {
        out.serialize(r).map_err(CliError::failure)?;
    }
    out.flush().map_err(CliError::failure)
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRecord>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(CliError::failure)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(CliError::failure)?
        .iter()
        .map(String::from)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(CliError::Failure(format!(
            "unexpected bench header {:?}",
            header.join(",")
        )));
    }
    reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(CliError::failure)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
