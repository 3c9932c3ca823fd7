use super::HydraConfig;
use crate::error::{Error, Result};
use crate::nbhd::NeighborhoodSpec;

/// Which attention variant to cost.
#[derive(Clone, Copy, Debug)]
pub enum AttentionKind<'a> {
    Dense { tokens: usize, heads: usize },
    Na { height: usize, width: usize, heads: usize, spec: NeighborhoodSpec },
    Hydra { height: usize, width: usize, config: &'a HydraConfig },
}

/// Closed-form cost of one forward call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostEstimate {
    /// Multiply-accumulates: four projections plus score and mixing products.
    pub macs: u64,
    /// Attention probabilities held for the backward pass.
    pub attn_state: u64,
}

/// The projections cost `4·n·d_model²` for every kind; each head adds
/// `2·n·m·d_head` for `m` attended keys per query (`m = n` dense,
/// `m = k²` local).
pub fn flop_mem_estimate(kind: &AttentionKind<'_>, d_model: usize) -> Result<CostEstimate> {
    let (tokens, per_head): (usize, Vec<usize>) = match *kind {
        AttentionKind::Dense { tokens, heads } => (tokens, vec![tokens; heads]),
        AttentionKind::Na { height, width, heads, spec } => {
            spec.validate(height)?;
            spec.validate(width)?;
            (height * width, vec![spec.kernel() * spec.kernel(); heads])
        }
        AttentionKind::Hydra { height, width, config } => {
            config.validate_for(height, width)?;
            let keys = config
                .head_specs()
                .iter()
                .map(|s| s.kernel() * s.kernel())
                .collect();
            (height * width, keys)
        }
    };
    let heads = per_head.len();
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::arg(
            "flop_mem_estimate",
            format!("d_model {d_model} is not divisible by {heads} heads"),
        ));
    }
    let n = tokens as u64;
    let d = d_model as u64;
    let dh = d / heads as u64;
    let keys: u64 = per_head.iter().map(|&m| m as u64).sum();
    Ok(CostEstimate {
        macs: 4 * n * d * d + 2 * n * dh * keys,
        attn_state: n * keys,
    })
}
