//! Density maps from a seeded two-block model on a structured image, one
//! greymap per (block, head).

use std::fs;
use std::path::{Path, PathBuf};

use hydra_core::attention::HydraConfig;
use hydra_core::rollout::{accumulate_raw, write_pgm, DensityMap};
use hydra_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::toy::ToyModel;
use crate::CliError;

pub const IMAGE_SIZE: usize = 32;
pub const BLOCKS: usize = 2;
pub const D_MODEL: usize = 8;
/// Two dense heads and two heads dilated by 3.
pub const DEFAULT_HYDRA: &str = "5x1:2,5x3:2";

/// One head's map with the mass it received before normalization.
#[derive(Clone, Debug)]
pub struct HeadMap {
    pub map: DensityMap,
    pub raw_mass: f64,
}

/// Horizontal stripes in the top half, vertical in the bottom half and a
/// bright square off-centre, plus small seeded noise.
pub fn structured_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::randn(&[1, size, size], 0.05, &mut rng);
    for r in 0..size {
        for c in 0..size {
            let stripe = if r < size / 2 { r } else { c };
            let mut v = if stripe / 2 % 2 == 0 { 0.5 } else { -0.5 };
            if (size / 5..size / 5 + size / 4).contains(&r)
                && (size / 2..size / 2 + size / 4).contains(&c)
            {
                v = 2.0;
            }
            img.data_mut()[r * size + c] += v;
        }
    }
    img
}

/// Maps in `(block, head)` order.
pub fn head_maps(seed: u64, hydra: &HydraConfig) -> Result<Vec<HeadMap>, CliError> {
    let model = ToyModel::new(IMAGE_SIZE, D_MODEL, BLOCKS, hydra.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.init(&mut rng);
    let trace = model
        .forward(&params, &structured_image(IMAGE_SIZE, seed))
        .map_err(CliError::failure)?;
    let specs = hydra.head_specs();
    let mut maps = Vec::new();
    for (b, state) in trace.states.iter().enumerate() {
        for (h, spec) in specs.iter().enumerate() {
            let raw = accumulate_raw(state.probs(h), *spec).map_err(CliError::failure)?;
            maps.push(HeadMap {
                raw_mass: raw.sum(),
                map: DensityMap::from_raw(&raw, b, h).map_err(CliError::failure)?,
            });
        }
    }
    Ok(maps)
}

pub fn file_name(map: &DensityMap) -> String {
    format!("block{}_head{}.pgm", map.layer, map.head)
}

/// Writes every map under `outdir` (created if missing) and returns the paths.
pub fn write_maps(maps: &[HeadMap], outdir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let io = |e: std::io::Error| {
        CliError::Failure(format!("cannot write under {}: {e}", outdir.display()))
    };
    fs::create_dir_all(outdir).map_err(io)?;
    maps.iter()
        .map(|m| {
            let path = outdir.join(file_name(&m.map));
            write_pgm(&m.map, &path).map_err(io)?;
            Ok(path)
        })
        .collect()
}
