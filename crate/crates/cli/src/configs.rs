//! Head-configuration counts per resolution and per generator layout.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use hydra_core::nbhd::{count_arch_configs, count_head_configs, LevelLayout};
use serde::Deserialize;

use crate::CliError;

/// A hierarchical layout: levels of `(heads, resolution)` with the same
/// number of transformer blocks at every level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub transformers_per_level: usize,
    pub levels: Vec<LevelLayout>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    transformers_per_level: usize,
    level: Vec<LevelEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelEntry {
    resolution: usize,
    heads: usize,
}

/// Parses the TOML layout format:
///
/// ```toml
/// transformers_per_level = 2
///
/// [[level]]
/// resolution = 8
/// heads = 16
/// ```
pub fn parse_layout(text: &str) -> Result<Layout, CliError> {
    let file: LayoutFile =
        toml::from_str(text).map_err(|e| CliError::Usage(format!("malformed layout: {e}")))?;
    if file.level.is_empty() {
        return Err(CliError::Usage(
            "malformed layout: no [[level]] entries".into(),
        ));
    }
    Ok(Layout {
        transformers_per_level: file.transformers_per_level,
        levels: file
            .level
            .iter()
            .map(|l| LevelLayout::new(l.heads, l.resolution))
            .collect(),
    })
}

pub fn load_layout(path: &Path) -> Result<Layout, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    parse_layout(&text)
}

pub fn resolution_table(resolution: usize) -> Result<String, CliError> {
    let n = count_head_configs(resolution).map_err(CliError::usage)?;
    Ok(format!("resolution\tN_c\n{resolution}\t{n}\n"))
}

/// One row per level plus the layout total.
pub fn layout_table(layout: &Layout) -> Result<(String, u64), CliError> {
    let total = count_arch_configs(&layout.levels, layout.transformers_per_level)
        .map_err(CliError::usage)?;
    let mut out = String::from("resolution\theads\tN_c\n");
    for level in &layout.levels {
        let n = count_head_configs(level.resolution).map_err(CliError::usage)?;
        writeln!(out, "{}\t{}\t{n}", level.resolution, level.heads).unwrap();
    }
    writeln!(
        out,
        "transformers_per_level\t{}",
        layout.transformers_per_level
    )
    .unwrap();
    writeln!(out, "total\t{total}").unwrap();
    Ok((out, total))
}
