//! Neighborhood geometry: clamped, dilated sliding windows and the
//! (kernel, dilation) configuration-space counts.
//!
//! A window never shrinks at a border. It shifts inward so every query sees
//! exactly `k` tokens per axis. With dilation `d` the window stays inside the
//! query's dilation class `i mod d`, so a dilated axis behaves as `d`
//! interleaved dense axes.

use crate::error::{Error, Result};

/// Kernel extent `k` (odd, tokens per axis) and dilation `d` of one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NeighborhoodSpec {
    kernel: usize,
    dilation: usize,
}

impl NeighborhoodSpec {
    pub fn new(kernel: usize, dilation: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::arg(
                "NeighborhoodSpec",
                format!("kernel must be odd and positive, got {kernel}"),
            ));
        }
        if dilation == 0 {
            return Err(Error::arg("NeighborhoodSpec", "dilation must be positive"));
        }
        Ok(NeighborhoodSpec { kernel, dilation })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Dilated extent `k·d`.
    pub fn span(&self) -> usize {
        self.kernel * self.dilation
    }

    /// Number of entries per axis of a relative-position bias table.
    pub fn bias_extent(&self) -> usize {
        2 * self.kernel - 1
    }

    /// Valid iff every dilation class of the axis holds at least `k` tokens.
    pub fn validate(&self, len: usize) -> Result<()> {
        if len < self.span() {
            return Err(Error::Geometry {
                len,
                kernel: self.kernel,
                dilation: self.dilation,
                detail: format!("axis must hold at least k·d = {} tokens", self.span()),
            });
        }
        Ok(())
    }

    /// Window of query `i` on an axis of length `len`.
    pub fn window(&self, i: usize, len: usize) -> Result<Window> {
        self.validate(len)?;
        if i >= len {
            return Err(Error::Geometry {
                len,
                kernel: self.kernel,
                dilation: self.dilation,
                detail: format!("query index {i} is outside the axis"),
            });
        }
        Ok(self.window_unchecked(i, len))
    }

    /// [`window`](Self::window) without validation; callers validate once per axis.
    #[inline]
    pub(crate) fn window_unchecked(&self, i: usize, len: usize) -> Window {
        let d = self.dilation;
        let class = i % d;
        let rank = i / d;
        let class_len = (len - class).div_ceil(d);
        let start = rank.saturating_sub(self.kernel / 2).min(class_len - self.kernel);
        Window {
            first: class + d * start,
            step: d,
            kernel: self.kernel,
            query_slot: rank - start,
        }
    }
}

/// `k` equally spaced indices on one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub first: usize,
    pub step: usize,
    pub kernel: usize,
    /// Position of the query inside the window.
    pub query_slot: usize,
}

impl Window {
    #[inline]
    pub fn index(&self, j: usize) -> usize {
        self.first + self.step * j
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.kernel).map(|j| self.index(j))
    }

    /// Bias-table coordinate of neighbor `j`: relative rank shifted into
    /// `0..2k-1`.
    #[inline]
    pub fn bias_slot(&self, j: usize) -> usize {
        j + self.kernel - 1 - self.query_slot
    }
}

pub fn neighbors_1d(i: usize, len: usize, spec: NeighborhoodSpec) -> Result<Vec<usize>> {
    Ok(spec.window(i, len)?.indices().collect())
}

/// Row-major cartesian product of the per-axis windows.
pub fn neighbors_2d(
    pos: (usize, usize),
    dims: (usize, usize),
    spec: NeighborhoodSpec,
) -> Result<Vec<(usize, usize)>> {
    let rows = spec.window(pos.0, dims.0)?;
    let cols = spec.window(pos.1, dims.1)?;
    Ok(rows
        .indices()
        .flat_map(|r| cols.indices().map(move |c| (r, c)))
        .collect())
}

fn check_kernel(resolution: usize, kernel: usize) -> Result<()> {
    if kernel.is_multiple_of(2) || kernel < 3 || kernel + 1 > resolution {
        return Err(Error::arg(
            "valid_dilations",
            format!("kernel {kernel} must be odd with 3 ≤ k ≤ {}", resolution.saturating_sub(1)),
        ));
    }
    Ok(())
}

/// Largest usable dilation `floor(R / k)` for kernel `k` at resolution `R`.
pub fn valid_dilations(resolution: usize, kernel: usize) -> Result<usize> {
    check_kernel(resolution, kernel)?;
    Ok(resolution / kernel)
}

fn check_resolution(resolution: usize) -> Result<()> {
    if !resolution.is_multiple_of(2) || resolution < 4 {
        return Err(Error::arg(
            "count_head_configs",
            format!("resolution must be even and at least 4, got {resolution}"),
        ));
    }
    Ok(())
}

/// Number of (kernel, dilation) head configurations at resolution `R`,
/// summed over kernels `3, 5, …, R−1`.
pub fn count_head_configs(resolution: usize) -> Result<u64> {
    check_resolution(resolution)?;
    Ok((1..resolution / 2)
        .map(|i| (resolution / (2 * i + 1)) as u64)
        .sum())
}

/// Closed form for `R` divisible by 4: every kernel above `R/2` admits only
/// dilation 1, contributing `R/4` configurations at once.
pub fn count_head_configs_simplified(resolution: usize) -> Result<u64> {
    check_resolution(resolution)?;
    if !resolution.is_multiple_of(4) {
        return Err(Error::arg(
            "count_head_configs_simplified",
            format!("resolution {resolution} is not divisible by 4"),
        ));
    }
    let tail: u64 = (1..resolution / 4)
        .map(|i| (resolution / (2 * i + 1)) as u64)
        .sum();
    Ok(resolution as u64 / 4 + tail)
}

/// One resolution level of a hierarchical generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    pub heads: usize,
    pub resolution: usize,
}

impl LevelLayout {
    pub const fn new(heads: usize, resolution: usize) -> Self {
        LevelLayout { heads, resolution }
    }
}

/// StyleSwin generator levels at 256×256 output.
pub const STYLESWIN_256: [LevelLayout; 6] = [
    LevelLayout::new(16, 8),
    LevelLayout::new(16, 16),
    LevelLayout::new(16, 32),
    LevelLayout::new(16, 64),
    LevelLayout::new(8, 128),
    LevelLayout::new(4, 256),
];

/// [`STYLESWIN_256`] extended with 4-head levels at 512 and 1024.
pub const STYLESWIN_1024: [LevelLayout; 8] = [
    LevelLayout::new(16, 8),
    LevelLayout::new(16, 16),
    LevelLayout::new(16, 32),
    LevelLayout::new(16, 64),
    LevelLayout::new(8, 128),
    LevelLayout::new(4, 256),
    LevelLayout::new(4, 512),
    LevelLayout::new(4, 1024),
];

/// `transformers_per_level · Σ heads(level) · N_c(resolution(level))`.
pub fn count_arch_configs(layout: &[LevelLayout], transformers_per_level: usize) -> Result<u64> {
    if layout.is_empty() {
        return Err(Error::arg("count_arch_configs", "layout has no levels"));
    }
    let mut per_level = 0u64;
    for level in layout {
        per_level += level.heads as u64 * count_head_configs(level.resolution)?;
    }
    Ok(transformers_per_level as u64 * per_level)
}
