//! Ingestion and egress operators for compact vision transformers:
//! an overlapping convolutional tokenizer, the non-overlapping patch
//! tokenizer it replaces, sequence pooling, and positional embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_vjp, matmul, matmul_vjp, maxpool2d_vjp, maxpool2d_with_indices, relu, relu_vjp,
    window_extent, MaxPoolOutput, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Stack of `conv → relu → maxpool` blocks. The last block's filter count
/// is the token dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerConfig {
    in_channels: usize,
    blocks: Vec<ConvBlock>,
    pool: PoolSpec,
}

impl TokenizerConfig {
    pub fn new(in_channels: usize, blocks: Vec<ConvBlock>, pool: PoolSpec, embed_dim: usize) -> Result<Self> {
        let last = blocks
            .last()
            .ok_or_else(|| Error::arg("TokenizerConfig", "need at least one conv block"))?;
        if last.filters != embed_dim {
            return Err(Error::arg(
                "TokenizerConfig",
                format!("last block has {} filters but embedding dimension is {embed_dim}", last.filters),
            ));
        }
        if in_channels == 0 || blocks.iter().any(|b| b.filters == 0 || b.kernel == 0 || b.stride == 0) {
            return Err(Error::arg("TokenizerConfig", "channels, filters, kernels and strides must be positive"));
        }
        if pool.kernel == 0 || pool.stride == 0 || pool.pad > pool.kernel / 2 {
            return Err(Error::arg("TokenizerConfig", "pool needs positive kernel and stride, pad ≤ kernel/2"));
        }
        Ok(TokenizerConfig { in_channels, blocks, pool })
    }

    /// One block with the given conv and pool settings, `in_channels → embed_dim`.
    pub fn single(in_channels: usize, embed_dim: usize, conv: (usize, usize, usize), pool: (usize, usize, usize)) -> Result<Self> {
        Self::new(
            in_channels,
            vec![ConvBlock { filters: embed_dim, kernel: conv.0, stride: conv.1, pad: conv.2 }],
            PoolSpec { kernel: pool.0, stride: pool.1, pad: pool.2 },
            embed_dim,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn pool(&self) -> PoolSpec {
        self.pool
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.filters)
    }

    /// Output extent along one axis, if every stage fits.
    fn extent(&self, mut len: usize) -> Option<usize> {
        for b in &self.blocks {
            len = window_extent(len, b.kernel, b.stride, b.pad)?;
            len = window_extent(len, self.pool.kernel, self.pool.stride, self.pool.pad)?;
        }
        Some(len)
    }

    /// Token grid `(H', W')` for an `H × W` image.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        match (self.extent(height), self.extent(width)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::dim(
                "conv_tokenize",
                format!(
                    "image {height}×{width} is below the minimum extent {}",
                    self.min_input()
                ),
            )),
        }
    }

    /// Smallest axis length every stage accepts.
    pub fn min_input(&self) -> usize {
        (1..).find(|&len| self.extent(len).is_some()).unwrap_or(1)
    }

    /// Kernel tensor shape of every block.
    pub fn kernel_shapes(&self) -> Vec<[usize; 4]> {
        let mut c = self.in_channels;
        self.blocks
            .iter()
            .map(|b| {
                let s = [b.filters, c, b.kernel, b.kernel];
                c = b.filters;
                s
            })
            .collect()
    }

    /// He-normal kernels for every block.
    pub fn init_kernels<F: Scalar, R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor<F>> {
        self.kernel_shapes()
            .iter()
            .map(|s| Tensor::randn(s, (2.0 / (s[1] * s[2] * s[3]) as f64).sqrt(), rng))
            .collect()
    }
}

struct BlockTrace<F: Scalar> {
    input: Tensor<F>,
    conv: Tensor<F>,
    pooled: MaxPoolOutput<F>,
}

/// Intermediates kept by [`conv_tokenize`] for its backward pass.
pub struct TokenizerCache<F: Scalar = f64> {
    blocks: Vec<BlockTrace<F>>,
    grid: (usize, usize),
}

impl<F: Scalar> TokenizerCache<F> {
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }
}

fn check_kernels<F: Scalar>(cfg: &TokenizerConfig, kernels: &[Tensor<F>]) -> Result<()> {
    let shapes = cfg.kernel_shapes();
    if kernels.len() != shapes.len() || kernels.iter().zip(&shapes).any(|(k, s)| k.shape() != s) {
        return Err(Error::dim(
            "conv_tokenize",
            format!("kernels do not match block shapes {shapes:?}"),
        ));
    }
    Ok(())
}

/// Tokenizes a `C × H × W` image into `H'·W'` tokens of the embedding
/// dimension, row-major over the output grid. Any image at least
/// [`TokenizerConfig::min_input`] on each side is accepted.
pub fn conv_tokenize<F: Scalar>(
    image: &Tensor<F>,
    cfg: &TokenizerConfig,
    kernels: &[Tensor<F>],
) -> Result<(Tensor<F>, TokenizerCache<F>)> {
    if image.ndim() != 3 || image.shape()[0] != cfg.in_channels {
        return Err(Error::dim(
            "conv_tokenize",
            format!("image {:?} does not have {} channels", image.shape(), cfg.in_channels),
        ));
    }
    let grid = cfg.grid_for(image.shape()[1], image.shape()[2])?;
    check_kernels(cfg, kernels)?;
    let pool = cfg.pool;
    let mut x = image.clone();
    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    for (b, k) in cfg.blocks.iter().zip(kernels) {
        let conv = conv2d(&x, k, b.stride, b.pad)?;
        let pooled = maxpool2d_with_indices(&relu(&conv)?, pool.kernel, pool.stride, pool.pad)?;
        let next = pooled.output.clone();
        blocks.push(BlockTrace { input: x, conv, pooled });
        x = next;
    }
    let d = cfg.embed_dim();
    let tokens = x.into_reshape(&[d, grid.0 * grid.1])?.permute(&[1, 0])?;
    Ok((tokens, TokenizerCache { blocks, grid }))
}

/// Gradients of [`conv_tokenize`]: `(d image, d kernels)`.
pub fn conv_tokenize_vjp<F: Scalar>(
    cache: &TokenizerCache<F>,
    kernels: &[Tensor<F>],
    cfg: &TokenizerConfig,
    dtokens: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
    check_kernels(cfg, kernels)?;
    let d = cfg.embed_dim();
    let n = cache.grid.0 * cache.grid.1;
    if dtokens.shape() != [n, d] || cache.blocks.len() != kernels.len() {
        return Err(Error::dim(
            "conv_tokenize_vjp",
            format!("upstream gradient {:?}, expected {:?}", dtokens.shape(), [n, d]),
        ));
    }
    let mut g = dtokens
        .permute(&[1, 0])?
        .into_reshape(&[d, cache.grid.0, cache.grid.1])?;
    let mut dkernels = Vec::with_capacity(kernels.len());
    for ((b, trace), k) in cfg.blocks.iter().zip(&cache.blocks).zip(kernels).rev() {
        let dact = maxpool2d_vjp(trace.conv.shape(), &trace.pooled, &g)?;
        let dconv = relu_vjp(&trace.conv, &dact)?;
        let (dx, dk) = conv2d_vjp(&trace.input, k, b.stride, b.pad, &dconv)?;
        dkernels.push(dk);
        g = dx;
    }
    dkernels.reverse();
    Ok((g, dkernels))
}

fn patchify<F: Scalar>(image: &Tensor<F>, patch: usize) -> Result<(Tensor<F>, usize, usize)> {
    if image.ndim() != 3 {
        return Err(Error::dim("patch_tokenize", format!("expected C×H×W, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "patch_tokenize",
            format!("patch {patch} does not evenly divide {h}×{w}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let flat = Tensor::from_fn(&[gh * gw, c * patch * patch], |i| {
        let (pr, pc) = (i[0] / gw, i[0] % gw);
        let (ch, rest) = (i[1] / (patch * patch), i[1] % (patch * patch));
        image.at(&[ch, pr * patch + rest / patch, pc * patch + rest % patch])
    });
    Ok((flat, gh, gw))
}

/// Non-overlapping patches, each flattened channel-major (`c, dy, dx`) and
/// projected by a `C·p² × d` matrix. Extents must be multiples of `patch`.
pub fn patch_tokenize<F: Scalar>(image: &Tensor<F>, patch: usize, projection: &Tensor<F>) -> Result<Tensor<F>> {
    let (flat, _, _) = patchify(image, patch)?;
    matmul(&flat, projection)
}

pub fn patch_tokenize_vjp<F: Scalar>(
    image: &Tensor<F>,
    patch: usize,
    projection: &Tensor<F>,
    dtokens: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (flat, _, gw) = patchify(image, patch)?;
    let (dflat, dproj) = matmul_vjp(&flat, projection, dtokens)?;
    let mut dimage = Tensor::zeros(image.shape());
    let pp = patch * patch;
    for t in 0..flat.shape()[0] {
        let (pr, pc) = (t / gw, t % gw);
        for (j, &g) in dflat.row(t).iter().enumerate() {
            let (ch, rest) = (j / pp, j % pp);
            let idx = [ch, pr * patch + rest / patch, pc * patch + rest % patch];
            let o = dimage.offset(&idx);
            dimage.data_mut()[o] += g;
        }
    }
    Ok((dimage, dproj))
}

/// Learned scalar scorer for sequence pooling: `score = x · weight + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqPoolWeights<F: Scalar = f64> {
    pub weight: Tensor<F>,
    pub offset: F,
}

impl<F: Scalar> SeqPoolWeights<F> {
    pub fn zeros(d: usize) -> Self {
        SeqPoolWeights { weight: Tensor::zeros(&[d]), offset: F::zero() }
    }
}

/// Pooled output `[b × d]` together with the token weights `[b × n]`.
#[derive(Clone, Debug)]
pub struct SeqPoolOutput<F: Scalar = f64> {
    pub pooled: Tensor<F>,
    pub weights: Tensor<F>,
}

fn check_seq<F: Scalar>(op: &'static str, x: &Tensor<F>, g: &SeqPoolWeights<F>) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::dim(op, format!("expected b×n×d, got {:?}", x.shape())));
    }
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if n == 0 {
        return Err(Error::arg(op, "cannot pool an empty sequence"));
    }
    if g.weight.shape() != [d] {
        return Err(Error::dim(op, format!("scorer {:?} does not match token dim {d}", g.weight.shape())));
    }
    Ok((b, n, d))
}

/// Scores each token, softmaxes the scores over the sequence, and returns
/// the weighted sum of tokens.
pub fn seqpool<F: Scalar>(x: &Tensor<F>, g: &SeqPoolWeights<F>) -> Result<SeqPoolOutput<F>> {
    let (b, n, d) = check_seq("seqpool", x, g)?;
    x.ensure_finite("seqpool")?;
    let mut weights = Tensor::zeros(&[b, n]);
    let mut pooled = Tensor::zeros(&[b, d]);
    for s in 0..b {
        let tokens = &x.data()[s * n * d..(s + 1) * n * d];
        let w = &mut weights.data_mut()[s * n..(s + 1) * n];
        for (wi, tok) in w.iter_mut().zip(tokens.chunks(d)) {
            *wi = tok.iter().zip(g.weight.data()).map(|(&a, &b)| a * b).sum::<F>() + g.offset;
        }
        // Normalizing after the weighted sum keeps uniform scores exact:
        // every exponential is 1 and the result is the plain mean.
        let top = w.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        w.iter_mut().for_each(|v| *v = (*v - top).exp());
        let z: F = w.iter().copied().sum();
        let out = &mut pooled.data_mut()[s * d..(s + 1) * d];
        for (&e, tok) in w.iter().zip(tokens.chunks(d)) {
            for (o, &t) in out.iter_mut().zip(tok) {
                *o += e * t;
            }
        }
        out.iter_mut().for_each(|o| *o = *o / z);
        w.iter_mut().for_each(|v| *v = *v / z);
    }
    Ok(SeqPoolOutput { pooled, weights })
}

/// Gradients of [`seqpool`]: `(dx, d scorer)`. The offset gradient is always
/// zero because softmax ignores a shared shift.
pub fn seqpool_vjp<F: Scalar>(
    x: &Tensor<F>,
    g: &SeqPoolWeights<F>,
    out: &SeqPoolOutput<F>,
    dpooled: &Tensor<F>,
) -> Result<(Tensor<F>, SeqPoolWeights<F>)> {
    let (b, n, d) = check_seq("seqpool_vjp", x, g)?;
    if dpooled.shape() != [b, d] || out.weights.shape() != [b, n] {
        return Err(Error::dim(
            "seqpool_vjp",
            format!("upstream gradient {:?}, expected {:?}", dpooled.shape(), [b, d]),
        ));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = SeqPoolWeights::zeros(d);
    let mut dw = vec![F::zero(); n];
    let mut ds = vec![F::zero(); n];
    for s in 0..b {
        let tokens = &x.data()[s * n * d..(s + 1) * n * d];
        let w = &out.weights.data()[s * n..(s + 1) * n];
        let gp = &dpooled.data()[s * d..(s + 1) * d];
        for (dwi, tok) in dw.iter_mut().zip(tokens.chunks(d)) {
            *dwi = tok.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        }
        crate::tensor::activation::softmax_row_vjp(w, &dw, F::one(), &mut ds);
        let dxs = &mut dx.data_mut()[s * n * d..(s + 1) * n * d];
        for (i, (dtok, tok)) in dxs.chunks_mut(d).zip(tokens.chunks(d)).enumerate() {
            for ((dt, &gv), &gw) in dtok.iter_mut().zip(gp).zip(g.weight.data()) {
                *dt = w[i] * gv + ds[i] * gw;
            }
            for (dgv, &t) in dg.weight.data_mut().iter_mut().zip(tok) {
                *dgv += ds[i] * t;
            }
        }
    }
    Ok((dx, dg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEmbedKind {
    None,
    Sinusoidal,
    Learnable,
}

/// `n × d` positional table. Sinusoidal rows are
/// `[sin(p/10000^(2i/d)), cos(p/10000^(2i/d))]` pairs; learnable tables start
/// from normal draws with σ = 0.02 from `seed`. When `grid` is given it must
/// hold exactly `n` cells.
pub fn positional_embedding<F: Scalar>(
    kind: PosEmbedKind,
    n: usize,
    d: usize,
    grid: Option<(usize, usize)>,
    seed: u64,
) -> Result<Tensor<F>> {
    if let Some((h, w)) = grid {
        if h * w != n {
            return Err(Error::dim(
                "positional_embedding",
                format!("grid {h}×{w} does not hold {n} tokens"),
            ));
        }
    }
    Ok(match kind {
        PosEmbedKind::None => Tensor::zeros(&[n, d]),
        PosEmbedKind::Sinusoidal => {
            if !d.is_multiple_of(2) {
                return Err(Error::arg(
                    "positional_embedding",
                    format!("sinusoidal table needs an even dimension, got {d}"),
                ));
            }
            Tensor::from_fn(&[n, d], |i| {
                let (p, j) = (i[0] as f64, i[1]);
                let freq = 10000f64.powf((j - j % 2) as f64 / d as f64);
                F::of(if j % 2 == 0 { (p / freq).sin() } else { (p / freq).cos() })
            })
        }
        PosEmbedKind::Learnable => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::randn(&[n, d], 0.02, &mut rng)
        }
    })
}
