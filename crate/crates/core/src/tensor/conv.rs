use super::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a sliding window: `floor((len + 2·pad − k) / stride) + 1`,
/// or `None` when the window does not fit the padded axis.
pub fn window_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if k == 0 || stride == 0 || k > len + 2 * pad {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<F: Scalar>(op: &'static str, x: &Tensor<F>, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if x.ndim() != 3 {
            return Err(Error::dim(op, format!("expected C×H×W input, got {:?}", x.shape())));
        }
        if stride == 0 {
            return Err(Error::arg(op, "stride must be positive"));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let fit = |len| {
            window_extent(len, k, stride, pad).ok_or_else(|| {
                Error::dim(
                    op,
                    format!("window {k} exceeds padded extent {len}+2·{pad} of input {:?}", x.shape()),
                )
            })
        };
        let oh = fit(h)?;
        let ow = fit(w)?;
        Ok(Geometry { c, h, w, k, stride, pad, oh, ow })
    }

    /// Input coordinate covered by output `o` at window offset `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&v| v < len)
    }
}

/// Lowers the input to `[C·k·k × oh·ow]` columns (zero padding).
fn im2col<F: Scalar>(g: &Geometry, x: &[F]) -> Vec<F> {
    let npix = g.oh * g.ow;
    let mut cols = vec![F::zero(); g.c * g.k * g.k * npix];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * npix..(r + 1) * npix];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[oy * g.ow + ox] = x[(ch * g.h + iy) * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(g: &Geometry, cols: &[F], dx: &mut [F]) {
    let npix = g.oh * g.ow;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ch * g.k + ky) * g.k + kx;
                let src = &cols[r * npix..(r + 1) * npix];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dx[(ch * g.h + iy) * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_kernels<F: Scalar>(op: &'static str, x: &Tensor<F>, kernels: &Tensor<F>) -> Result<(usize, usize)> {
    let ks = kernels.shape();
    if ks.len() != 4 || ks[2] != ks[3] || x.ndim() != 3 || ks[1] != x.shape()[0] {
        return Err(Error::dim(
            op,
            format!("kernels {ks:?} incompatible with input {:?}", x.shape()),
        ));
    }
    Ok((ks[0], ks[2]))
}

/// 2-D cross-correlation of a `C×H×W` image with `F×C×k×k` kernels,
/// zero padded. Output is `F×H'×W'`.
pub fn conv2d<F: Scalar>(x: &Tensor<F>, kernels: &Tensor<F>, stride: usize, pad: usize) -> Result<Tensor<F>> {
    let (filters, k) = check_kernels("conv2d", x, kernels)?;
    let g = Geometry::new("conv2d", x, k, stride, pad)?;
    x.ensure_finite("conv2d")?;
    kernels.ensure_finite("conv2d")?;
    let cols = im2col(&g, x.data());
    let npix = g.oh * g.ow;
    let mut out = Tensor::zeros(&[filters, g.oh, g.ow]);
    gemm_nn(filters, g.c * k * k, npix, kernels.data(), &cols, out.data_mut());
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and kernels.
pub fn conv2d_vjp<F: Scalar>(
    x: &Tensor<F>,
    kernels: &Tensor<F>,
    stride: usize,
    pad: usize,
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (filters, k) = check_kernels("conv2d_vjp", x, kernels)?;
    let g = Geometry::new("conv2d_vjp", x, k, stride, pad)?;
    if dy.shape() != [filters, g.oh, g.ow] {
        return Err(Error::dim(
            "conv2d_vjp",
            format!("upstream gradient {:?}, expected {:?}", dy.shape(), [filters, g.oh, g.ow]),
        ));
    }
    let cols = im2col(&g, x.data());
    let npix = g.oh * g.ow;
    let ckk = g.c * k * k;
    let mut dk = Tensor::zeros(kernels.shape());
    gemm_nt(filters, npix, ckk, dy.data(), &cols, dk.data_mut());
    let mut dcols = vec![F::zero(); ckk * npix];
    gemm_tn(filters, ckk, npix, kernels.data(), dy.data(), &mut dcols);
    let mut dx = Tensor::zeros(x.shape());
    col2im(&g, &dcols, dx.data_mut());
    Ok((dx, dk))
}

/// Max pooling result with the flat input index that won each window.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput<F: Scalar> {
    pub output: Tensor<F>,
    pub argmax: Vec<usize>,
}

/// Per-channel max pooling; padded cells are −∞ and never win. Ties go to the
/// first cell in row-major window order.
pub fn maxpool2d_with_indices<F: Scalar>(
    x: &Tensor<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<MaxPoolOutput<F>> {
    let g = Geometry::new("maxpool2d", x, k, stride, pad)?;
    // Larger padding would let a window sit entirely in the −∞ border.
    if pad > k / 2 {
        return Err(Error::arg(
            "maxpool2d",
            format!("padding {pad} exceeds half the window {k}"),
        ));
    }
    x.ensure_finite("maxpool2d")?;
    let mut out = Tensor::zeros(&[g.c, g.oh, g.ow]);
    let mut argmax = vec![0usize; g.c * g.oh * g.ow];
    let src = x.data();
    for ch in 0..g.c {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = F::neg_infinity();
                let mut at = usize::MAX;
                for ky in 0..k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..k {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            let o = (ch * g.h + iy) * g.w + ix;
                            if src[o] > best {
                                best = src[o];
                                at = o;
                            }
                        }
                    }
                }
                let o = (ch * g.oh + oy) * g.ow + ox;
                out.data_mut()[o] = best;
                argmax[o] = at;
            }
        }
    }
    Ok(MaxPoolOutput { output: out, argmax })
}

pub fn maxpool2d<F: Scalar>(x: &Tensor<F>, k: usize, stride: usize, pad: usize) -> Result<Tensor<F>> {
    maxpool2d_with_indices(x, k, stride, pad).map(|m| m.output)
}

/// Routes each output gradient to the input cell that won its window.
pub fn maxpool2d_vjp<F: Scalar>(
    input_shape: &[usize],
    pooled: &MaxPoolOutput<F>,
    dy: &Tensor<F>,
) -> Result<Tensor<F>> {
    if dy.shape() != pooled.output.shape() {
        return Err(Error::dim(
            "maxpool2d_vjp",
            format!("upstream gradient {:?}, expected {:?}", dy.shape(), pooled.output.shape()),
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let n = dx.len();
    for (&at, &g) in pooled.argmax.iter().zip(dy.data()) {
        if at >= n {
            return Err(Error::State("pooling indices do not fit the input shape".into()));
        }
        dx.data_mut()[at] += g;
    }
    Ok(dx)
}
