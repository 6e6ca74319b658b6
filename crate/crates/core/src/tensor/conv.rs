//! Batched im2col convolution kernels.
//!
//! Layouts are row-major: activations `[N, C, H, W]`, conv weights
//! `[C_out, C_in, kH, kW]`, transposed-conv weights `[C_in, C_out, kH, kW]`.
//! Column buffers are `[C·kH·kW, N·H'·W']` so each layer is a single GEMM
//! over the whole batch.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Layout};
use super::Element;
use crate::error::{Error, Result};

/// Geometry of a 2-D cross-correlation from `(in_channels, in_h, in_w)` to
/// `(out_channels, out_h, out_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((size - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let geo = Self {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
        };
        geo.validate()?;
        Ok(geo)
    }

    /// Geometry of the convolution whose input-adjoint is the transposed
    /// convolution `(in_channels, in_h, in_w) -> (out_channels, H', W')`.
    ///
    /// The returned geometry maps `(out_channels, H', W')` back to
    /// `(in_channels, in_h, in_w)`.
    #[allow(clippy::too_many_arguments)]
    pub fn for_transposed(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || in_h == 0 || in_w == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::shape(format!(
                "conv_transpose2d: invalid geometry ({in_channels}x{in_h}x{in_w}, stride {stride})"
            )));
        }
        let (oh, ow) = match (
            conv_transpose_out(in_h, kernel_h, stride, pad),
            conv_transpose_out(in_w, kernel_w, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv_transpose2d: non-positive output for input {in_h}x{in_w}, \
                     kernel {kernel_h}x{kernel_w}, stride {stride}, pad {pad}"
                )))
            }
        };
        let geo = Self::new(out_channels, oh, ow, in_channels, kernel_h, kernel_w, stride, pad)?;
        debug_assert_eq!((geo.out_h(), geo.out_w()), (in_h, in_w));
        Ok(geo)
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::shape("conv2d: stride must be at least 1"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::shape("conv2d: kernel must be non-empty"));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.in_h == 0 || self.in_w == 0 {
            return Err(Error::shape(format!("conv2d: degenerate geometry {self:?}")));
        }
        if conv_out(self.in_h, self.kernel_h, self.stride, self.pad).is_none()
            || conv_out(self.in_w, self.kernel_w, self.stride, self.pad).is_none()
        {
            return Err(Error::shape(format!(
                "conv2d: kernel {}x{} exceeds padded input {}x{} (pad {})",
                self.kernel_h, self.kernel_w, self.in_h, self.in_w, self.pad
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        conv_out(self.in_h, self.kernel_h, self.stride, self.pad).expect("validated")
    }

    pub fn out_w(&self) -> usize {
        conv_out(self.in_w, self.kernel_w, self.stride, self.pad).expect("validated")
    }

    /// Rows of the column buffer: `C_in·kH·kW`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }
}

/// Gathers patches of `x` (`[n, C, H, W]`) into `cols` (`[K, n·P]`).
pub(crate) fn im2col<E: Element>(x: &[E], n: usize, geo: &ConvGeometry, cols: &mut [E]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let p = oh * ow;
    let row_len = n * p;
    debug_assert_eq!(cols.len(), geo.patch_len() * row_len);
    debug_assert_eq!(x.len(), n * geo.in_channels * geo.in_plane());
    for b in 0..n {
        for c in 0..geo.in_channels {
            let plane = &x[(b * geo.in_channels + c) * geo.in_plane()..][..geo.in_plane()];
            for ki in 0..geo.kernel_h {
                for kj in 0..geo.kernel_w {
                    let row = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                    let dst = &mut cols[row * row_len + b * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= geo.in_h as isize {
                            line.iter_mut().for_each(|v| *v = E::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * geo.in_w..][..geo.in_w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                            *out = if ix < 0 || ix >= geo.in_w as isize {
                                E::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` (`[K, n·P]`) back into `x` (`[n, C, H, W]`).
pub(crate) fn col2im<E: Element>(cols: &[E], n: usize, geo: &ConvGeometry, x: &mut [E]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let p = oh * ow;
    let row_len = n * p;
    debug_assert_eq!(cols.len(), geo.patch_len() * row_len);
    debug_assert_eq!(x.len(), n * geo.in_channels * geo.in_plane());
    for b in 0..n {
        for c in 0..geo.in_channels {
            let plane = &mut x[(b * geo.in_channels + c) * geo.in_plane()..][..geo.in_plane()];
            for ki in 0..geo.kernel_h {
                for kj in 0..geo.kernel_w {
                    let row = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                    let src = &cols[row * row_len + b * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                        if iy < 0 || iy >= geo.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * geo.in_w..][..geo.in_w];
                        for ox in 0..ow {
                            let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                            if ix >= 0 && ix < geo.in_w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, C, P]` -> `[C, n·P]`.
fn to_channel_major<E: Element>(x: &[E], n: usize, c: usize, p: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[C, n·P]` -> `[n, C, P]`, adding a per-channel bias.
fn from_channel_major<E: Element>(y: &[E], n: usize, c: usize, p: usize, bias: &[E]) -> Vec<E> {
    let mut out = vec![E::zero(); y.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &y[ch * n * p + b * p..][..p];
            let dst = &mut out[(b * c + ch) * p..][..p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + bias[ch];
            }
        }
    }
    out
}

fn bias_grad<E: Element>(gout: &[E], n: usize, c: usize, p: usize, gb: &mut [E]) {
    for b in 0..n {
        for ch in 0..c {
            let s: E = gout[(b * c + ch) * p..][..p].iter().copied().sum();
            gb[ch] += s;
        }
    }
}

pub(crate) fn conv2d_forward<E: Element>(
    x: &[E],
    n: usize,
    geo: &ConvGeometry,
    w: &[E],
    b: &[E],
) -> Vec<E> {
    let k = geo.patch_len();
    let p = geo.out_plane();
    let mut cols = vec![E::zero(); k * n * p];
    im2col(x, n, geo, &mut cols);
    let mut y = vec![E::zero(); geo.out_channels * n * p];
    gemm(geo.out_channels, k, n * p, w, Layout::Normal, &cols, Layout::Normal, &mut y, false);
    from_channel_major(&y, n, geo.out_channels, p, b)
}

/// Accumulates gradients of a conv2d into whichever buffers are given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Element>(
    x: &[E],
    n: usize,
    geo: &ConvGeometry,
    w: &[E],
    gout: &[E],
    gx: Option<&mut [E]>,
    gw: Option<&mut [E]>,
    gb: Option<&mut [E]>,
) {
    let k = geo.patch_len();
    let p = geo.out_plane();
    let gy = to_channel_major(gout, n, geo.out_channels, p);
    if let Some(gb) = gb {
        bias_grad(gout, n, geo.out_channels, p, gb);
    }
    if let Some(gw) = gw {
        let mut cols = vec![E::zero(); k * n * p];
        im2col(x, n, geo, &mut cols);
        gemm(geo.out_channels, n * p, k, &gy, Layout::Normal, &cols, Layout::Transposed, gw, true);
    }
    if let Some(gx) = gx {
        let mut dcols = vec![E::zero(); k * n * p];
        gemm(k, geo.out_channels, n * p, w, Layout::Transposed, &gy, Layout::Normal, &mut dcols, false);
        col2im(&dcols, n, geo, gx);
    }
}

/// Transposed convolution. `geo` is the adjoint geometry from
/// [`ConvGeometry::for_transposed`]: its *output* is this op's input.
pub(crate) fn conv_transpose2d_forward<E: Element>(
    x: &[E],
    n: usize,
    geo: &ConvGeometry,
    w: &[E],
    b: &[E],
) -> Vec<E> {
    let k = geo.patch_len();
    let p = geo.out_plane();
    let xg = to_channel_major(x, n, geo.out_channels, p);
    let mut cols = vec![E::zero(); k * n * p];
    gemm(k, geo.out_channels, n * p, w, Layout::Transposed, &xg, Layout::Normal, &mut cols, false);
    let plane = geo.in_plane();
    let mut out = vec![E::zero(); n * geo.in_channels * plane];
    col2im(&cols, n, geo, &mut out);
    for (i, v) in out.iter_mut().enumerate() {
        *v += b[(i / plane) % geo.in_channels];
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<E: Element>(
    x: &[E],
    n: usize,
    geo: &ConvGeometry,
    w: &[E],
    gout: &[E],
    gx: Option<&mut [E]>,
    gw: Option<&mut [E]>,
    gb: Option<&mut [E]>,
) {
    let k = geo.patch_len();
    let p = geo.out_plane();
    if let Some(gb) = gb {
        bias_grad(gout, n, geo.in_channels, geo.in_plane(), gb);
    }
    if gx.is_none() && gw.is_none() {
        return;
    }
    let mut gcols = vec![E::zero(); k * n * p];
    im2col(gout, n, geo, &mut gcols);
    if let Some(gw) = gw {
        let xg = to_channel_major(x, n, geo.out_channels, p);
        gemm(geo.out_channels, n * p, k, &xg, Layout::Normal, &gcols, Layout::Transposed, gw, true);
    }
    if let Some(gx) = gx {
        let mut dy = vec![E::zero(); geo.out_channels * n * p];
        gemm(geo.out_channels, k, n * p, w, Layout::Normal, &gcols, Layout::Normal, &mut dy, false);
        let back = from_channel_major(&dy, n, geo.out_channels, p, &vec![E::zero(); geo.out_channels]);
        for (g, d) in gx.iter_mut().zip(back) {
            *g += d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formulas() {
        let g = ConvGeometry::new(3, 200, 200, 32, 4, 4, 2, 1).unwrap();
        assert_eq!((g.out_h(), g.out_w()), (100, 100));
        let t = ConvGeometry::for_transposed(128, 25, 25, 64, 4, 4, 2, 1).unwrap();
        assert_eq!((t.in_channels, t.in_h, t.in_w), (64, 50, 50));
        assert_eq!(t.out_channels, 128);
    }

    #[test]
    fn rejects_degenerate_geometry() {
        assert!(ConvGeometry::new(1, 2, 2, 1, 5, 5, 1, 0).is_err());
        assert!(ConvGeometry::new(1, 2, 2, 1, 1, 1, 0, 0).is_err());
        assert!(ConvGeometry::for_transposed(1, 1, 1, 1, 1, 1, 1, 1).is_err());
        assert!(ConvGeometry::for_transposed(1, 2, 2, 1, 1, 1, 0, 0).is_err());
    }

    #[test]
    fn shape_formula_sweep() {
        for h in 1..10 {
            for k in 1..5 {
                for s in 1..4 {
                    for p in 0..3 {
                        if let Ok(g) = ConvGeometry::new(1, h, h, 1, k, k, s, p) {
                            assert_eq!(g.out_h(), (h + 2 * p - k) / s + 1);
                        } else {
                            assert!(h + 2 * p < k);
                        }
                        match ConvGeometry::for_transposed(1, h, h, 1, k, k, s, p) {
                            Ok(t) => assert_eq!(t.in_h as isize, (h as isize - 1) * s as isize - 2 * p as isize + k as isize),
                            Err(_) => assert!((h as isize - 1) * s as isize - 2 * p as isize + (k as isize) <= 0),
                        }
                    }
                }
            }
        }
    }
}
