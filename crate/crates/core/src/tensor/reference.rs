//! Direct-loop convolutions on single `[C, H, W]` samples.
//!
//! These are slow and exist as the comparison baseline for the im2col path.

use super::{ConvGeometry, Element, Tensor};
use crate::error::{Error, Result};

fn check3(x: &Tensor<impl Element>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d_naive<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (c_in, h, wd) = check3(x)?;
    let &[c_out, wc, kh, kw] = w.shape() else {
        return Err(Error::shape(format!("conv weight must be 4-D, got {:?}", w.shape())));
    };
    if wc != c_in || b.len() != c_out {
        return Err(Error::shape(format!(
            "conv2d: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let geo = ConvGeometry::new(c_in, h, wd, c_out, kh, kw, stride, pad)?;
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let (xd, wdt) = (x.data(), w.data());
    let out = Tensor::from_fn(&[c_out, oh, ow], |idx| {
        let co = idx / (oh * ow);
        let oy = (idx / ow) % oh;
        let ox = idx % ow;
        let mut acc = b.data()[co];
        for ci in 0..c_in {
            for ki in 0..kh {
                for kj in 0..kw {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let ix = (ox * stride + kj) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    acc += xd[(ci * h + iy as usize) * wd + ix as usize]
                        * wdt[((co * c_in + ci) * kh + ki) * kw + kj];
                }
            }
        }
        acc
    });
    Ok(out)
}

/// Transposed convolution by direct scatter; weight is `[C_in, C_out, kH, kW]`.
pub fn conv_transpose2d_naive<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (c_in, h, wd) = check3(x)?;
    let &[wc, c_out, kh, kw] = w.shape() else {
        return Err(Error::shape(format!("conv weight must be 4-D, got {:?}", w.shape())));
    };
    if wc != c_in || b.len() != c_out {
        return Err(Error::shape(format!(
            "conv_transpose2d: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let geo = ConvGeometry::for_transposed(c_in, h, wd, c_out, kh, kw, stride, pad)?;
    let (oh, ow) = (geo.in_h, geo.in_w);
    let mut out = vec![E::zero(); c_out * oh * ow];
    for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
        chunk.iter_mut().for_each(|v| *v = b.data()[co]);
    }
    let (xd, wdt) = (x.data(), w.data());
    for ci in 0..c_in {
        for iy in 0..h {
            for ix in 0..wd {
                let v = xd[(ci * h + iy) * wd + ix];
                for co in 0..c_out {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let oy = (iy * stride + ki) as isize - pad as isize;
                            let ox = (ix * stride + kj) as isize - pad as isize;
                            if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                continue;
                            }
                            out[(co * oh + oy as usize) * ow + ox as usize] +=
                                v * wdt[((ci * c_out + co) * kh + ki) * kw + kj];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c_out, oh, ow], out)
}
