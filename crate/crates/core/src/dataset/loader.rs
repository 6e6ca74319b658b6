use std::path::Path;

use image::{DynamicImage, ImageReader};

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A stacked `[B, 3, H, W]` batch with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub tensor: Tensor,
    pub items: Vec<usize>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let image_err = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(e.to_string()))
}

/// Planar RGB in `[0, 1]`: alpha is dropped, grayscale is replicated across
/// channels, and 16-bit samples are divided by 65535.
fn planar_rgb(img: &DynamicImage) -> (usize, usize, Vec<f32>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    let mut put = |i: usize, px: [f32; 3]| {
        for (c, v) in px.into_iter().enumerate() {
            out[c * h * w + i] = v;
        }
    };
    match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            for (i, p) in img.to_rgb16().pixels().enumerate() {
                put(i, p.0.map(|v| v as f32 / 65535.0));
            }
        }
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            for (i, p) in img.to_rgb32f().pixels().enumerate() {
                put(i, p.0.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        _ => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                put(i, p.0.map(|v| v as f32 / 255.0));
            }
        }
    }
    (h, w, out)
}

/// Corner-aligned bilinear resize of a planar `[C, H, W]` buffer: output pixel
/// `(y, x)` samples the source at `(y·(H−1)/(OH−1), x·(W−1)/(OW−1))`.
pub fn resize_bilinear(src: &[f32], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(src.len(), channels * h * w, "resize_bilinear: buffer does not match {channels}x{h}x{w}");
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let pos = if n_out > 1 {
                    o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                } else {
                    (n_in - 1) as f64 / 2.0
                };
                let lo = (pos.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = coords(h, oh);
    let xs = coords(w, ow);
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for plane in src.chunks_exact(h * w) {
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    out
}

/// Loads a single image as a `[3, H, W]` tensor resized to `size = (H, W)`.
pub fn load_image(path: impl AsRef<Path>, size: (usize, usize)) -> Result<Tensor> {
    let img = decode(path.as_ref())?;
    let (h, w, rgb) = planar_rgb(&img);
    let data = resize_bilinear(&rgb, 3, h, w, size.0, size.1);
    Tensor::new(&[3, size.0, size.1], data)
}

/// Loads and stacks the given items; any undecodable file fails the whole
/// batch with an error naming its path.
pub fn load_batch(index: &DatasetIndex, items: &[usize], size: (usize, usize)) -> Result<ImageBatch> {
    if items.is_empty() {
        return Err(Error::Contract("load_batch: empty item list".into()));
    }
    let mut data = Vec::with_capacity(items.len() * 3 * size.0 * size.1);
    for &i in items {
        let item = index
            .items
            .get(i)
            .ok_or_else(|| Error::NotFound(format!("item {i} (index has {})", index.len())))?;
        let t = load_image(index.root.join(&item.path), size)?;
        data.extend_from_slice(t.data());
    }
    Ok(ImageBatch {
        tensor: Tensor::new(&[items.len(), 3, size.0, size.1], data)?,
        items: items.to_vec(),
    })
}
