use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{RatingItem, Reconstructor};
use crate::dataset::{load_batch, DatasetIndex};
use crate::error::{Error, Result};

/// Characters used for opaque file and item ids. Leaving out `c`, `d`, `f`,
/// `i` and `o` makes it impossible for an id to spell any model name.
pub const OPAQUE_ALPHABET: &[u8] = b"0123456789abeghjkmnpqrstuvwxyz";
pub const OPAQUE_LEN: usize = 12;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "img";

pub fn opaque_id<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..OPAQUE_LEN)
        .map(|_| OPAQUE_ALPHABET[rng.gen_range(0..OPAQUE_ALPHABET.len())] as char)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedImage {
    pub id: String,
    /// Path relative to the export directory.
    pub file: String,
    pub item: usize,
    pub source: String,
    pub class: String,
    /// `None` for the original image.
    pub model: Option<String>,
}

/// Server-side record of an export; never sent to raters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub images: Vec<ExportedImage>,
    pub rating_items: Vec<RatingItem>,
}

impl ExportManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?)
    }

    pub fn models(&self) -> Vec<String> {
        let mut models: Vec<String> = self.rating_items.iter().map(|r| r.model.clone()).collect();
        models.sort();
        models.dedup();
        models
    }
}

/// Quantises a `[3, H, W]` slice in `[0, 1]` to 8-bit RGB, `round(255·x)`.
pub fn to_png(planar: &[f32], height: usize, width: usize) -> RgbImage {
    let plane = height * width;
    assert_eq!(planar.len(), 3 * plane, "to_png: expected 3x{height}x{width} values");
    let q = |v: f32| (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        Rgb([q(planar[i]), q(planar[plane + i]), q(planar[2 * plane + i])])
    })
}

/// Writes each item's original plus one reconstruction per model as PNGs named
/// by opaque ids under `out_dir/img`, and the mapping to `out_dir/manifest.json`.
pub fn export_reconstructions(
    models: &[(&str, &dyn Reconstructor)],
    index: &DatasetIndex,
    items: &[usize],
    size: (usize, usize),
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<ExportManifest> {
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut fresh = || loop {
        let id = opaque_id(&mut rng);
        if used.insert(id.clone()) {
            return id;
        }
    };
    let mut manifest = ExportManifest {
        images: Vec::new(),
        rating_items: Vec::new(),
    };
    let write = |manifest: &mut ExportManifest, id: String, planar: &[f32], item: usize, model: Option<&str>| {
        let file = format!("{IMAGE_DIR}/{id}.png");
        let path = out_dir.join(&file);
        to_png(planar, size.0, size.1).save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        manifest.images.push(ExportedImage {
            id,
            file,
            item,
            source: index.items[item].path.clone(),
            class: index.class_name(item).to_string(),
            model: model.map(str::to_string),
        });
        Ok::<_, Error>(())
    };

    let per = 3 * size.0 * size.1;
    for ids in items.chunks(16) {
        let batch = load_batch(index, ids, size)?;
        let mut originals = Vec::with_capacity(ids.len());
        for (k, &item) in ids.iter().enumerate() {
            let id = fresh();
            write(&mut manifest, id.clone(), &batch.tensor.data()[k * per..(k + 1) * per], item, None)?;
            originals.push(id);
        }
        for &(model_id, model) in models {
            let recon = model.reconstruct(&batch.tensor)?;
            if recon.shape() != batch.tensor.shape() {
                return Err(Error::shape(format!("{model_id} returned {:?}", recon.shape())));
            }
            for (k, &item) in ids.iter().enumerate() {
                let image_id = fresh();
                write(&mut manifest, image_id.clone(), &recon.data()[k * per..(k + 1) * per], item, Some(model_id))?;
                manifest.rating_items.push(RatingItem {
                    item_id: fresh(),
                    image_id,
                    original_id: originals[k].clone(),
                    model: model_id.to_string(),
                    class: index.class_name(item).to_string(),
                });
            }
        }
    }
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
