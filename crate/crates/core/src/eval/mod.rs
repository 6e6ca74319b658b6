//! Objective reconstruction error, blinded reconstruction export and the
//! mean-opinion-score study backend.

mod export;
mod rating;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_batch, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub use export::{
    export_reconstructions, opaque_id, to_png, ExportManifest, ExportedImage, IMAGE_DIR, MANIFEST_FILE, OPAQUE_ALPHABET,
    OPAQUE_LEN,
};
pub use rating::{
    compute_mos, read_log, ModelMos, MosReport, NextItem, RatingBackend, RatingItem, RatingRecord, RatingSubmission,
    SessionConfig, SessionCreated, SessionRequest,
};

/// Anything that maps a `[N, 3, H, W]` batch to a reconstruction of the same
/// shape.
pub trait Reconstructor {
    fn reconstruct(&self, x: &Tensor) -> Result<Tensor>;
}

impl Reconstructor for Model {
    fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        Model::reconstruct(self, x)
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> Reconstructor for F {
    fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// MSE of each image in a batch, accumulated in f64.
pub fn per_image_mse(x: &Tensor, recon: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != recon.shape() {
        return Err(Error::shape(format!(
            "reconstruction shape {:?} differs from input {:?}",
            recon.shape(),
            x.shape()
        )));
    }
    let per = x.len() / x.shape()[0];
    Ok(x.data()
        .chunks_exact(per)
        .zip(recon.data().chunks_exact(per))
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / per as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMse {
    pub class: String,
    pub n: usize,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub checkpoint: Option<PathBuf>,
    pub n_images: usize,
    pub mean_mse: f64,
    pub per_class: Vec<ClassMse>,
}

/// Mean per-image MSE over the validation subset, with per-class breakdown.
pub fn evaluate_mse(
    model: &dyn Reconstructor,
    model_id: &str,
    index: &DatasetIndex,
    split: &Split,
    size: (usize, usize),
    batch_size: usize,
) -> Result<EvalReport> {
    if split.val.is_empty() {
        return Err(Error::Config("validation subset is empty".into()));
    }
    let mut sums = vec![(0.0f64, 0usize); index.classes.len()];
    for ids in split.val.chunks(batch_size.max(1)) {
        let batch = load_batch(index, ids, size)?;
        let recon = model.reconstruct(&batch.tensor)?;
        for (&item, mse) in ids.iter().zip(per_image_mse(&batch.tensor, &recon)?) {
            let slot = &mut sums[index.items[item].class];
            slot.0 += mse;
            slot.1 += 1;
        }
    }
    let total: f64 = sums.iter().map(|s| s.0).sum();
    let per_class = sums
        .iter()
        .zip(&index.classes)
        .filter(|(s, _)| s.1 > 0)
        .map(|(&(sum, n), class)| ClassMse {
            class: class.clone(),
            n,
            mean_mse: sum / n as f64,
        })
        .collect();
    Ok(EvalReport {
        model: model_id.to_string(),
        checkpoint: None,
        n_images: split.val.len(),
        mean_mse: total / split.val.len() as f64,
        per_class,
    })
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("model,n,mean_mse\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{}", r.model, r.n_images, r.mean_mse);
    }
    out
}

pub fn per_class_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("model,class,n,mean_mse\n");
    for r in reports {
        for c in &r.per_class {
            let _ = writeln!(out, "{},{},{},{}", r.model, c.class, c.n, c.mean_mse);
        }
    }
    out
}

/// Writes `<stem>.csv` and `<stem>_per_class.csv` into `dir`.
pub fn write_reports(reports: &[EvalReport], dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let main = dir.join(format!("{stem}.csv"));
    let per_class = dir.join(format!("{stem}_per_class.csv"));
    fs::write(&main, reports_csv(reports)).map_err(|e| Error::io(&main, e))?;
    fs::write(&per_class, per_class_csv(reports)).map_err(|e| Error::io(&per_class, e))?;
    Ok((main, per_class))
}
