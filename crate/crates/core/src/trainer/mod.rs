//! The training loop: seeded per-epoch shuffles, threaded batch loading, Adam
//! updates, per-epoch validation and checkpointing.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crossbeam_channel::bounded;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, fisher_yates, load_batch, DatasetIndex, ImageBatch, Split};
use crate::error::{Error, Result};
use crate::eval::per_image_mse;
use crate::model::{LossWeights, Model, ModelSpec};
use crate::nn::{AdamConfig, AdamState};
use crate::tensor::Tape;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, Header, ManifestEntry,
    FORMAT_VERSION, MAGIC,
};

pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_RATIO: f64 = 0.2;

pub const HISTORY_FILE: &str = "history.csv";
pub const SPLIT_FILE: &str = "split.txt";
pub const CHECKPOINT_FILE: &str = "model.aec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub spec: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub data_root: PathBuf,
    pub per_class_cap: Option<usize>,
    pub ratio: f64,
    /// Where history, split manifest and checkpoint are written, if anywhere.
    pub out_dir: Option<PathBuf>,
    pub loader_threads: usize,
    pub queue_depth: usize,
}

impl TrainConfig {
    pub fn new(spec: ModelSpec, data_root: impl Into<PathBuf>) -> Self {
        Self {
            spec,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            seed: 0,
            weights: LossWeights::default(),
            data_root: data_root.into(),
            per_class_cap: None,
            ratio: DEFAULT_RATIO,
            out_dir: None,
            loader_threads: 1,
            queue_depth: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("split ratio must lie in (0, 1), got {}", self.ratio));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.loader_threads == 0 || self.queue_depth == 0 {
            return bad("loader_threads and queue_depth must be at least 1".into());
        }
        self.spec.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mse\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_mse);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub epoch: usize,
    pub phase: Phase,
    pub items: Vec<usize>,
}

/// Every batch the loop consumed, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub events: Vec<Access>,
}

impl AccessLog {
    pub fn items(&self, phase: Phase) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().filter(move |a| a.phase == phase).flat_map(|a| a.items.iter().copied())
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
    pub index: DatasetIndex,
    pub split: Split,
    pub access: AccessLog,
}

/// Loads `batches` on worker threads and hands them to `consume` in order.
fn stream_batches(
    index: &DatasetIndex,
    batches: &[Vec<usize>],
    size: (usize, usize),
    threads: usize,
    depth: usize,
    mut consume: impl FnMut(usize, ImageBatch) -> Result<()>,
) -> Result<()> {
    let threads = threads.min(batches.len()).max(1);
    std::thread::scope(|scope| {
        let (tx, rx) = bounded::<(usize, Result<ImageBatch>)>(depth);
        for worker in 0..threads {
            let tx = tx.clone();
            scope.spawn(move || {
                for j in (worker..batches.len()).step_by(threads) {
                    if tx.send((j, load_batch(index, &batches[j], size))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut next = 0;
        let result = (|| {
            for (j, batch) in rx.iter() {
                pending.insert(j, batch);
                while let Some(batch) = pending.remove(&next) {
                    consume(next, batch?)?;
                    next += 1;
                }
            }
            Ok(())
        })();
        drop(rx);
        result
    })
}

fn chunk(items: &[usize], size: usize) -> Vec<Vec<usize>> {
    items.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Mean per-image MSE of `model` over `items`.
pub fn validation_mse(model: &Model, index: &DatasetIndex, items: &[usize], config: &TrainConfig) -> Result<f64> {
    validate_logged(model, index, items, config, 0, &mut AccessLog::default())
}

fn validate_logged(
    model: &Model,
    index: &DatasetIndex,
    items: &[usize],
    config: &TrainConfig,
    epoch: usize,
    log: &mut AccessLog,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let size = (config.spec.input.height, config.spec.input.width);
    let (mut sum, mut n) = (0.0, 0usize);
    stream_batches(index, &chunk(items, config.batch_size), size, config.loader_threads, config.queue_depth, |_, batch| {
        let recon = model.reconstruct(&batch.tensor)?;
        sum += per_image_mse(&batch.tensor, &recon)?.iter().sum::<f64>();
        n += batch.len();
        log.events.push(Access {
            epoch,
            phase: Phase::Validate,
            items: batch.items,
        });
        Ok(())
    })?;
    Ok(sum / n as f64)
}

/// Scans and splits the dataset, then trains.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let index = dataset::scan(&config.data_root, config.per_class_cap)?;
    let split = dataset::split(&index, config.ratio, config.seed)?;
    train_on(config, index, split)
}

/// Trains on an existing index and split.
pub fn train_on(config: &TrainConfig, index: DatasetIndex, split: Split) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("training subset is empty".into()));
    }
    let mut model = Model::build(&config.spec, config.seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.params().tensors(),
    );
    let mut noise_rng = Xoshiro256PlusPlus::seed_from_u64(config.seed ^ 0xd1ff_5eed);
    let size = (config.spec.input.height, config.spec.input.width);
    let mut history = History::default();
    let mut access = AccessLog::default();

    for epoch in 1..=config.epochs {
        let mut order = split.train.clone();
        fisher_yates(&mut order, &mut Xoshiro256PlusPlus::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        stream_batches(
            &index,
            &chunk(&order, config.batch_size),
            size,
            config.loader_threads,
            config.queue_depth,
            |b, batch| {
                let mut tape = Tape::new();
                let bound = model.params().bind(&mut tape);
                let x = tape.leaf(&batch.tensor);
                let out = model.forward(&mut tape, &bound, x, &mut noise_rng)?;
                let loss = model.loss(&mut tape, &out, x, config.weights)?;
                let value = tape.value(loss)[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                        value,
                    });
                }
                model.params_mut().zero_grad();
                tape.backward(loss)?;
                model.params_mut().accumulate_grads(&tape, &bound)?;
                adam.step(model.params_mut().tensors_mut())?;
                loss_sum += value * batch.len() as f64;
                seen += batch.len();
                access.events.push(Access {
                    epoch,
                    phase: Phase::Train,
                    items: batch.items,
                });
                Ok(())
            },
        )?;
        let train_loss = loss_sum / seen as f64;
        let val_mse = validate_logged(&model, &index, &split.val, config, epoch, &mut access)?;
        tracing::info!(epoch, train_loss, val_mse, family = %config.spec.family(), "epoch finished");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
        });
    }

    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        history.write_csv(dir.join(HISTORY_FILE))?;
        split.write_manifest(&index, dir.join(SPLIT_FILE))?;
        let last = history.last().expect("epochs >= 1");
        let meta = CheckpointMeta {
            epoch: last.epoch,
            final_train_loss: last.train_loss,
            seed: config.seed,
        };
        save_checkpoint(&model, meta, dir.join(CHECKPOINT_FILE))?;
    }

    Ok(TrainOutcome {
        model,
        history,
        index,
        split,
        access,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Family, InputDims};

    #[test]
    fn config_preconditions() {
        let spec = ModelSpec::for_family(Family::Feedforward, InputDims::rgb(8, 8));
        let base = TrainConfig::new(spec, "/tmp");
        assert!(base.validate().is_ok());
        for mutate in [
            (|c: &mut TrainConfig| c.epochs = 0) as fn(&mut TrainConfig),
            |c| c.batch_size = 0,
            |c| c.ratio = 1.0,
            |c| c.lr = 0.0,
            |c| c.loader_threads = 0,
        ] {
            let mut c = base.clone();
            mutate(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_mse: 0.25,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_mse\n1,0.5,0.25\n");
    }

    #[test]
    fn chunking_keeps_remainder() {
        assert_eq!(chunk(&[1, 2, 3, 4, 5], 2), vec![vec![1, 2], vec![3, 4], vec![5]]);
    }
}
