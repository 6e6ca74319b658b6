use std::collections::HashSet;
use std::path::Path;

use ae_lab::dataset::{self, make_synthetic};
use ae_lab::error::Error;
use ae_lab::model::{Architecture, Family, InputDims, LossWeights, Model, ModelSpec};
use ae_lab::nn::{AdamConfig, AdamState};
use ae_lab::tensor::{Tape, Tensor};
use ae_lab::trainer::{
    self, decode_checkpoint, encode_checkpoint, load_checkpoint, CheckpointMeta, Header, Phase, TrainConfig,
    CHECKPOINT_FILE, HISTORY_FILE, SPLIT_FILE,
};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn small_spec(family: Family, size: usize) -> ModelSpec {
    let mut spec = ModelSpec::for_family(family, InputDims::rgb(size, size));
    spec.latent_dim = 8;
    match &mut spec.arch {
        Architecture::Feedforward { hidden } => *hidden = vec![32],
        Architecture::Convolutional { conv } => conv.channels = vec![4, 8],
        Architecture::Diffusion { conv, diffusion } => {
            conv.channels = vec![4, 8];
            diffusion.denoiser_width = 16;
            diffusion.timesteps = 10;
        }
    }
    spec
}

fn tiny_config(root: &Path, family: Family) -> TrainConfig {
    let mut config = TrainConfig::new(small_spec(family, 8), root);
    config.epochs = 2;
    config.batch_size = 4;
    config.seed = 11;
    config
}

fn tiny_data() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    make_synthetic(dir.path(), 3, 6, 12, 5).unwrap();
    dir
}

fn header_of(bytes: &[u8]) -> (usize, Header) {
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    (len, serde_json::from_slice(&bytes[8..8 + len]).unwrap())
}

fn with_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut value: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
    edit(&mut value);
    let header = serde_json::to_vec(&value).unwrap();
    let mut out = b"AEC1".to_vec();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&bytes[8 + len..]);
    out
}

fn checkpoint_field(err: Error) -> String {
    match err {
        Error::Checkpoint { field, .. } => field,
        other => panic!("expected a checkpoint error, got {other}"),
    }
}

#[test]
fn zero_epochs_is_a_config_error() {
    let data = tiny_data();
    let mut config = tiny_config(data.path(), Family::Feedforward);
    config.epochs = 0;
    assert!(matches!(trainer::train(&config), Err(Error::Config(_))));
}

#[test]
fn identical_config_gives_identical_history_and_parameters() {
    let data = tiny_data();
    for family in Family::ALL {
        let config = tiny_config(data.path(), family);
        let a = trainer::train(&config).unwrap();
        let b = trainer::train(&config).unwrap();
        assert_eq!(a.history, b.history, "{family}");
        assert_eq!(a.model.params(), b.model.params(), "{family}");
        assert_eq!(a.access, b.access, "{family}");
    }
}

#[test]
fn loader_thread_count_does_not_change_results() {
    let data = tiny_data();
    let config = tiny_config(data.path(), Family::Convolutional);
    let mut threaded = config.clone();
    threaded.loader_threads = 4;
    threaded.queue_depth = 1;
    let a = trainer::train(&config).unwrap();
    let b = trainer::train(&threaded).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.access, b.access);
}

#[test]
fn validation_items_never_reach_the_optimizer() {
    let data = tiny_data();
    let out = trainer::train(&tiny_config(data.path(), Family::Diffusion)).unwrap();
    let val: HashSet<usize> = out.split.val.iter().copied().collect();
    let trained: Vec<usize> = out.access.items(Phase::Train).collect();
    assert!(trained.iter().all(|i| !val.contains(i)));
    assert_eq!(trained.len(), 2 * out.split.train.len());
    let validated: HashSet<usize> = out.access.items(Phase::Validate).collect();
    assert_eq!(validated, val);
}

#[test]
fn losses_are_finite_and_non_negative() {
    let data = tiny_data();
    for family in Family::ALL {
        let out = trainer::train(&tiny_config(data.path(), family)).unwrap();
        for r in &out.history.epochs {
            assert!(r.train_loss.is_finite() && r.train_loss >= 0.0, "{family}: {r:?}");
            assert!(r.val_mse.is_finite() && r.val_mse >= 0.0, "{family}: {r:?}");
        }
    }
}

#[test]
fn training_reduces_loss_at_desk_scale() {
    let data = tempfile::tempdir().unwrap();
    make_synthetic(data.path(), 29, 20, 32, 0).unwrap();
    for family in Family::ALL {
        let mut config = TrainConfig::new(ModelSpec::for_family(family, InputDims::rgb(32, 32)), data.path());
        config.epochs = 3;
        let out = trainer::train(&config).unwrap();
        let first = out.history.epochs.first().unwrap();
        let last = out.history.last().unwrap();
        assert!(last.train_loss < first.train_loss, "{family}: {:?}", out.history);
    }
}

#[test]
fn one_step_on_an_image_reduces_its_reconstruction_loss() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    let x = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen::<f32>());
    let recon_loss = |model: &Model, step: Option<&mut AdamState>| {
        let mut model = model.clone();
        let mut noise = Xoshiro256PlusPlus::seed_from_u64(99);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = model.forward(&mut tape, &bound, xv, &mut noise).unwrap();
        let recon = tape.mse(out.recon, xv).unwrap();
        let value = tape.value(recon)[0];
        if let Some(adam) = step {
            let loss = model.loss(&mut tape, &out, xv, LossWeights::default()).unwrap();
            model.params_mut().zero_grad();
            tape.backward(loss).unwrap();
            model.params_mut().accumulate_grads(&tape, &bound).unwrap();
            adam.step(model.params_mut().tensors_mut()).unwrap();
        }
        (value, model)
    };
    for family in Family::ALL {
        let model: Model = Model::build(&ModelSpec::for_family(family, InputDims::rgb(32, 32)), 3).unwrap();
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            model.params().tensors(),
        );
        let (before, stepped) = recon_loss(&model, Some(&mut adam));
        let (after, _) = recon_loss(&stepped, None);
        assert!(after < before, "{family}: {before} -> {after}");
    }
}

#[test]
fn outputs_are_written_and_checkpoint_round_trips() {
    let data = tiny_data();
    let out_dir = tempfile::tempdir().unwrap();
    for family in Family::ALL {
        let mut config = tiny_config(data.path(), family);
        config.out_dir = Some(out_dir.path().join(family.id()));
        let out = trainer::train(&config).unwrap();
        let dir = config.out_dir.unwrap();

        let csv = std::fs::read_to_string(dir.join(HISTORY_FILE)).unwrap();
        assert_eq!(csv, out.history.to_csv());
        let index = dataset::scan(data.path(), None).unwrap();
        let split = dataset::Split::read_manifest(&index, dir.join(SPLIT_FILE)).unwrap();
        let sorted = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort();
            v
        };
        assert_eq!(sorted(&split.train), sorted(&out.split.train));
        assert_eq!(sorted(&split.val), sorted(&out.split.val));

        let (model, meta) = load_checkpoint(dir.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(meta.epoch, 2);
        assert_eq!(meta.seed, 11);
        assert_eq!(meta.final_train_loss, out.history.last().unwrap().train_loss);
        assert_eq!(model.spec(), out.model.spec());
        for ((na, a), (nb, b)) in model.params().iter().zip(out.model.params().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{na}");
        }
        let batch = dataset::load_batch(&index, &out.split.val, (8, 8)).unwrap();
        let ra = model.reconstruct(&batch.tensor).unwrap();
        let rb = out.model.reconstruct(&batch.tensor).unwrap();
        assert_eq!(ra.data(), rb.data(), "{family}");
    }
}

fn sample_checkpoint() -> Vec<u8> {
    let model = Model::build(&small_spec(Family::Convolutional, 8), 0).unwrap();
    let meta = CheckpointMeta {
        epoch: 1,
        final_train_loss: 0.5,
        seed: 0,
    };
    encode_checkpoint(&model, meta).unwrap()
}

#[test]
fn checkpoint_layout_is_magic_length_header_data() {
    let bytes = sample_checkpoint();
    assert_eq!(&bytes[..4], b"AEC1");
    let (len, header) = header_of(&bytes);
    assert_eq!(header.version, 1);
    let data = &bytes[8 + len..];
    let first = &header.manifest[0];
    let model: Model = Model::build(&small_spec(Family::Convolutional, 8), 0).unwrap();
    let expect = model.params().by_name(&first.name).unwrap();
    let v = f32::from_le_bytes(data[first.offset..first.offset + 4].try_into().unwrap());
    assert_eq!(v, expect.data()[0]);
    let total: usize = header.manifest.iter().map(|e| 4 * e.shape.iter().product::<usize>()).sum();
    assert_eq!(data.len(), total);
}

#[test]
fn corrupted_shape_names_the_parameter() {
    let bytes = sample_checkpoint();
    let (_, header) = header_of(&bytes);
    let target = header.manifest[2].name.clone();
    let corrupt = with_header(&bytes, |h| {
        h["manifest"][2]["shape"] = serde_json::json!([1000, 1000]);
    });
    let err = decode_checkpoint(&corrupt).unwrap_err();
    assert_eq!(checkpoint_field(err), target);

    let swapped = with_header(&bytes, |h| {
        let shape = h["manifest"][0]["shape"].as_array().unwrap().clone();
        let mut reversed = shape.clone();
        reversed.reverse();
        h["manifest"][0]["shape"] = serde_json::Value::Array(reversed);
    });
    let err = decode_checkpoint(&swapped).unwrap_err().to_string();
    assert!(err.contains(&header.manifest[0].name), "{err}");
}

#[test]
fn version_mismatch_and_truncation_are_rejected() {
    let bytes = sample_checkpoint();
    let future = with_header(&bytes, |h| h["version"] = serde_json::json!(2));
    assert_eq!(checkpoint_field(decode_checkpoint(&future).unwrap_err()), "version");

    let (len, _) = header_of(&bytes);
    assert_eq!(checkpoint_field(decode_checkpoint(&bytes[..3]).unwrap_err()), "magic");
    assert_eq!(checkpoint_field(decode_checkpoint(&bytes[..8 + len / 2]).unwrap_err()), "header");
    assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert_eq!(checkpoint_field(decode_checkpoint(&wrong_magic).unwrap_err()), "magic");

    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0; 4]);
    assert_eq!(checkpoint_field(decode_checkpoint(&trailing).unwrap_err()), "data");
}

#[test]
fn non_finite_loss_stops_training_with_location() {
    let data = tiny_data();
    let mut config = tiny_config(data.path(), Family::Diffusion);
    config.weights = LossWeights {
        noise: f64::INFINITY,
        kl: 0.0,
    };
    match trainer::train(&config) {
        Err(Error::NonFiniteLoss { epoch, batch, value }) => {
            assert_eq!((epoch, batch), (1, 1));
            assert!(!value.is_finite());
        }
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|o| o.history)),
    }
}
