use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ae_lab::dataset::{self, DatasetIndex, Split};
use ae_lab::eval::{
    compute_mos, evaluate_mse, export_reconstructions, read_log, write_reports, ExportManifest, EvalReport,
    Reconstructor, SessionConfig,
};
use ae_lab::model::{Family, InputDims, LossWeights, Model, ModelSpec};
use ae_lab::trainer::{self, load_checkpoint, TrainConfig, CHECKPOINT_FILE, DEFAULT_BATCH_SIZE, SPLIT_FILE};
use ae_lab_client::RatingClient;
use ae_lab_service::{router, serve, AppState};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};

#[derive(Debug, Parser)]
#[command(name = "ae-lab", version, about = "Train, evaluate and rate image autoencoders")]
#[command(args_override_self = true, subcommand_required = true, arg_required_else_help = true)]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic class-foldered hand-sign dataset.
    Synth(SynthArgs),
    /// Scan a dataset and write its stratified train/validation split manifest.
    Prepare(PrepareArgs),
    /// Train one model and write its checkpoint, history and split.
    Train(TrainArgs),
    /// Validation MSE for one or more checkpoints.
    Eval(EvalArgs),
    /// Export blinded reconstructions for rating plus a side-by-side grid.
    Reconstruct(ReconstructArgs),
    /// Serve the rating API over an exported reconstruction set.
    RateServe(ServeArgs),
    /// Print the mean opinion score table.
    MosReport(MosArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root containing one folder per class.
    #[arg(long, env = "AE_LAB_DATA")]
    pub data: PathBuf,
    /// Keep at most this many images per class.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Fraction of each class held out for validation.
    #[arg(long, default_value_t = trainer::DEFAULT_RATIO)]
    pub ratio: f64,
    /// Reuse an existing split manifest instead of splitting.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<(DatasetIndex, Split)> {
        let index = dataset::scan(&self.data, self.cap)?;
        let split = match &self.split {
            Some(path) => Split::read_manifest(&index, path)?,
            None => dataset::split(&index, self.ratio, seed)?,
        };
        Ok((index, split))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 29)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = SPLIT_FILE)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model family: ff, conv or diff.
    #[arg(long)]
    pub model: Family,
    #[command(flatten)]
    pub data: DataArgs,
    /// Square input resolution.
    #[arg(long, default_value_t = 200)]
    pub size: usize,
    #[arg(long, default_value_t = ae_lab::model::DEFAULT_LATENT)]
    pub latent: usize,
    #[arg(long, default_value_t = trainer::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = trainer::DEFAULT_LR)]
    pub lr: f64,
    /// Weight of the diffusion noise-prediction term.
    #[arg(long, default_value_t = 1.0)]
    pub noise_weight: f64,
    /// Weight of the diffusion KL term.
    #[arg(long, default_value_t = 0.0)]
    pub kl_weight: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory; defaults to `runs/<family>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a training output directory.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Validation images to reconstruct.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "export")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory written by `reconstruct`.
    #[arg(long, default_value = "export")]
    pub export: PathBuf,
    /// Rating log; defaults to `<export>/ratings.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Items per session; all items when omitted.
    #[arg(long)]
    pub items: Option<usize>,
    /// Hide the original image next to each reconstruction.
    #[arg(long)]
    pub no_original: bool,
    /// Static directory for the rating page.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MosArgs {
    /// Ask a running rating service instead of reading files.
    #[arg(long, conflicts_with_all = ["export", "log"])]
    pub server: Option<String>,
    #[arg(long, default_value = "export")]
    pub export: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::RateServe(a) => rate_serve(a),
        Command::MosReport(a) => mos_report(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    dataset::make_synthetic(&a.out, a.classes, a.per_class, a.size, a.seed)?;
    println!("wrote {} images to {}", a.classes * a.per_class, a.out.display());
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let (index, split) = a.data.load(a.seed)?;
    split.write_manifest(&index, &a.out)?;
    println!(
        "{} classes, {} images: {} train, {} val -> {}",
        index.classes.len(),
        index.len(),
        split.train.len(),
        split.val.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut spec = ModelSpec::for_family(a.model, InputDims::rgb(a.size, a.size));
    spec.latent_dim = a.latent;
    let out = a.out.clone().unwrap_or_else(|| Path::new("runs").join(a.model.id()));
    let mut config = TrainConfig::new(spec, &a.data.data);
    config.epochs = a.epochs;
    config.batch_size = a.batch_size;
    config.lr = a.lr;
    config.seed = a.seed;
    config.weights = LossWeights {
        noise: a.noise_weight,
        kl: a.kl_weight,
    };
    config.per_class_cap = a.data.cap;
    config.ratio = a.data.ratio;
    config.loader_threads = a.threads;
    config.out_dir = Some(out.clone());
    config.validate()?;
    let (index, split) = a.data.load(a.seed)?;
    let outcome = trainer::train_on(&config, index, split)?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "{}: {} epochs, train loss {:.6}, val mse {:.6} -> {}",
        a.model,
        last.epoch,
        last.train_loss,
        last.val_mse,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<(PathBuf, Model)>> {
    let mut models = Vec::new();
    let mut seen = HashSet::new();
    for p in paths {
        let path = checkpoint_path(p);
        let (model, _) = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        if !seen.insert(model.family()) {
            bail!("two checkpoints of family {}; pass one per family", model.family());
        }
        models.push((path, model));
    }
    let dims = models[0].1.spec().input;
    if let Some((path, _)) = models.iter().find(|(_, m)| m.spec().input != dims) {
        bail!("{} has a different input size from {}", path.display(), models[0].0.display());
    }
    Ok(models)
}

fn eval(a: EvalArgs) -> Result<()> {
    let models = load_models(&a.checkpoints)?;
    let (index, split) = a.data.load(a.seed)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for (path, model) in &models {
        let input = model.spec().input;
        let mut report =
            evaluate_mse(model, model.family().id(), &index, &split, (input.height, input.width), a.batch_size)?;
        report.checkpoint = Some(path.clone());
        reports.push(report);
    }
    let (main, per_class) = write_reports(&reports, &a.out, "eval")?;
    print!("{}", ae_lab::eval::reports_csv(&reports));
    tracing::info!(main = %main.display(), per_class = %per_class.display(), "reports written");
    Ok(())
}

const GAP: u32 = 2;

fn grid(manifest: &ExportManifest, root: &Path, columns: &[Option<String>], size: (u32, u32)) -> Result<RgbImage> {
    let mut seen = HashSet::new();
    let items: Vec<usize> = manifest.images.iter().map(|i| i.item).filter(|&i| seen.insert(i)).collect();
    let (h, w) = size;
    let cols = columns.len() as u32;
    let mut out = RgbImage::from_pixel(cols * (w + GAP) - GAP, items.len() as u32 * (h + GAP) - GAP, Rgb([255; 3]));
    for (row, item) in items.iter().enumerate() {
        for (col, model) in columns.iter().enumerate() {
            let entry = manifest
                .images
                .iter()
                .find(|i| i.item == *item && &i.model == model)
                .context("export manifest is missing an image")?;
            let cell = image::open(root.join(&entry.file))?.to_rgb8();
            image::imageops::replace(
                &mut out,
                &cell,
                (col as u32 * (w + GAP)) as i64,
                (row as u32 * (h + GAP)) as i64,
            );
        }
    }
    Ok(out)
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let models = load_models(&a.checkpoints)?;
    let (index, split) = a.data.load(a.seed)?;
    let items = dataset::sample(&split.val, a.count, a.seed);
    if items.is_empty() {
        bail!("validation subset is empty");
    }
    let input = models[0].1.spec().input;
    let named: Vec<(&str, &dyn Reconstructor)> =
        models.iter().map(|(_, m)| (m.family().id(), m as &dyn Reconstructor)).collect();
    let manifest = export_reconstructions(&named, &index, &items, (input.height, input.width), &a.out, a.seed)?;

    let columns: Vec<Option<String>> =
        std::iter::once(None).chain(models.iter().map(|(_, m)| Some(m.family().id().to_string()))).collect();
    let sheet = grid(&manifest, &a.out, &columns, (input.height as u32, input.width as u32))?;
    let grid_path = a.out.join("grid.png");
    sheet.save(&grid_path)?;
    let legend: Vec<&str> = columns.iter().map(|c| c.as_deref().unwrap_or("original")).collect();
    println!(
        "{} items x {} models -> {} (grid columns: {})",
        items.len(),
        models.len(),
        a.out.display(),
        legend.join(", ")
    );
    Ok(())
}

fn rate_serve(a: ServeArgs) -> Result<()> {
    let log = a.log.unwrap_or_else(|| a.export.join("ratings.jsonl"));
    let config = SessionConfig {
        items_per_session: a.items,
        seed: a.seed,
        side_by_side: !a.no_original,
    };
    let state = AppState::from_export(&a.export, &log, config)?;
    let app = router(state, a.ui.as_deref());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        println!("rating service on http://{}", listener.local_addr()?);
        serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

fn mos_report(a: MosArgs) -> Result<()> {
    let report = match a.server {
        Some(url) => {
            let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            runtime.block_on(RatingClient::new(url).report())?
        }
        None => {
            let manifest = ExportManifest::read(a.export.join(ae_lab::eval::MANIFEST_FILE))?;
            let log = a.log.unwrap_or_else(|| a.export.join("ratings.jsonl"));
            compute_mos(&read_log(&log)?, &manifest.rating_items)
        }
    };
    print!("{}", report.to_table());
    Ok(())
}
