use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};

use csalnet_core::checkpoint::ModelCheckpoint;
use csalnet_core::data::{generate_synthetic, load_dataset, loso_split, SynthConfig};
use csalnet_core::gt::{sigma_pixels, GtConfig};
use csalnet_core::imageio;
use csalnet_core::loss::LossKind;
use csalnet_core::nn::Mode;
use csalnet_core::pipeline::{self, dataset_gt_config, EvalConfig, Negatives, PreprocessConfig, Predictor};
use csalnet_core::train::{train, ContextMode, TrainConfig};
use csalnet_core::uncertainty::{export_map, mc_predict};
use csalnet_core::{forward, ContextAttributes, Error, ModelConfig};

#[derive(Parser)]
#[command(name = "csalnet", version, about = "Context-conditioned pedestrian attention prediction")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "CSALNET_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on every subject except the held-out one.
    Train(TrainArgs),
    /// Score a checkpoint or a baseline on a held-out subject.
    Eval(EvalArgs),
    /// Predict the attention map of one image.
    Predict(PredictArgs),
    /// Equalize frames and render ground-truth maps.
    Preprocess(PreprocessArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 11)]
    subjects: u32,
    #[arg(long, default_value_t = 12)]
    scenarios: u32,
    #[arg(long, default_value_t = 14)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Subject excluded from training.
    #[arg(long)]
    holdout: Option<u32>,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Input size; defaults to the dataset's frame size.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value = "ew-mse")]
    loss: LossKind,
    #[arg(long, conflicts_with = "random_context")]
    no_context: bool,
    #[arg(long)]
    random_context: bool,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Encoder channel widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// History CSV (default: `<out>.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    CenterBias,
}

#[derive(Clone, Copy, ValueEnum)]
enum NegativesArg {
    SameSubject,
    OtherSubjects,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    holdout: u32,
    /// Dropout samples per frame; 0 runs the deterministic network.
    #[arg(long, default_value_t = 30)]
    mc_samples: usize,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Center-bias width as a fraction of the shorter side.
    #[arg(long, default_value_t = 0.25)]
    center_sigma: f64,
    /// Source of shuffled-AUC negatives.
    #[arg(long, value_enum, default_value = "same-subject")]
    negatives: NegativesArg,
    #[arg(long, default_value_t = csalnet_core::metrics::DEFAULT_SPLITS)]
    splits: usize,
    /// Report CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-frame scores CSV.
    #[arg(long)]
    per_frame: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// `yes|no,high|low`; required for context-enabled models.
    #[arg(long)]
    context: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    var: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    clahe_clip: f64,
    #[arg(long, default_value_t = 8)]
    clahe_tiles: usize,
    #[arg(long, default_value_t = 9.3)]
    dva: f64,
    #[arg(long, default_value_t = 110.0)]
    fov: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 3)]
    frames_back: usize,
}

/// A flag combination rejected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Context(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Preprocess(a) => cmd_preprocess(a),
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_subjects: a.subjects,
        n_scenarios: a.scenarios,
        frames_per_trial: a.frames,
        image_size: a.size,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let manifest = generate_synthetic(&cfg, &a.out)?;
    println!(
        "{} scenarios, {} frames, {} subjects written to {}",
        manifest.records.len(),
        manifest.num_frames(),
        manifest.subjects().len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let context_mode = match (a.no_context, a.random_context) {
        (true, true) => return Err(usage("--no-context and --random-context are mutually exclusive")),
        (true, false) => ContextMode::Disabled,
        (false, true) => ContextMode::Random,
        (false, false) => ContextMode::Normal,
    };
    let manifest = load_dataset(&a.data)?;
    if manifest.height != manifest.width {
        bail!("frames must be square, got {}x{}", manifest.width, manifest.height);
    }
    let size = a.size.unwrap_or(manifest.width);
    if size != manifest.width {
        return Err(usage(format!("--size {size} does not match the {}-pixel frames", manifest.width)));
    }
    let mut model_cfg = ModelConfig {
        context_enabled: context_mode != ContextMode::Disabled,
        dropout_p: a.dropout,
        seed: a.seed,
        ..ModelConfig::desk(size)
    };
    if let Some(w) = a.widths {
        model_cfg.channel_widths = w;
    }
    model_cfg.validate()?;
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        epochs_max: a.epochs,
        patience: a.patience,
        loss: a.loss,
        context_mode,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let records = match a.holdout {
        Some(s) => loso_split(&manifest, s)?.0,
        None => manifest.records.clone(),
    };
    let (gt, preprocessed) = dataset_gt_config(&manifest)?;
    let outcome = train(&records, &model_cfg, &cfg, &gt, preprocessed, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  val AUC-J {:.4}  {:.1}s",
            e.epoch, e.train_loss, e.val_auc_j, e.seconds
        );
    })?;
    outcome.checkpoint.save(&a.out)?;
    let history = a.history.unwrap_or_else(|| sidecar(&a.out, "history.csv"));
    fs::write(&history, outcome.history.to_csv()).with_context(|| format!("writing {}", history.display()))?;
    println!(
        "best epoch {} (val AUC-J {:.4}); checkpoint {}",
        outcome.history.best_epoch,
        outcome.checkpoint.best_val_auc_j,
        a.out.display()
    );
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    if a.splits == 0 {
        return Err(usage("--splits must be at least 1"));
    }
    let ckpt = a.ckpt.as_deref().map(ModelCheckpoint::load).transpose()?;
    let manifest = load_dataset(&a.data)?;
    let (label, predictor) = match &ckpt {
        Some(c) => {
            if c.params.config.input_size != manifest.width {
                bail!(
                    "checkpoint expects {}-pixel frames, dataset has {}",
                    c.params.config.input_size,
                    manifest.width
                );
            }
            let stem = a.ckpt.as_ref().and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned());
            (stem.unwrap_or_else(|| "model".into()), Predictor::Model { net: &c.params, mc_samples: a.mc_samples })
        }
        None => ("center_bias".to_string(), Predictor::CenterBias { sigma_frac: a.center_sigma }),
    };
    let cfg = EvalConfig {
        seed: a.seed,
        n_splits: a.splits,
        negatives: match a.negatives {
            NegativesArg::SameSubject => Negatives::SameSubject,
            NegativesArg::OtherSubjects => Negatives::OtherSubjects,
        },
    };
    let report = pipeline::evaluate_holdout(&label, &manifest, a.holdout, predictor, &cfg)?;
    match &a.out {
        Some(p) => fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", report.to_csv()),
    }
    if let Some(p) = &a.per_frame {
        fs::write(p, report.per_frame_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let context = a.context.as_deref().map(str::parse::<ContextAttributes>).transpose()?;
    let ckpt = ModelCheckpoint::load(&a.ckpt)?;
    let net = &ckpt.params;
    let context = match (net.config.context_enabled, context) {
        (true, None) => return Err(usage("this model needs --context yes|no,high|low")),
        (false, Some(_)) => return Err(usage("this model was trained without context; drop --context")),
        (_, c) => c,
    };
    let image = imageio::load_rgb(&a.image)?;
    let size = net.config.input_size;
    if image.shape() != [3, size, size] {
        bail!("the model expects a {size}x{size} image, got {:?}", &image.shape()[1..]);
    }
    let (mean, var) = if a.mc_samples == 0 {
        (forward(net, &image, context, Mode::Eval, a.seed)?, None)
    } else {
        let u = mc_predict(net, &image, context, a.mc_samples, a.seed)?;
        (u.mean_map, Some(u.variance_map))
    };
    export_map(&a.out, &mean)?;
    match (&a.var, var) {
        (Some(p), Some(v)) => {
            export_map(p, &v)?;
        }
        (Some(_), None) => return Err(usage("--var needs --mc-samples of at least 1")),
        _ => {}
    }
    println!("wrote {} ({}x{})", a.out.display(), mean.height(), mean.width());
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> anyhow::Result<()> {
    let gt = GtConfig {
        dva: a.dva,
        horizontal_fov_degrees: a.fov,
        frames_back: a.frames_back,
        gamma: a.gamma,
        ..GtConfig::default()
    };
    gt.validate()?;
    if !(a.clahe_clip > 0.0) || a.clahe_tiles == 0 {
        return Err(usage("--clahe-clip must be positive and --clahe-tiles at least 1"));
    }
    let manifest = load_dataset(&a.data)?;
    println!("sigma_pixels={:.4}", sigma_pixels(&gt, manifest.width));
    let cfg = PreprocessConfig { clahe_clip: a.clahe_clip, clahe_tiles: a.clahe_tiles, gt };
    let summary = pipeline::preprocess(&manifest, &a.out, &cfg)?;
    println!(
        "{} frames written to {} ({} without fixations)",
        summary.frames,
        a.out.display(),
        summary.empty_frames
    );
    Ok(())
}
