//! `mdcpc`: synthesise data, pretrain, fine-tune, sweep, plot and run the
//! leak checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod plot;
mod settings;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mdcpc::autoregressor::{Directional, MaskPattern, MultiFusion};
use mdcpc::cpc::MaskKind;
use mdcpc::data::{export_png_dir, generate_synthetic, import_png_dir, load_pcam, DatasetStore, Split, SyntheticSpec};
use mdcpc::encoder::EncoderFamily;
use mdcpc::leakcheck::{run_leakcheck, LeakCheckConfig};
use mdcpc::training::{
    evaluate, finetune_classifier_with, pretrain_cpc_observed, run_sweep_observed, Checkpoint, ClassifierConfig,
    ClassifierInput, EpochReport, FinetuneInit, ModelConfig, SweepConfig, SweepResult, TrainConfig, Variant,
};

use manifest::RunManifest;
use settings::{pick, FileConfig};

pub const RUN_ROOT_ENV: &str = "MDCPC_RUN_ROOT";
const SWEEP_SIZES: [usize; 9] = [10, 32, 100, 316, 1000, 3162, 10000, 31624, 100000];

/// Bad flags or inputs the user can fix; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "mdcpc", version, about = "Contrastive predictive coding on image patch grids")]
struct Cli {
    /// Directory for run outputs and the manifest log [env: MDCPC_RUN_ROOT, default: runs]
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
    /// TOML file with defaults for the training commands
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-class synthetic texture dataset as PNGs plus manifest.csv
    Synth(SynthArgs),
    /// Pretrain encoder, autoregressor and prediction head on InfoNCE
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier from random init or a pretrained checkpoint
    Finetune(FinetuneArgs),
    /// Accuracy of a fine-tuned checkpoint on one split
    Evaluate(EvaluateArgs),
    /// Fine-tune and test every (variant, subset size, seed) cell
    Sweep(SweepArgs),
    /// Render loss and accuracy curves as SVG
    Plot(PlotArgs),
    /// Check that context and predictions never see their targets
    Leakcheck(LeakArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory written by `synth` (PNG files plus manifest.csv)
    #[arg(long, conflicts_with = "pcam")]
    data: Option<PathBuf>,
    /// Directory holding the PCam HDF5 files
    #[arg(long)]
    pcam: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Images per class
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory [default: <run-root>/synth-n<N>-s<SIZE>-seed<SEED>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into an existing non-empty directory
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    TopDown,
    Infill,
}

impl From<MaskArg> for MaskKind {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::TopDown => MaskKind::TopDown,
            MaskArg::Infill => MaskKind::Infill,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionalArg {
    Single,
    Multi,
}

impl From<DirectionalArg> for Directional {
    fn from(d: DirectionalArg) -> Self {
        match d {
            DirectionalArg::Single => Directional::Single,
            DirectionalArg::Multi => Directional::Multi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// Full-scale model for 96-pixel images, the toy model otherwise
    Auto,
    /// ResNeXt-101 on 24-pixel patches, stride 12, D = 128
    Full,
    /// Three-layer CNN on 8-pixel patches, stride 4, D = 16
    Desk,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    model: Option<PresetArg>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Masked blocks in the context network [default: 6]
    #[arg(long)]
    ar_blocks: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Latent mask [default: infill]
    #[arg(long, value_enum)]
    mask: Option<MaskArg>,
    /// Context network [default: multi]
    #[arg(long, value_enum)]
    directional: Option<DirectionalArg>,
    /// Negatives per target [default: 16]
    #[arg(long)]
    negatives: Option<usize>,
    /// Learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 5]
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: <run-root>/pretrain-<variant>-seed<SEED>]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Image,
    Patches,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// `random` or the path of a pretraining checkpoint
    #[arg(long, default_value = "random")]
    init: String,
    /// Labelled training examples, stratified by class [default: all]
    #[arg(long)]
    subset: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 64]
    #[arg(long)]
    batch: Option<usize>,
    /// Epochs without validation-accuracy improvement before stopping [default: 5]
    #[arg(long)]
    patience: Option<usize>,
    /// What the encoder sees [default: image]
    #[arg(long, value_enum)]
    input: Option<InputArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated variants [default: all five]
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Option<Vec<Variant>>,
    /// Comma-separated subset sizes [default: 10,32,100,316,1000,3162,10000,31624,100000]
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Comma-separated fine-tuning seeds
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Directory with one `<variant>.ckpt` per pretrained variant
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Explicit `VARIANT=PATH` pretrained checkpoints
    #[arg(long = "pretrained")]
    pretrained: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    input: Option<InputArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// `LABEL=PATH` metrics CSVs from pretraining runs
    #[arg(long = "loss")]
    losses: Vec<String>,
    /// Sweep CSV with per-seed test accuracies
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Standard,
    AllA,
    AllB,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Streams,
    Chained,
}

#[derive(Args)]
struct LeakArgs {
    #[arg(long, value_enum, default_value = "infill")]
    mask: MaskArg,
    #[arg(long, value_enum, default_value = "multi")]
    directional: DirectionalArg,
    #[arg(long, value_enum, default_value = "standard")]
    mask_pattern: PatternArg,
    #[arg(long, value_enum, default_value = "streams")]
    fusion: FusionArg,
    #[arg(long, default_value_t = 6)]
    blocks: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    grid: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: mdcpc::Error| e.to_string())
}

/// Context shared by every command.
struct Ctx {
    run_root: PathBuf,
    file: FileConfig,
    manifest: RunManifest,
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let run_root = cli
        .run_root
        .clone()
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Evaluate(_) => "evaluate",
        Command::Sweep(_) => "sweep",
        Command::Plot(_) => "plot",
        Command::Leakcheck(_) => "leakcheck",
    };
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => return report(&e),
    };
    let mut ctx = Ctx {
        run_root,
        file,
        manifest: RunManifest::new(name, args[1..].to_vec()),
    };
    if let Some(c) = &cli.config {
        ctx.manifest.inputs.push(c.clone());
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&mut ctx, a),
        Command::Pretrain(a) => cmd_pretrain(&mut ctx, a),
        Command::Finetune(a) => cmd_finetune(&mut ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&mut ctx, a),
        Command::Sweep(a) => cmd_sweep(&mut ctx, a),
        Command::Plot(a) => cmd_plot(&mut ctx, a),
        Command::Leakcheck(a) => cmd_leakcheck(&mut ctx, a),
    };
    let status = match &result {
        Ok(0) => "ok".to_string(),
        Ok(c) => format!("exit {c}"),
        Err(e) => format!("error: {e:#}"),
    };
    let root = ctx.run_root.clone();
    if let Err(e) = ctx.manifest.finish(&root, &status) {
        eprintln!("warning: could not write run manifest: {e:#}");
    }
    match result {
        Ok(c) => ExitCode::from(c),
        Err(e) => report(&e),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<mdcpc::Error>() {
            return if err.is_numeric() {
                3
            } else if err.is_data_error() {
                2
            } else {
                1
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn report(e: &anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    ExitCode::from(exit_code(e))
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return Err(usage(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load_data(ctx: &mut Ctx, data: &DataArgs) -> Result<DatasetStore> {
    let store = match (&data.data, &data.pcam) {
        (Some(d), None) => {
            ctx.manifest.inputs.push(d.clone());
            import_png_dir(d).with_context(|| format!("loading dataset {}", d.display()))?
        }
        (None, Some(p)) => {
            ctx.manifest.inputs.push(p.clone());
            load_pcam(p).with_context(|| format!("loading PCam from {}", p.display()))?
        }
        _ => return Err(usage("one of --data or --pcam is required")),
    };
    eprintln!(
        "dataset: {} train / {} valid / {} test images of {} px",
        store.train.len(),
        store.valid.len(),
        store.test.len(),
        store.meta.image_size
    );
    Ok(store)
}

fn model_config(file: &FileConfig, args: &ModelArgs, image_size: usize) -> Result<ModelConfig> {
    let preset = match (args.model, file.model.preset.as_deref()) {
        (Some(p), _) => p,
        (None, None) => PresetArg::Auto,
        (None, Some("auto")) => PresetArg::Auto,
        (None, Some("full")) => PresetArg::Full,
        (None, Some("desk")) => PresetArg::Desk,
        (None, Some(other)) => return Err(usage(format!("unknown model preset `{other}`"))),
    };
    let mut m = match preset {
        PresetArg::Full => ModelConfig::full_scale(),
        PresetArg::Desk => ModelConfig::desk(),
        PresetArg::Auto if image_size == mdcpc::data::PCAM_IMAGE_SIZE => ModelConfig::full_scale(),
        PresetArg::Auto => ModelConfig::desk(),
    };
    m.encoder.latent_dim = pick(args.latent_dim, file.model.latent_dim, m.encoder.latent_dim);
    m.encoder.patch_size = pick(args.patch, file.model.patch, m.encoder.patch_size);
    m.stride = pick(args.stride, file.model.stride, m.stride);
    m.ar_blocks = pick(args.ar_blocks, file.model.ar_blocks, m.ar_blocks);
    m.context_rows = file.model.context_rows.unwrap_or(m.context_rows);
    if let Some(w) = file.model.toy_width {
        m.encoder.toy_width = w;
    }
    if m.encoder.family == EncoderFamily::Resnext101 {
        eprintln!("model: ResNeXt-101 encoder (slow on CPU; use --model desk for quick runs)");
    }
    Ok(m)
}

fn parse_enum<T: ValueEnum>(what: &str, s: Option<&str>) -> Result<Option<T>> {
    s.map(|s| T::from_str(s, true).map_err(|_| usage(format!("unknown {what} `{s}` in config file"))))
        .transpose()
}

fn log_epoch(r: &EpochReport) {
    let mut parts = vec![format!("epoch {:>3}", r.epoch)];
    if let Some(v) = r.train_loss {
        parts.push(format!("train {v:.4}"));
    }
    if let Some(v) = r.valid_loss {
        parts.push(format!("valid {v:.4}"));
    }
    if let Some(v) = r.valid_accuracy {
        parts.push(format!("valid acc {v:.4}"));
    }
    if r.improved {
        parts.push("*".into());
    }
    eprintln!("{}", parts.join("  "));
}

fn cmd_synth(ctx: &mut Ctx, a: SynthArgs) -> Result<u8> {
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| ctx.run_root.join(format!("synth-n{}-s{}-seed{}", a.n, a.size, a.seed)));
    prepare_dir(&out, a.force)?;
    let spec = SyntheticSpec::new(a.n, a.size, a.seed);
    ctx.manifest.seed = Some(a.seed);
    ctx.manifest.config = json!({"n_per_class": a.n, "image_size": a.size, "seed": a.seed});
    let store = generate_synthetic(&spec)?;
    export_png_dir(&store, &out)?;
    ctx.manifest.outputs.push(out.clone());
    println!("wrote {} images to {}", store.len(), out.display());
    Ok(0)
}

fn variant_dir_name(directional: Directional, mask: MaskKind) -> &'static str {
    Variant::from_pretraining(directional, mask).as_str()
}

fn cmd_pretrain(ctx: &mut Ctx, a: PretrainArgs) -> Result<u8> {
    let store = load_data(ctx, &a.data)?;
    let f = &ctx.file.pretrain;
    let d = TrainConfig::pretrain();
    let mask: Option<MaskArg> = parse_enum("mask", f.mask.as_deref())?;
    let directional: Option<DirectionalArg> = parse_enum("directional", f.directional.as_deref())?;
    let cfg = TrainConfig {
        mask_kind: a.mask.or(mask).map(MaskKind::from).unwrap_or(d.mask_kind),
        directional: a.directional.or(directional).map(Directional::from).unwrap_or(d.directional),
        negatives: pick(a.negatives, f.negatives, d.negatives),
        learning_rate: pick(a.lr, f.lr, d.learning_rate),
        epochs: pick(a.epochs, f.epochs, d.epochs),
        batch_size: pick(a.batch, f.batch, d.batch_size),
        patience: pick(a.patience, f.patience, d.patience),
        seed: pick(a.seed, ctx.file.seed, d.seed),
        ..d
    };
    let model = model_config(&ctx.file, &a.model, store.meta.image_size)?;
    let out = a.out.clone().unwrap_or_else(|| {
        ctx.run_root
            .join(format!("pretrain-{}-seed{}", variant_dir_name(cfg.directional, cfg.mask_kind), cfg.seed))
    });
    prepare_dir(&out, a.force)?;
    ctx.manifest.seed = Some(cfg.seed);
    ctx.manifest.config = json!({"train": cfg, "model": model});
    let ckpt_path = out.join("checkpoint.ckpt");
    let metrics = out.join("metrics.csv");
    ctx.manifest.outputs.extend([ckpt_path.clone(), metrics.clone()]);
    let _ = std::fs::remove_file(&metrics);
    let ckpt = match pretrain_cpc_observed(&store, &cfg, &model, &mut log_epoch) {
        Ok(c) => c,
        Err(mdcpc::Error::Diverged { epoch, reason, last_good }) => {
            let p = out.join("last_good.ckpt");
            last_good.save(&p)?;
            last_good.history.append_csv(&metrics)?;
            ctx.manifest.outputs.push(p.clone());
            return Err(mdcpc::Error::Diverged { epoch, reason, last_good }).with_context(|| {
                format!("last good parameters saved to {}", p.display())
            });
        }
        Err(e) => return Err(e.into()),
    };
    ckpt.save(&ckpt_path)?;
    ckpt.history.append_csv(&metrics)?;
    println!(
        "best validation InfoNCE {:.4} at epoch {}; checkpoint {}",
        ckpt.history
            .series(Split::Valid, "info_nce")
            .iter()
            .find(|(e, _)| *e == ckpt.best_epoch)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN),
        ckpt.best_epoch,
        ckpt_path.display()
    );
    Ok(0)
}

fn finetune_train_config(ctx: &Ctx, epochs: Option<usize>, lr: Option<f64>, batch: Option<usize>, patience: Option<usize>, seed: Option<u64>) -> TrainConfig {
    let f = &ctx.file.finetune;
    let d = TrainConfig::finetune();
    TrainConfig {
        epochs: pick(epochs, f.epochs, d.epochs),
        learning_rate: pick(lr, f.lr, d.learning_rate),
        batch_size: pick(batch, f.batch, d.batch_size),
        patience: pick(patience, f.patience, d.patience),
        seed: pick(seed, ctx.file.seed, d.seed),
        ..d
    }
}

fn classifier_input(ctx: &Ctx, flag: Option<InputArg>) -> Result<ClassifierInput> {
    let file: Option<InputArg> = parse_enum("classifier input", ctx.file.finetune.input.as_deref())?;
    Ok(match flag.or(file) {
        Some(InputArg::Patches) => ClassifierInput::Patches,
        _ => ClassifierInput::Image,
    })
}

/// Classifier shape: taken from the pretrained checkpoint when there is one.
fn classifier_config(ctx: &Ctx, model: &ModelArgs, input: ClassifierInput, pretrained: Option<&Checkpoint>, image_size: usize) -> Result<ClassifierConfig> {
    let mut m = model_config(&ctx.file, model, image_size)?;
    if let Some(ck) = pretrained {
        let Some(cpc) = &ck.cpc else {
            return Err(usage("--init checkpoint is not a pretraining checkpoint"));
        };
        m.encoder = cpc.encoder.clone();
        m.stride = cpc.stride;
    }
    Ok(ClassifierConfig {
        input,
        ..ClassifierConfig::from_model(&m)
    })
}

fn cmd_finetune(ctx: &mut Ctx, a: FinetuneArgs) -> Result<u8> {
    let store = load_data(ctx, &a.data)?;
    let cfg = finetune_train_config(ctx, a.epochs, a.lr, a.batch, a.patience, a.seed);
    let subset = a.subset.or(ctx.file.finetune.subset);
    let pretrained = match a.init.as_str() {
        "random" => None,
        path => {
            ctx.manifest.inputs.push(PathBuf::from(path));
            Some(Checkpoint::load(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?)
        }
    };
    let input = classifier_input(ctx, a.input)?;
    let classifier = classifier_config(ctx, &a.model, input, pretrained.as_ref(), store.meta.image_size)?;
    let init = match &pretrained {
        Some(c) => FinetuneInit::Pretrained(c),
        None => FinetuneInit::Random,
    };
    let label = if pretrained.is_some() { "pretrained" } else { "random" };
    let out = a.out.clone().unwrap_or_else(|| {
        ctx.run_root.join(format!(
            "finetune-{label}-n{}-seed{}",
            subset.map_or("all".to_string(), |n| n.to_string()),
            cfg.seed
        ))
    });
    prepare_dir(&out, a.force)?;
    ctx.manifest.seed = Some(cfg.seed);
    ctx.manifest.config = json!({"train": cfg, "subset": subset, "init": a.init, "classifier": classifier});
    let ckpt_path = out.join("checkpoint.ckpt");
    let metrics = out.join("metrics.csv");
    ctx.manifest.outputs.extend([ckpt_path.clone(), metrics.clone()]);
    let _ = std::fs::remove_file(&metrics);
    let ckpt = finetune_classifier_with(&store, subset, init, &cfg, &classifier, &mut log_epoch)?;
    ckpt.save(&ckpt_path)?;
    ckpt.history.append_csv(&metrics)?;
    match ckpt.history.last(Split::Test, "accuracy") {
        Some(acc) => println!("test accuracy {acc:.4} (best epoch {}); checkpoint {}", ckpt.best_epoch, ckpt_path.display()),
        None => println!("no test split; checkpoint {}", ckpt_path.display()),
    }
    Ok(0)
}

fn cmd_evaluate(ctx: &mut Ctx, a: EvaluateArgs) -> Result<u8> {
    let store = load_data(ctx, &a.data)?;
    ctx.manifest.inputs.push(a.checkpoint.clone());
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    ctx.manifest.config = json!({"split": split});
    let acc = evaluate(&ckpt, &store, split)?;
    println!("{} accuracy {acc:.4} over {} images", split.as_str(), store.split(split).len());
    Ok(0)
}

fn cmd_sweep(ctx: &mut Ctx, a: SweepArgs) -> Result<u8> {
    let store = load_data(ctx, &a.data)?;
    let variants = a.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let sizes = a.sizes.clone().unwrap_or_else(|| SWEEP_SIZES.to_vec());
    let mut paths: BTreeMap<Variant, PathBuf> = BTreeMap::new();
    if let Some(dir) = &a.checkpoints {
        for v in &variants {
            let p = dir.join(format!("{v}.ckpt"));
            if *v != Variant::None && p.exists() {
                paths.insert(*v, p);
            }
        }
    }
    for spec in &a.pretrained {
        let Some((v, p)) = spec.split_once('=') else {
            return Err(usage(format!("--pretrained expects VARIANT=PATH, got `{spec}`")));
        };
        paths.insert(v.parse().map_err(|e: mdcpc::Error| usage(e.to_string()))?, PathBuf::from(p));
    }
    let mut pretrained = BTreeMap::new();
    for (v, p) in &paths {
        ctx.manifest.inputs.push(p.clone());
        pretrained.insert(*v, Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?);
    }
    let input = classifier_input(ctx, a.input)?;
    let classifier = classifier_config(ctx, &a.model, input, pretrained.values().next(), store.meta.image_size)?;
    let finetune = finetune_train_config(ctx, a.epochs, a.lr, a.batch, a.patience, None);
    let out = a.out.clone().unwrap_or_else(|| ctx.run_root.join("sweep"));
    prepare_dir(&out, a.force)?;
    ctx.manifest.config = json!({
        "variants": variants, "sizes": sizes, "seeds": a.seeds, "finetune": finetune, "classifier": classifier,
        "pretrained": paths,
    });
    let rows = out.join("sweep.csv");
    let agg = out.join("sweep_aggregate.csv");
    ctx.manifest.outputs.extend([rows.clone(), agg.clone()]);
    let config = SweepConfig {
        finetune,
        classifier,
        pretrained,
    };
    let result = run_sweep_observed(&store, &variants, &sizes, &a.seeds, &config, &mut |r| {
        eprintln!("{:<16} n={:<6} seed={:<3} test accuracy {:.4}", r.variant.as_str(), r.subset_size, r.seed, r.test_accuracy);
    })?;
    result.write_csv(&rows)?;
    result.write_aggregate_csv(&agg)?;
    for s in result.aggregate() {
        println!("{:<16} n={:<6} mean {:.4} (std {:.4}, {} runs)", s.variant.as_str(), s.subset_size, s.mean, s.std, s.runs);
    }
    Ok(0)
}

fn cmd_plot(ctx: &mut Ctx, a: PlotArgs) -> Result<u8> {
    if a.losses.is_empty() && a.sweep.is_none() {
        return Err(usage("nothing to plot: pass --loss LABEL=PATH and/or --sweep PATH"));
    }
    let out = a.out.clone().unwrap_or_else(|| ctx.run_root.join("plots"));
    let mut runs = Vec::new();
    for spec in &a.losses {
        let Some((label, path)) = spec.split_once('=') else {
            return Err(usage(format!("--loss expects LABEL=PATH, got `{spec}`")));
        };
        ctx.manifest.inputs.push(PathBuf::from(path));
        runs.push((label.to_string(), PathBuf::from(path)));
    }
    // Read everything before touching the output directory.
    let refs: Vec<(String, &Path)> = runs.iter().map(|(l, p)| (l.clone(), p.as_path())).collect();
    let losses = if refs.is_empty() { None } else { Some(plot::loss_curves(&refs)?) };
    let accuracy = match &a.sweep {
        Some(p) => {
            ctx.manifest.inputs.push(p.clone());
            let sweep = SweepResult::read_csv(p).with_context(|| format!("reading sweep CSV {}", p.display()))?;
            Some(plot::accuracy_curves(&sweep).map_err(|e| usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    if losses.as_ref().is_some_and(|l| l.values().all(Vec::is_empty)) {
        bail!("no loss data");
    }
    std::fs::create_dir_all(&out)?;
    if let Some(curves) = losses {
        let svg = out.join("validation_loss.svg");
        let csv = out.join("validation_loss.csv");
        plot::plot_losses(&svg, &curves)?;
        plot::write_points(&csv, "epoch", &curves)?;
        ctx.manifest.outputs.extend([svg.clone(), csv]);
        println!("wrote {}", svg.display());
    }
    if let Some(curves) = accuracy {
        let svg = out.join("accuracy.svg");
        let csv = out.join("accuracy.csv");
        plot::plot_accuracy(&svg, &curves)?;
        plot::write_points(&csv, "subset_size", &curves)?;
        ctx.manifest.outputs.extend([svg.clone(), csv]);
        println!("wrote {}", svg.display());
    }
    Ok(0)
}

fn cmd_leakcheck(ctx: &mut Ctx, a: LeakArgs) -> Result<u8> {
    let cfg = LeakCheckConfig {
        mask: a.mask.into(),
        directional: a.directional.into(),
        pattern: match a.mask_pattern {
            PatternArg::Standard => MaskPattern::Standard,
            PatternArg::AllA => MaskPattern::AllA,
            PatternArg::AllB => MaskPattern::AllB,
        },
        fusion: match a.fusion {
            FusionArg::Streams => MultiFusion::Streams,
            FusionArg::Chained => MultiFusion::Chained,
        },
        blocks: a.blocks,
        trials: a.trials,
        grid: a.grid,
        dim: a.dim,
        seed: a.seed,
    };
    ctx.manifest.seed = Some(a.seed);
    ctx.manifest.config = serde_json::to_value(&cfg)?;
    let report = run_leakcheck(&cfg)?;
    for s in &report.suites {
        let tag = if s.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<28} {} trials, max delta {:.3e}; {}", s.name, s.trials, s.max_delta, s.detail);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("{verdict} (max delta {:.3e})", report.max_delta());
    Ok(if report.passed() { 0 } else { 3 })
}
