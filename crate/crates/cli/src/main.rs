use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrdl_core::checkpoint::Checkpoint;
use mrdl_core::encoding::DescriptorBatch;
use mrdl_core::fusion::{parse_levels, Model, ModelConfig};
use mrdl_core::numkernel::Tensor4;
use mrdl_core::optim::{evaluate, gradcheck, image_accuracy, train_with_observer, TrainConfig};
use mrdl_core::texdata::{
    generate, load_dataset, load_descriptor_maps, save_dataset, split, write_descriptor_maps,
    DescriptorMaps, SyntheticSpec,
};
use mrdl_core::{Error, FormatError};

const EXIT_BAD_ARGS: u8 = 2;
const EXIT_DATA_FORMAT: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "mrdl", version, about = "Multi-resolution dictionary learning on texture patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-scale texture dataset.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Patch accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Fused feature vector of one image or descriptor-map file.
    Encode(EncodeArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// key=value generator config; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Patches per class.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; without it a group-aware split of --data is used.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Fraction of groups held out when --val is absent.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// key=value training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Active resolution levels, e.g. 1,2,3.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    dict_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    shared_dim: Option<usize>,
    /// Stage channel widths, e.g. 8,16,32.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    decay_epoch: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also report image accuracy after majority voting within each group.
    #[arg(long)]
    group_vote: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Descriptor-map file: either one level per active model level, or a
    /// single-channel image stored as one level of size² scalars.
    #[arg(long)]
    input: PathBuf,
    /// Output path. `.mrdl` writes a descriptor-map file, anything else one
    /// value per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "1,2,3")]
    levels: String,
    #[arg(long, default_value_t = 2)]
    dict_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value = "4,8,16")]
    widths: String,
    #[arg(long, default_value_t = 8)]
    image_size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    shared_dim: usize,
}

enum Failure {
    Core(Error),
    GradcheckFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_BAD_ARGS);
    }
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradcheckFailed) => ExitCode::from(EXIT_GRADCHECK),
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape(_) | Error::InvalidArgument(_) => EXIT_BAD_ARGS,
        Error::Format(FormatError::Config { .. }) => EXIT_BAD_ARGS,
        Error::Format(_) => EXIT_DATA_FORMAT,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_BAD_ARGS,
        Error::Io(_) => EXIT_DATA_FORMAT,
        Error::NonFinite(_) => 1,
    }
}

/// `MRDL_THREADS` caps the worker pool; unset or 0 leaves the default.
fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("MRDL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("MRDL_THREADS must be a non-negative integer, got {raw:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn cmd_generate(a: GenerateArgs) -> CmdResult {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::from_kv(&read_text(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if a.n == 0 {
        return Err(Error::InvalidArgument("--n must be >= 1".into()).into());
    }
    let data = generate(&spec, a.n)?;
    save_dataset(&a.out, &data)?;
    println!(
        "wrote {} patches ({} classes, {}px) to {}",
        data.len(),
        data.classes,
        data.image_size,
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_kv(&read_text(p)?)?;
    }
    let mut set = |key: &str, v: Option<String>| match v {
        Some(v) => cfg.set(key, &v),
        None => Ok(()),
    };
    set("levels", a.levels.clone())?;
    set("dict_size", a.dict_size.map(|v| v.to_string()))?;
    set("epochs", a.epochs.map(|v| v.to_string()))?;
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("momentum", a.momentum.map(|v| v.to_string()))?;
    set("batch_size", a.batch_size.map(|v| v.to_string()))?;
    set("shared_dim", a.shared_dim.map(|v| v.to_string()))?;
    set("widths", a.widths.clone())?;
    set("decay_epoch", a.decay_epoch.map(|v| v.to_string()))?;
    set("grad_clip", a.grad_clip.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = train_config(&a)?;
    let data = load_dataset(&a.data)?;
    let (train_set, val_set) = match &a.val {
        Some(v) => (data, load_dataset(v)?),
        None => split(&data, 1.0 - a.val_fraction, cfg.seed)?,
    };
    let classes = train_set.classes.max(val_set.classes);
    let mc = cfg.model_config(train_set.image_size, classes)?;
    let model = Model::new(mc, cfg.seed)?;
    let quiet = a.quiet;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let outcome = train_with_observer(model, &train_set, &val_set, &cfg, |ev| {
        if !quiet && ev.step % steps_per_epoch == 0 {
            eprintln!("epoch {} batch loss {:.4}", ev.epoch, ev.batch_loss);
        }
    })?;
    let m = &outcome.metrics;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    fs::write(&metrics_path, m.to_csv()).map_err(Error::from)?;
    Checkpoint::new(cfg, &outcome.model, outcome.rng.clone()).save(&a.out)?;
    let last = m.epochs() - 1;
    println!(
        "final loss {:.6} val_acc {:.4} omega {:?}",
        m.loss[last], m.val_acc[last], m.omega[last]
    );
    println!("checkpoint {} metrics {}", a.out.display(), metrics_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_dataset(&a.data)?;
    let ev = evaluate(&model, &data)?;
    println!("patch_accuracy {:.6}", ev.patch_accuracy);
    if a.group_vote {
        let acc = image_accuracy(&data, &ev.predictions)?;
        println!("image_accuracy {acc:.6}");
    }
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let maps = load_descriptor_maps(&a.input)?;
    let fused = encode_maps(&model, &maps)?;
    if a.out.extension().is_some_and(|e| e == "mrdl") {
        let out = DescriptorMaps {
            levels: vec![DescriptorBatch::from_rows(1, fused.len(), fused)?],
            label: maps.label,
        };
        write_descriptor_maps(&a.out, &out)?;
    } else {
        let text: String = fused.iter().map(|v| format!("{v}\n")).collect();
        fs::write(&a.out, text).map_err(Error::from)?;
    }
    Ok(())
}

/// Per-level descriptors when the file matches the model's active levels,
/// otherwise a single-channel square image.
fn encode_maps(model: &Model, maps: &DescriptorMaps) -> Result<Vec<f64>, Error> {
    let cfg = &model.config;
    let matches_levels = maps.levels.len() == cfg.levels.len()
        && maps
            .levels
            .iter()
            .zip(&cfg.levels)
            .all(|(b, &l)| b.d() == cfg.level_dim(l));
    if matches_levels {
        return Ok(model.forward_descriptors(&maps.levels)?.0.fused);
    }
    let side = cfg.image_size;
    let is_image = maps.levels.len() == 1
        && maps.levels[0].d() == cfg.in_channels
        && maps.levels[0].n() == side * side;
    if !is_image {
        let shapes: Vec<String> = maps
            .levels
            .iter()
            .map(|b| format!("{}x{}", b.n(), b.d()))
            .collect();
        return Err(FormatError::InvalidHeader(format!(
            "input levels [{}] match neither the model's descriptor levels nor a {side}x{side} image",
            shapes.join(", ")
        ))
        .into());
    }
    let pixels = maps.levels[0].descriptors().data().to_vec();
    let image = Tensor4::from_vec([1, 1, side, side], pixels)?;
    Ok(model.forward(&image)?.0.fused)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let widths: Vec<usize> = a
        .widths
        .split(',')
        .map(|w| w.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad --widths {:?}", a.widths)))?;
    let widths: [usize; 3] = widths
        .try_into()
        .map_err(|_| Error::InvalidArgument("--widths needs three values".into()))?;
    if !(a.tol > 0.0) {
        return Err(Error::InvalidArgument("--tol must be > 0".into()).into());
    }
    let cfg = ModelConfig {
        image_size: a.image_size,
        widths,
        levels: parse_levels(&a.levels)?,
        dict_size: a.dict_size,
        shared_dim: a.shared_dim,
        classes: a.classes,
        ..ModelConfig::default()
    };
    let report = gradcheck(&cfg, a.seed, a.tol)?;
    print!("{report}");
    if report.all_passed() {
        println!("gradcheck passed (tol {:e}, worst {:.3e})", a.tol, report.worst());
        Ok(())
    } else {
        println!("gradcheck FAILED in {} group(s)", report.failures().len());
        Err(Failure::GradcheckFailed)
    }
}
