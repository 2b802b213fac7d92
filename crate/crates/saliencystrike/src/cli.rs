//! Command-line front end: dataset generation, victim training, attacks,
//! evaluation grids, and self-checks.
//!
//! Every subcommand accepts `--config <file>` holding `key = value` lines
//! (keys are the long flag names; `-` and `_` are interchangeable; `#`
//! starts a comment). Command-line flags override the file, which
//! overrides built-in defaults. Boolean flags on the command line can
//! only switch a setting on; use the config file to pin one off.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 file errors,
//! 4 numeric failures, 5 failed self-checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attack::{random_perturbation_baseline, run_attack, AttackConfig};
use crate::data::{
    build_dataset_with_classes, load_dataset, save_dataset, save_xyz, DataConfig, Dataset,
    ShapeKind,
};
use crate::defense::{DefenseConfig, DefenseKind};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_variants, attack_success_rate, emit_report, paper_reference_rows, sweep_variants,
    EvalReport, GridVariant, Provenance, ReportFormat, VariantSpec,
};
use crate::loss::{d_chamfer, d_hausdorff, d_l2, DistanceKind, LossBreakdown};
use crate::seeds;
use crate::victim::{
    build_model, load_checkpoint, predict_probs, save_checkpoint, train, Arch, TrainConfig,
    VictimModel,
};

mod selfcheck;

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 2;
const EXIT_FILE: i32 = 3;
const EXIT_NUMERIC: i32 = 4;
const EXIT_CHECK: i32 = 5;

/// Prints a status line, swallowing stdout write failures. A consumer like
/// `head` closing the pipe early must not turn a finished run into a panic.
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Capacity(_) | Error::Shape { .. } | Error::Index { .. } => {
            EXIT_CONFIG
        }
        Error::Data(_)
        | Error::ParseLine { .. }
        | Error::ParseByte { .. }
        | Error::Version { .. }
        | Error::Io { .. } => EXIT_FILE,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}

#[derive(Parser)]
#[command(
    name = "saliencystrike",
    version,
    about = "Salient-point adversarial attacks on small point-cloud classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset (train/ + test/ + manifest.csv).
    GenData(GenDataArgs),
    /// Train a victim model and write a checkpoint plus an accuracy log.
    Train(TrainArgs),
    /// Attack the test split and write adversarial clouds + result JSON.
    Attack(AttackArgs),
    /// Run an evaluation grid and emit CSV/JSON reports.
    Eval(EvalArgs),
    /// Run built-in gradient, distance, and withdrawal self-checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Key=value file supplying any of this command's flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the dataset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated class names (default: all eight shapes).
    #[arg(long)]
    classes: Option<String>,
    /// Training clouds per class.
    #[arg(long = "per-class-train")]
    per_class_train: Option<usize>,
    /// Test clouds per class.
    #[arg(long = "per-class-test")]
    per_class_test: Option<usize>,
    /// Points per cloud.
    #[arg(long)]
    points: Option<usize>,
    /// Gaussian surface-noise standard deviation.
    #[arg(long = "noise-sd")]
    noise_sd: Option<f64>,
    /// Base seed for the whole dataset.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Key=value file supplying any of this command's flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint, log, and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Victim architecture: pointnet-mini or dgcnn-mini.
    #[arg(long)]
    arch: Option<String>,
    /// Comma-separated per-point layer widths (default 32,64).
    #[arg(long)]
    widths: Option<String>,
    /// Neighbourhood size for dgcnn-mini's edge convolution.
    #[arg(long)]
    knn: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for both initialization and batch shuffling.
    #[arg(long)]
    seed: Option<u64>,
}

/// Attack-recipe flags shared by `attack` and `eval`.
#[derive(Args)]
struct AttackFlags {
    /// Perceptibility distance: l2, chamfer, or hausdorff.
    #[arg(long)]
    distance: Option<String>,
    /// Perturbation budget.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the distance penalty.
    #[arg(long)]
    kappa1: Option<f64>,
    /// Weight of the wrong-class score term.
    #[arg(long)]
    kappa2: Option<f64>,
    /// Weight of the consistency term.
    #[arg(long)]
    kappa3: Option<f64>,
    /// Consistency hinge margin.
    #[arg(long)]
    mu: Option<f64>,
    /// Saliency vertex count.
    #[arg(long)]
    m: Option<usize>,
    /// Neighbourhood size grouped around each vertex.
    #[arg(long)]
    n: Option<usize>,
    /// Iteration budget.
    #[arg(long)]
    iters: Option<usize>,
    /// Warm-up fraction of the iteration budget.
    #[arg(long)]
    warmup: Option<f64>,
    /// Withdrawal activation slack (fires when distance > lambda - h).
    #[arg(long)]
    h: Option<f64>,
    /// Withdrawal filter mode: absolute or percentile.
    #[arg(long = "w-mode")]
    w_mode: Option<String>,
    /// Withdrawal filter threshold (meaning set by --w-mode).
    #[arg(long)]
    w: Option<f64>,
    /// Scale on the withdrawal step.
    #[arg(long)]
    gamma: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Adam first-moment decay.
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    beta2: Option<f64>,
    /// Base seed recorded in the manifest and used for derived draws.
    #[arg(long)]
    seed: Option<u64>,
    /// Perturb the whole cloud instead of a salient subset.
    #[arg(long, conflicts_with_all = ["m", "n"])]
    global: bool,
    /// Disable the wrong-class score term.
    #[arg(long = "no-score")]
    no_score: bool,
    /// Disable the consistency term.
    #[arg(long = "no-cons")]
    no_cons: bool,
    /// Disable budget withdrawal.
    #[arg(long = "no-pwa")]
    no_pwa: bool,
    /// Always run the full iteration budget.
    #[arg(long = "no-early-stop")]
    no_early_stop: bool,
    /// Let the score term chase the floating wrong-class argmax after the
    /// freeze.
    #[arg(long = "float-score")]
    float_score: bool,
}

#[derive(Args)]
struct AttackArgs {
    /// Key=value file supplying any of this command's flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Victim checkpoint to attack.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (the test split is attacked).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for adversarial clouds and result JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Preset: l3a, global-base, rp, or group1..group9.
    #[arg(long)]
    variant: Option<String>,
    /// Attack only the first K test examples.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    flags: AttackFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Key=value file supplying any of this command's flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Victim checkpoint (repeat for several victims).
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Dataset directory (the test split is evaluated).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which grid to run: main, ablation, sweep, or fig1.
    #[arg(long)]
    table: Option<String>,
    /// Defense to add alongside the always-present `none` row (repeatable:
    /// srs, sor).
    #[arg(long = "defense")]
    defenses: Vec<String>,
    /// Fraction of points dropped by srs.
    #[arg(long = "srs-ratio")]
    srs_ratio: Option<f64>,
    /// Neighbour count used by sor.
    #[arg(long = "sor-k")]
    sor_k: Option<usize>,
    /// Deviation multiplier used by sor.
    #[arg(long = "sor-alpha")]
    sor_alpha: Option<f64>,
    /// Evaluate only the first K test examples.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    flags: AttackFlags,
}

#[derive(Args)]
struct CheckArgs {
    /// Print the summary as JSON instead of plain lines.
    #[arg(long)]
    json: bool,
    /// Flip one analytic gradient's sign to prove the harness notices
    /// (the run is expected to fail).
    #[arg(long = "negative-control")]
    negative_control: bool,
}

/// Entry point behind `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Check(args) => return cmd_check(args),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

// ---------------------------------------------------------------------------
// Config files and flag resolution

/// Parsed `key = value` config file with consume-and-verify semantics:
/// every key must be claimedby the command, so typos fail loudly.
struct FileCfg {
    map: BTreeMap<String, String>,
    origin: String,
}

fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl FileCfg {
    fn load(path: Option<&Path>) -> Result<FileCfg> {
        let Some(path) = path else {
            return Ok(FileCfg {
                map: BTreeMap::new(),
                origin: String::new(),
            });
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ParseLine {
                    what: path.display().to_string(),
                    line: idx + 1,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            // Later lines win, like flags given twice.
            map.insert(normalize_key(key), value.trim().to_string());
        }
        Ok(FileCfg {
            map,
            origin: path.display().to_string(),
        })
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(&normalize_key(key))
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(text) => text.parse().map(Some).map_err(|_| {
                Error::Config(format!(
                    "{}: key {key:?} has unparsable value {text:?}",
                    self.origin
                ))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!(
                "{}: unknown config key {key:?}",
                self.origin
            )));
        }
        Ok(())
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required flag --{flag}")))
}

/// Command-line value beats file value beats default.
fn pick<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}

/// Boolean flags can only be switched on from the command line.
fn pick_flag(cli: bool, file: Option<bool>) -> bool {
    cli || file.unwrap_or(false)
}

fn parse_comma_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("invalid {what} entry {s:?}")))
        })
        .collect()
}

/// Applies a named preset onto `cfg`. Returns true when the preset is the
/// random-perturbation baseline (which bypasses the optimizer entirely).
fn apply_variant(cfg: &mut AttackConfig, name: &str) -> Result<bool> {
    let normalized = normalize_key(name);
    if normalized == "rp" {
        return Ok(true);
    }
    if let Some(idx) = normalized
        .strip_prefix("group")
        .and_then(|n| n.parse::<usize>().ok())
    {
        if (1..=9).contains(&idx) {
            let cell = ablation_variants(cfg).swap_remove(idx - 1);
            let VariantSpec::Attack { config } = cell.spec else {
                unreachable!("ablation cells are attack configs");
            };
            *cfg = config;
            return Ok(false);
        }
    }
    match normalized.as_str() {
        "l3a" => {
            cfg.local = true;
            cfg.use_score = true;
            cfg.use_cons = true;
            cfg.use_pwa = true;
            Ok(false)
        }
        "global_base" => {
            cfg.local = false;
            cfg.use_score = false;
            cfg.use_cons = false;
            cfg.use_pwa = false;
            Ok(false)
        }
        other => Err(Error::Config(format!(
            "unknown variant {other:?}; expected l3a, global-base, rp, or group1..group9"
        ))),
    }
}

/// Folds preset, config file, and command-line flags (in ascending
/// precedence) into a ready attack config. Returns the config and whether
/// the random-perturbation baseline was selected.
fn resolve_attack_config(
    flags: &AttackFlags,
    variant: Option<&str>,
    file: &mut FileCfg,
) -> Result<(AttackConfig, bool)> {
    let mut cfg = AttackConfig::default();
    let file_variant = file.take_raw("variant");
    let variant = variant.map(str::to_string).or(file_variant);
    let mut noise_baseline = false;
    if let Some(name) = &variant {
        noise_baseline = apply_variant(&mut cfg, name)?;
    }
    let file_distance = file.take_raw("distance");
    if let Some(name) = flags.distance.clone().or(file_distance) {
        cfg.distance = DistanceKind::from_name(&name)?;
    }
    cfg.lambda = pick(flags.lambda, file.take("lambda")?, cfg.lambda);
    cfg.kappa1 = pick(flags.kappa1, file.take("kappa1")?, cfg.kappa1);
    cfg.kappa2 = pick(flags.kappa2, file.take("kappa2")?, cfg.kappa2);
    cfg.kappa3 = pick(flags.kappa3, file.take("kappa3")?, cfg.kappa3);
    cfg.mu = pick(flags.mu, file.take("mu")?, cfg.mu);
    cfg.m = pick(flags.m, file.take("m")?, cfg.m);
    cfg.n = pick(flags.n, file.take("n")?, cfg.n);
    cfg.iterations = pick(flags.iters, file.take("iters")?, cfg.iterations);
    cfg.warmup_fraction = pick(flags.warmup, file.take("warmup")?, cfg.warmup_fraction);
    cfg.h = pick(flags.h, file.take("h")?, cfg.h);
    let file_w_mode = file.take_raw("w_mode");
    if let Some(name) = flags.w_mode.clone().or(file_w_mode) {
        cfg.w_mode = crate::attack::WMode::from_name(&name)?;
    }
    cfg.w = pick(flags.w, file.take("w")?, cfg.w);
    cfg.gamma = pick(flags.gamma, file.take("gamma")?, cfg.gamma);
    cfg.lr = pick(flags.lr, file.take("lr")?, cfg.lr);
    cfg.beta1 = pick(flags.beta1, file.take("beta1")?, cfg.beta1);
    cfg.beta2 = pick(flags.beta2, file.take("beta2")?, cfg.beta2);
    cfg.seed = pick(flags.seed, file.take("seed")?, cfg.seed);
    if pick_flag(flags.global, file.take("global")?) {
        cfg.local = false;
    }
    if pick_flag(flags.no_score, file.take("no_score")?) {
        cfg.use_score = false;
    }
    if pick_flag(flags.no_cons, file.take("no_cons")?) {
        cfg.use_cons = false;
    }
    if pick_flag(flags.no_pwa, file.take("no_pwa")?) {
        cfg.use_pwa = false;
    }
    if pick_flag(flags.no_early_stop, file.take("no_early_stop")?) {
        cfg.early_stop = false;
    }
    if pick_flag(flags.float_score, file.take("float_score")?) {
        cfg.float_score = true;
    }
    if !noise_baseline {
        cfg.validate()?;
    }
    Ok((cfg, noise_baseline))
}

// ---------------------------------------------------------------------------
// Run manifests

#[derive(Serialize)]
struct RunManifest {
    command: String,
    toolkit_version: String,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    config: serde_json::Value,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn config_value<T: Serialize>(config: &T) -> Result<serde_json::Value> {
    serde_json::to_value(config)
        .map_err(|e| Error::Data(format!("manifest config serialization failed: {e}")))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join("run_manifest.json");
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

// ---------------------------------------------------------------------------
// gen-data

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let started = unix_ms();
    let mut file = FileCfg::load(args.config.as_deref())?;
    let out = require(
        args.out.or(file.take_raw("out").map(PathBuf::from)),
        "out",
    )?;
    let classes_text = args.classes.or_else(|| file.take_raw("classes"));
    let cfg = DataConfig {
        per_class_train: pick(args.per_class_train, file.take("per_class_train")?, 100),
        per_class_test: pick(args.per_class_test, file.take("per_class_test")?, 30),
        n_points: pick(args.points, file.take("points")?, 256),
        noise_sd: pick(args.noise_sd, file.take("noise_sd")?, 0.02),
        seed: pick(args.seed, file.take("seed")?, 7),
    };
    let force = pick_flag(args.force, file.take("force")?);
    file.finish()?;

    let classes: Vec<ShapeKind> = match &classes_text {
        None => ShapeKind::ALL.to_vec(),
        Some(text) => parse_comma_list::<String>(text, "class")?
            .iter()
            .map(|name| ShapeKind::from_name(name))
            .collect::<Result<_>>()?,
    };
    if out.exists() {
        let occupied = fs::read_dir(&out)
            .map_err(|e| Error::io(format!("reading {}", out.display()), e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    let dataset = build_dataset_with_classes(&cfg, &classes)?;
    ensure_out_dir(&out)?;
    save_dataset(&out, &dataset)?;
    emit!(
        "wrote {} train and {} test clouds ({} classes, {} points each) to {}",
        dataset.train.len(),
        dataset.test.len(),
        dataset.num_classes(),
        cfg.n_points,
        out.display()
    );
    write_manifest(
        &out,
        &RunManifest {
            command: "gen-data".into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            inputs: vec![],
            outputs: vec![path_str(&out)],
            config: config_value(&serde_json::json!({
                "data": {
                    "per_class_train": cfg.per_class_train,
                    "per_class_test": cfg.per_class_test,
                    "n_points": cfg.n_points,
                    "noise_sd": cfg.noise_sd,
                    "seed": cfg.seed,
                },
                "classes": dataset.class_names,
                "force": force,
            }))?,
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
        },
    )
}

// ---------------------------------------------------------------------------
// train

fn parse_arch(name: &str) -> Result<Arch> {
    Arch::from_name(&normalize_key(name))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = unix_ms();
    let mut file = FileCfg::load(args.config.as_deref())?;
    let data = require(
        args.data.or(file.take_raw("data").map(PathBuf::from)),
        "data",
    )?;
    let out = require(
        args.out.or(file.take_raw("out").map(PathBuf::from)),
        "out",
    )?;
    let arch = parse_arch(&pick(
        args.arch,
        file.take_raw("arch"),
        "pointnet_mini".into(),
    ))?;
    let widths_text = args.widths.or_else(|| file.take_raw("widths"));
    let knn = args.knn.or(file.take("knn")?);
    let cfg = TrainConfig {
        epochs: pick(args.epochs, file.take("epochs")?, 30),
        batch_size: pick(args.batch_size, file.take("batch_size")?, 16),
        lr: pick(args.lr, file.take("lr")?, 0.003),
        seed: pick(args.seed, file.take("seed")?, 0),
    };
    file.finish()?;

    let widths: Vec<usize> = match &widths_text {
        Some(text) => parse_comma_list(text, "width")?,
        None => vec![32, 64],
    };
    let knn = match arch {
        Arch::DgcnnMini => Some(knn.unwrap_or(8)),
        Arch::PointnetMini => {
            if knn.is_some() {
                return Err(Error::Config(
                    "--knn only applies to dgcnn-mini".into(),
                ));
            }
            None
        }
    };
    let dataset = load_dataset(&data)?;
    let mut model = build_model(arch, dataset.num_classes(), &widths, knn, cfg.seed)?;
    let history = train(&mut model, &dataset, &cfg)?;
    ensure_out_dir(&out)?;

    let ckpt_path = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt_path)?;
    let log_path = out.join("train_log.csv");
    let mut log = String::from("epoch,mean_train_loss,train_accuracy,test_accuracy\n");
    for row in &history {
        log.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.mean_train_loss, row.train_accuracy, row.test_accuracy
        ));
    }
    fs::write(&log_path, log).map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;

    let last = history.last().expect("training ran at least one epoch");
    emit!(
        "trained {} for {} epochs: train accuracy {:.3}, test accuracy {:.3}; checkpoint at {}",
        arch.name(),
        history.len(),
        last.train_accuracy,
        last.test_accuracy,
        ckpt_path.display()
    );
    write_manifest(
        &out,
        &RunManifest {
            command: "train".into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            inputs: vec![path_str(&data)],
            outputs: vec![path_str(&ckpt_path), path_str(&log_path)],
            config: config_value(&serde_json::json!({
                "arch": arch.name(),
                "widths": widths,
                "knn": knn,
                "epochs": cfg.epochs,
                "batch_size": cfg.batch_size,
                "lr": cfg.lr,
                "seed": cfg.seed,
            }))?,
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
        },
    )
}

// ---------------------------------------------------------------------------
// attack

/// Everything [`crate::attack::AttackResult`] records except the cloud
/// itself, which lives in the sibling `.xyz` file.
#[derive(Serialize)]
struct ExampleRecord {
    id: String,
    label: usize,
    class_name: String,
    clean_pred: usize,
    adv_pred: usize,
    preferred_class: Option<usize>,
    success: bool,
    iterations_used: usize,
    final_d: f64,
    per_point_displacement: Vec<f64>,
    loss_trace: Vec<LossBreakdown>,
}

#[derive(Serialize)]
struct AttackSummary {
    examples: usize,
    clean_correct: usize,
    flipped_among_clean_correct: usize,
    asr: Option<f64>,
    mean_final_d: Option<f64>,
}

fn measured_distance(kind: DistanceKind, adv: &crate::tensor::Tensor, clean: &crate::tensor::Tensor) -> Result<f64> {
    match kind {
        DistanceKind::L2 => d_l2(adv, clean),
        DistanceKind::Chamfer => d_chamfer(adv, clean),
        DistanceKind::Hausdorff => d_hausdorff(adv, clean),
    }
}

fn check_labels_fit(dataset: &Dataset, model: &VictimModel, checkpoint: &Path) -> Result<()> {
    let max_label = dataset
        .train
        .iter()
        .chain(&dataset.test)
        .map(|c| c.label)
        .max()
        .unwrap_or(0);
    if max_label >= model.num_classes {
        return Err(Error::Data(format!(
            "dataset uses label {max_label} but {} was trained for {} classes",
            checkpoint.display(),
            model.num_classes
        )));
    }
    Ok(())
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let started = unix_ms();
    let mut file = FileCfg::load(args.config.as_deref())?;
    let checkpoint = require(
        args.checkpoint
            .or(file.take_raw("checkpoint").map(PathBuf::from)),
        "checkpoint",
    )?;
    let data = require(
        args.data.or(file.take_raw("data").map(PathBuf::from)),
        "data",
    )?;
    let out = require(
        args.out.or(file.take_raw("out").map(PathBuf::from)),
        "out",
    )?;
    let limit = args.limit.or(file.take("limit")?);
    let (cfg, noise_baseline) =
        resolve_attack_config(&args.flags, args.variant.as_deref(), &mut file)?;
    file.finish()?;

    let model = load_checkpoint(&checkpoint)?;
    let dataset = load_dataset(&data)?;
    check_labels_fit(&dataset, &model, &checkpoint)?;
    let examples: Vec<_> = dataset
        .test
        .iter()
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    if examples.is_empty() {
        return Err(Error::Data(format!(
            "{} has no test clouds to attack",
            data.display()
        )));
    }

    let adv_dir = out.join("adv");
    let results_dir = out.join("results");
    ensure_out_dir(&adv_dir)?;
    ensure_out_dir(&results_dir)?;

    let mut clean_preds = Vec::with_capacity(examples.len());
    let mut adv_preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut d_sum = 0.0;
    let mut d_count = 0usize;
    for (idx, cloud) in examples.iter().enumerate() {
        let record = if noise_baseline {
            let example_seed = seeds::derive(cfg.seed, &[seeds::hash_str(&cloud.id)]);
            let moved =
                random_perturbation_baseline(&cloud.points, cfg.distance, cfg.lambda, example_seed)?;
            let clean_pred = predict_probs(&model, &cloud.points)?.argmax();
            let adv_pred = predict_probs(&model, &moved)?.argmax();
            let final_d = measured_distance(cfg.distance, &moved, &cloud.points)?;
            let per_point_displacement: Vec<f64> = (0..moved.rows())
                .map(|i| crate::tensor::dist(moved.row(i), cloud.points.row(i)))
                .collect();
            let class_name = dataset.class_names[cloud.label].clone();
            save_xyz(
                &adv_dir.join(format!("{}.xyz", cloud.id)),
                &moved,
                Some(&class_name),
            )?;
            ExampleRecord {
                id: cloud.id.clone(),
                label: cloud.label,
                class_name,
                clean_pred,
                adv_pred,
                preferred_class: None,
                success: adv_pred != cloud.label,
                iterations_used: 0,
                final_d,
                per_point_displacement,
                loss_trace: vec![],
            }
        } else {
            let result = run_attack(&model, cloud, &cfg)?;
            let class_name = dataset.class_names[cloud.label].clone();
            save_xyz(
                &adv_dir.join(format!("{}.xyz", cloud.id)),
                &result.adversarial,
                Some(&class_name),
            )?;
            ExampleRecord {
                id: cloud.id.clone(),
                label: cloud.label,
                class_name,
                clean_pred: result.clean_pred,
                adv_pred: result.adv_pred,
                preferred_class: result.preferred_class,
                success: result.success,
                iterations_used: result.iterations_used,
                final_d: result.final_d,
                per_point_displacement: result.per_point_displacement,
                loss_trace: result.loss_trace,
            }
        };
        if record.clean_pred == record.label {
            d_sum += record.final_d;
            d_count += 1;
        }
        clean_preds.push(record.clean_pred);
        adv_preds.push(record.adv_pred);
        labels.push(record.label);
        let json_path = results_dir.join(format!("{}.json", record.id));
        let mut text = serde_json::to_string_pretty(&record)
            .map_err(|e| Error::Data(format!("result serialization failed: {e}")))?;
        text.push('\n');
        fs::write(&json_path, text)
            .map_err(|e| Error::io(format!("writing {}", json_path.display()), e))?;
        if (idx + 1) % 20 == 0 || idx + 1 == examples.len() {
            eprintln!("attacked {}/{} examples", idx + 1, examples.len());
        }
    }

    let asr = attack_success_rate(&adv_preds, &clean_preds, &labels)?;
    let clean_correct = clean_preds
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    let flipped = adv_preds
        .iter()
        .zip(clean_preds.iter().zip(&labels))
        .filter(|(a, (c, l))| c == l && a != l)
        .count();
    let summary = AttackSummary {
        examples: examples.len(),
        clean_correct,
        flipped_among_clean_correct: flipped,
        asr,
        mean_final_d: (d_count > 0).then(|| d_sum / d_count as f64),
    };
    let summary_path = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Data(format!("summary serialization failed: {e}")))?;
    text.push('\n');
    fs::write(&summary_path, text)
        .map_err(|e| Error::io(format!("writing {}", summary_path.display()), e))?;
    match asr {
        Some(rate) => emit!(
            "attacked {} examples ({} clean-correct): success rate {:.3}",
            examples.len(),
            clean_correct,
            rate
        ),
        None => emit!(
            "attacked {} examples: success rate undefined (no clean-correct examples)",
            examples.len()
        ),
    }

    write_manifest(
        &out,
        &RunManifest {
            command: "attack".into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            inputs: vec![path_str(&checkpoint), path_str(&data)],
            outputs: vec![
                path_str(&adv_dir),
                path_str(&results_dir),
                path_str(&summary_path),
            ],
            config: config_value(&serde_json::json!({
                "attack": cfg,
                "variant": args.variant,
                "noise_baseline": noise_baseline,
                "limit": limit,
            }))?,
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
        },
    )
}

// ---------------------------------------------------------------------------
// eval

fn resolve_defenses(
    names: &[String],
    srs_ratio: Option<f64>,
    sor_k: Option<usize>,
    sor_alpha: Option<f64>,
) -> Result<Vec<DefenseConfig>> {
    let base = DefenseConfig {
        kind: DefenseKind::None,
        srs_drop_ratio: srs_ratio.unwrap_or(0.125),
        sor_k: sor_k.unwrap_or(2),
        sor_alpha: sor_alpha.unwrap_or(1.1),
    };
    let mut defenses = vec![base.clone()];
    for name in names {
        let kind = DefenseKind::from_name(&normalize_key(name))?;
        if defenses.iter().any(|d| d.kind == kind) {
            continue;
        }
        defenses.push(DefenseConfig { kind, ..base.clone() });
    }
    for defense in &defenses {
        defense.validate()?;
    }
    Ok(defenses)
}

fn named_attack_variant(name: &str, cfg: &AttackConfig) -> GridVariant {
    GridVariant {
        name: name.into(),
        spec: VariantSpec::Attack {
            config: cfg.clone(),
        },
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let started = unix_ms();
    let mut file = FileCfg::load(args.config.as_deref())?;
    let file_checkpoints = file.take_raw("checkpoint");
    let mut checkpoints = args.checkpoints;
    if checkpoints.is_empty() {
        if let Some(text) = file_checkpoints {
            checkpoints = parse_comma_list::<String>(&text, "checkpoint")?
                .into_iter()
                .map(PathBuf::from)
                .collect();
        }
    }
    if checkpoints.is_empty() {
        return Err(Error::Config("missing required flag --checkpoint".into()));
    }
    let data = require(
        args.data.or(file.take_raw("data").map(PathBuf::from)),
        "data",
    )?;
    let out = require(
        args.out.or(file.take_raw("out").map(PathBuf::from)),
        "out",
    )?;
    let table = normalize_key(&pick(args.table, file.take_raw("table"), "main".into()));
    let file_defenses = file.take_raw("defense");
    let mut defense_names = args.defenses;
    if defense_names.is_empty() {
        if let Some(text) = file_defenses {
            defense_names = parse_comma_list(&text, "defense")?;
        }
    }
    let srs_ratio = args.srs_ratio.or(file.take("srs_ratio")?);
    let sor_k = args.sor_k.or(file.take("sor_k")?);
    let sor_alpha = args.sor_alpha.or(file.take("sor_alpha")?);
    let limit = args.limit.or(file.take("limit")?);
    let (base_cfg, _) = resolve_attack_config(&args.flags, None, &mut file)?;
    file.finish()?;

    let defenses = resolve_defenses(&defense_names, srs_ratio, sor_k, sor_alpha)?;
    let dataset = load_dataset(&data)?;
    let mut owned_victims = Vec::new();
    for path in &checkpoints {
        let model = load_checkpoint(path)?;
        check_labels_fit(&dataset, &model, path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        owned_victims.push((name, model));
    }
    let victims: Vec<(String, &VictimModel)> = owned_victims
        .iter()
        .map(|(name, model)| (name.clone(), model))
        .collect();
    let clouds: Vec<_> = dataset
        .test
        .iter()
        .take(limit.unwrap_or(usize::MAX))
        .cloned()
        .collect();
    if clouds.is_empty() {
        return Err(Error::Data(format!(
            "{} has no test clouds to evaluate",
            data.display()
        )));
    }

    let mut l3a = base_cfg.clone();
    l3a.local = true;
    l3a.use_score = true;
    l3a.use_cons = true;
    l3a.use_pwa = true;
    let mut global_base = base_cfg.clone();
    global_base.local = false;
    global_base.use_score = false;
    global_base.use_cons = false;
    global_base.use_pwa = false;

    ensure_out_dir(&out)?;
    let mut outputs = Vec::new();
    let report = match table.as_str() {
        "main" => {
            let variants = vec![
                named_attack_variant("l3a", &l3a),
                named_attack_variant("global-base", &global_base),
                GridVariant {
                    name: "rp".into(),
                    spec: VariantSpec::Noise {
                        distance: base_cfg.distance,
                        lambda: base_cfg.lambda,
                    },
                },
            ];
            crate::eval::run_grid(&victims, &clouds, &variants, &defenses, base_cfg.seed)?
        }
        "ablation" => {
            let variants = ablation_variants(&base_cfg);
            crate::eval::run_grid(&victims, &clouds, &variants, &defenses, base_cfg.seed)?
        }
        "sweep" => {
            let sizes = [30, 40, 50];
            let variants = sweep_variants(&base_cfg, &sizes, &sizes);
            crate::eval::run_grid(&victims, &clouds, &variants, &defenses, base_cfg.seed)?
        }
        "fig1" => {
            // One grid per variant so each keeps its own pooled histogram.
            let parts = [
                named_attack_variant("l3a", &l3a),
                named_attack_variant("global-base", &global_base),
            ];
            let mut rows = Vec::new();
            let mut histograms = Vec::new();
            let mut variants = Vec::new();
            for variant in parts {
                let part = crate::eval::run_grid(
                    &victims,
                    &clouds,
                    std::slice::from_ref(&variant),
                    &defenses,
                    base_cfg.seed,
                )?;
                rows.extend(part.rows);
                histograms.push((variant.name.clone(), part.histogram));
                variants.push(variant);
            }
            let hist_path = out.join("histogram.csv");
            let mut text =
                String::from("variant,lo,hi,count_share,cost_share,contribution_share\n");
            for (name, histogram) in &histograms {
                for bin in &histogram.bins {
                    text.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        name,
                        bin.lo,
                        bin.hi,
                        bin.count_share,
                        bin.cost_share,
                        bin.contribution_share
                    ));
                }
            }
            fs::write(&hist_path, text)
                .map_err(|e| Error::io(format!("writing {}", hist_path.display()), e))?;
            outputs.push(path_str(&hist_path));
            EvalReport {
                rows,
                histogram: crate::eval::merge_histograms(
                    &histograms.into_iter().map(|(_, h)| h).collect::<Vec<_>>(),
                )?,
                provenance: Provenance {
                    toolkit_version: env!("CARGO_PKG_VERSION").into(),
                    seed: base_cfg.seed,
                    dataset: format!("{} clouds", clouds.len()),
                    variants,
                    defenses: defenses.clone(),
                },
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown table {other:?}; expected main, ablation, sweep, or fig1"
            )))
        }
    };

    let mut report = report;
    report.rows.extend(paper_reference_rows());
    let csv_path = out.join("report.csv");
    let json_path = out.join("report.json");
    emit_report(&report, ReportFormat::Csv, &csv_path)?;
    emit_report(&report, ReportFormat::Json, &json_path)?;
    outputs.push(path_str(&csv_path));
    outputs.push(path_str(&json_path));
    let computed = report
        .rows
        .iter()
        .filter(|r| r.kind == crate::eval::RowKind::Computed)
        .count();
    emit!(
        "evaluated table {}: {} computed rows ({} victims, {} defenses) written to {}",
        table,
        computed,
        victims.len(),
        defenses.len(),
        out.display()
    );

    write_manifest(
        &out,
        &RunManifest {
            command: "eval".into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            seed: base_cfg.seed,
            inputs: checkpoints
                .iter()
                .map(|p| path_str(p))
                .chain([path_str(&data)])
                .collect(),
            outputs,
            config: config_value(&serde_json::json!({
                "table": table,
                "base_attack": base_cfg,
                "defenses": defenses,
                "limit": limit,
            }))?,
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
        },
    )
}

// ---------------------------------------------------------------------------
// check

fn cmd_check(args: CheckArgs) -> i32 {
    let results = selfcheck::run_all(args.negative_control);
    let failed = results.iter().filter(|r| !r.passed).count();
    if args.json {
        let value = serde_json::json!({
            "checks": results
                .iter()
                .map(|r| serde_json::json!({
                    "name": r.name,
                    "passed": r.passed,
                    "detail": r.detail,
                }))
                .collect::<Vec<_>>(),
            "passed": results.len() - failed,
            "failed": failed,
        });
        match serde_json::to_string_pretty(&value) {
            Ok(text) => emit!("{text}"),
            Err(e) => {
                eprintln!("error: summary serialization failed: {e}");
                return EXIT_NUMERIC;
            }
        }
    } else {
        for r in &results {
            if r.passed {
                emit!("ok   {} ({})", r.name, r.detail);
            } else {
                emit!("FAIL {}: {}", r.name, r.detail);
            }
        }
        emit!(
            "self-check: {} passed, {} failed",
            results.len() - failed,
            failed
        );
    }
    if failed > 0 {
        EXIT_CHECK
    } else {
        EXIT_OK
    }
}
