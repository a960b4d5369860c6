//! Command-line front end. [`run`] is the whole program minus process exit,
//! so it can be driven in-process.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::data::{
    AugmentConfig, CameraSet, Crop, LoadConfig, LogDataset, DEFAULT_CAMERA_CORRECTION,
};
use crate::driveserver::{DriveConfig, DriveServer, Driver};
use crate::nn::{
    load_weights, Network, LAKSNET_PARAMETERS, PILOTNET_PARAMETERS, PILOTNET_PARAMETERS_REPORTED,
};
use crate::simtrack::{
    run_episode, synth_dataset, ConstantPolicy, EpisodeConfig, NetworkPolicy, OraclePolicy, Policy,
    SynthConfig, Track, TrackDefinition, DEFAULT_TARGET_SPEED,
};
use crate::trainer::{evaluate, save_network, train, ModelChoice, TrainConfig, TrainMetric};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Parser)]
#[command(
    name = "steerkit",
    version,
    about = "Steering-angle regression: train, evaluate, drive, simulate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a driving log.
    Train(TrainArgs),
    /// Mean squared error of saved weights on a driving log.
    Eval(EvalArgs),
    /// Serve steering commands to the driving simulator.
    Drive(DriveArgs),
    /// Run one closed-loop episode on a synthetic track.
    Simulate(SimulateArgs),
    /// Generate a synthetic driving log.
    Synth(SynthArgs),
    /// Print the layer table and parameter count.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct CropArgs {
    /// Rows removed from the top of each frame before resizing.
    #[arg(long, default_value_t = 0)]
    crop_top: usize,
    /// Rows removed from the bottom of each frame before resizing.
    #[arg(long, default_value_t = 0)]
    crop_bottom: usize,
}

impl CropArgs {
    fn crop(&self) -> Crop {
        Crop {
            top: self.crop_top,
            bottom: self.crop_bottom,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory containing driving_log.csv, or the CSV itself.
    #[arg(long)]
    data: PathBuf,
    /// laksnet, pilotnet or custom:FILE (JSON layer list).
    #[arg(long, default_value = "laksnet")]
    model: ModelChoice,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// 50 epochs, batch 32, Adam at 0.1; explicit flags still override.
    #[arg(long)]
    paper_hparams: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output weights file.
    #[arg(long, default_value = "model.lnw")]
    out: PathBuf,
    /// Per-epoch metrics as JSON lines.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Include wall-clock seconds in the metrics file.
    #[arg(long)]
    record_seconds: bool,
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,
    /// center or all (left/right with steering correction).
    #[arg(long, default_value = "all")]
    cameras: CameraSet,
    #[arg(long, default_value_t = DEFAULT_CAMERA_CORRECTION)]
    correction: f64,
    #[arg(long)]
    no_augment: bool,
    /// Maximum augmentation rotation in degrees.
    #[arg(long, default_value_t = AugmentConfig::default().max_rotation_deg)]
    max_rotation: f64,
    /// Maximum augmentation crop jitter in pixels.
    #[arg(long, default_value_t = AugmentConfig::default().max_jitter_px)]
    max_jitter: u32,
    /// Report the running mini-batch loss as train_mse instead of an
    /// eval-mode pass.
    #[arg(long)]
    running_train_mse: bool,
    /// Save a checkpoint every N epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an identical configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    crop: CropArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "center")]
    cameras: CameraSet,
    #[arg(long, default_value_t = DEFAULT_CAMERA_CORRECTION)]
    correction: f64,
    /// Print every actual/predicted pair.
    #[arg(long)]
    table: bool,
    #[command(flatten)]
    crop: CropArgs,
}

#[derive(Debug, Args)]
struct DriveArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "0.0.0.0")]
    host: String,
    #[arg(long, default_value_t = 4567)]
    port: u16,
    #[arg(long, default_value_t = DEFAULT_TARGET_SPEED)]
    target_speed: f64,
    #[arg(long, default_value_t = 0.5)]
    kp: f64,
    /// Do not print one line per prediction.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    crop: CropArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum PolicyKind {
    Network,
    Oracle,
    Zero,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Required for the network policy.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Bundled track name (oval, s_curve) or a track JSON file.
    #[arg(long, default_value = "s_curve")]
    track: String,
    #[arg(long, value_enum, default_value_t = PolicyKind::Network)]
    policy: PolicyKind,
    /// Simulated seconds before the episode is stopped.
    #[arg(long, default_value_t = 300.0)]
    cap: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TARGET_SPEED)]
    target_speed: f64,
    /// Write every simulated state as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    crop: CropArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "oval")]
    track: String,
    #[arg(long, default_value_t = 1000)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Standard deviation of the steering disturbance.
    #[arg(long, default_value_t = SynthConfig::default().noise_std)]
    noise_std: f64,
    #[arg(long, default_value_t = SynthConfig::default().jpeg_quality)]
    jpeg_quality: u8,
    /// Drive the loop in one direction only.
    #[arg(long)]
    one_direction: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Weights or checkpoint file; without it a fresh model is built.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "laksnet")]
    model: ModelChoice,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        let _ = writeln!(err, "error: {msg}");
        return EXIT_USAGE;
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Drive(a) => cmd_drive(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Honours `STEERKIT_THREADS` by sizing the global worker pool once.
fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("STEERKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("STEERKIT_THREADS must be a positive integer, got {v:?}"))?;
    // Already configured earlier in this process: keep the existing pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn echo(out: &mut dyn Write, command: &str, config: serde_json::Value) -> Result<(), BoxError> {
    writeln!(
        out,
        "config {}",
        json!({ "command": command, "config": config })
    )?;
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let mut cfg = if a.paper_hparams {
        TrainConfig::paper_hparams()
    } else {
        TrainConfig::default()
    };
    cfg.model = a.model;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    cfg.seed = a.seed;
    cfg.validation_fraction = a.validation_fraction;
    cfg.augment = !a.no_augment;
    cfg.train_metric = if a.running_train_mse {
        TrainMetric::Running
    } else {
        TrainMetric::Eval
    };
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.checkpoint_dir = a.checkpoint_dir;
    if cfg.checkpoint_every > 0 && cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(a.out.with_extension("checkpoints"));
    }
    cfg.metrics_path = a.metrics;
    cfg.record_seconds = a.record_seconds;
    cfg.resume_from = a.resume;
    let load = LoadConfig {
        cameras: a.cameras,
        correction: a.correction,
        crop: a.crop.crop(),
        augment: AugmentConfig {
            max_rotation_deg: a.max_rotation,
            max_jitter_px: a.max_jitter,
            ..AugmentConfig::default()
        },
    };
    cfg.validate()?;
    load.augment.validate()?;
    echo(
        out,
        "train",
        json!({
            "data": a.data,
            "out": a.out,
            "optimizer": "adam",
            "train": cfg,
            "load": load,
        }),
    )?;
    let data = LogDataset::open(&a.data, load)?;
    let outcome = train(&cfg, &data)?;
    save_network(&outcome.network, &a.out)?;
    if let Some(m) = outcome.metrics.last() {
        writeln!(out, "{}", m.to_json_line(false))?;
    }
    writeln!(out, "saved {}", a.out.display())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let load = LoadConfig {
        cameras: a.cameras,
        correction: a.correction,
        crop: a.crop.crop(),
        augment: AugmentConfig::none(),
    };
    echo(
        out,
        "eval",
        json!({"weights": a.weights, "data": a.data, "load": load, "table": a.table}),
    )?;
    let net = load_weights(&a.weights)?;
    let data = LogDataset::open(&a.data, load)?;
    let report = evaluate(&net, &data)?;
    if a.table {
        write!(out, "{}", report.to_table())?;
    }
    writeln!(out, "samples {}", report.n)?;
    writeln!(out, "mse {:.6}", report.mse)?;
    Ok(())
}

fn cmd_drive(a: DriveArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let config = DriveConfig {
        target_speed: a.target_speed,
        kp: a.kp,
        crop: a.crop.crop(),
        console: !a.quiet,
        ..DriveConfig::default()
    };
    let addr = format!("{}:{}", a.host, a.port);
    echo(
        out,
        "drive",
        json!({
            "weights": a.weights,
            "listen": addr,
            "target_speed": config.target_speed,
            "kp": config.kp,
            "crop": config.crop,
            "initial_steer": config.initial_steer,
            "ping_interval_ms": config.ping_interval_ms,
            "ping_timeout_ms": config.ping_timeout_ms,
        }),
    )?;
    let net = load_weights(&a.weights)?;
    let server = DriveServer::bind(&addr, Driver::new(net, config))?;
    writeln!(out, "listening on {}", server.local_addr())?;
    out.flush()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))?;
    server.run_until(&stop)?;
    writeln!(out, "stopped")?;
    Ok(())
}

fn load_track(name: &str) -> Result<Track, BoxError> {
    Ok(Track::new(TrackDefinition::resolve(name)?)?)
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let cfg = EpisodeConfig {
        cap_seconds: a.cap,
        dt: a.dt,
        seed: a.seed,
        target_speed: a.target_speed,
        ..EpisodeConfig::default()
    };
    echo(
        out,
        "simulate",
        json!({
            "weights": a.weights,
            "track": a.track,
            "policy": a.policy,
            "cap_seconds": cfg.cap_seconds,
            "dt": cfg.dt,
            "seed": cfg.seed,
            "target_speed": cfg.target_speed,
            "kp": cfg.kp,
            "start_s": cfg.start_s,
            "vehicle": cfg.vehicle,
            "render": cfg.render,
            "crop": a.crop.crop(),
        }),
    )?;
    let track = load_track(&a.track)?;
    let net: Option<Network<f32>> = match (&a.weights, a.policy) {
        (Some(w), PolicyKind::Network) => Some(load_weights(w)?),
        (None, PolicyKind::Network) => return Err("the network policy needs --weights".into()),
        _ => None,
    };
    let mut policy: Box<dyn Policy + '_> = match (a.policy, &net) {
        (PolicyKind::Network, Some(net)) => Box::new(NetworkPolicy {
            net,
            crop: a.crop.crop(),
        }),
        (PolicyKind::Oracle, _) => Box::new(OraclePolicy),
        _ => Box::new(ConstantPolicy(0.0)),
    };
    let result = run_episode(policy.as_mut(), &track, &cfg)?;
    if let Some(path) = &a.trace {
        write_trace(path, &result.trace)?;
    }
    writeln!(
        out,
        "{}",
        json!({
            "track": track.name(),
            "survived_seconds": result.survived_seconds,
            "mean_speed": result.mean_speed,
            "off_track": result.off_track,
        })
    )?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[crate::simtrack::CarState]) -> Result<(), BoxError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in trace {
        writeln!(f, "{}", serde_json::to_string(s)?)?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let cfg = SynthConfig {
        frames: a.frames,
        seed: a.seed,
        noise_std: a.noise_std,
        jpeg_quality: a.jpeg_quality,
        both_directions: !a.one_direction,
        ..SynthConfig::default()
    };
    echo(
        out,
        "synth",
        json!({"track": a.track, "out": a.out, "synth": cfg}),
    )?;
    let track = load_track(&a.track)?;
    let summary = synth_dataset(&track, &cfg, &a.out)?;
    writeln!(
        out,
        "wrote {} frames to {}",
        summary.frames,
        summary.log_path.display()
    )?;
    Ok(())
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    echo(
        out,
        "inspect",
        json!({"weights": a.weights, "model": a.model}),
    )?;
    let net = match &a.weights {
        Some(w) => load_weights(w)?,
        None => a.model.build(0)?,
    };
    write!(out, "{}", layer_table(&net))?;
    writeln!(out, "total parameters {}", net.count_parameters())?;
    if net.specs() == crate::nn::build_laksnet::<f32>(0).specs() {
        writeln!(out, "architecture laksnet (expected {LAKSNET_PARAMETERS})")?;
    }
    writeln!(
        out,
        "reference: pilotnet on 3x66x200 has {PILOTNET_PARAMETERS} parameters; the comparison table reports {PILOTNET_PARAMETERS_REPORTED}"
    )?;
    Ok(())
}

/// Index, layer, per-sample output shape and parameter count.
pub fn layer_table(net: &Network<f32>) -> String {
    let mut s = format!(
        "{:>3}  {:<22} {:<16} {:>9}\n",
        "#", "layer", "output", "params"
    );
    let shape = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    s.push_str(&format!(
        "{:>3}  {:<22} {:<16} {:>9}\n",
        "-",
        "input",
        shape(&net.input_shape()),
        0
    ));
    for (i, (layer, out)) in net.layers().iter().zip(net.layer_shapes()).enumerate() {
        let params: usize = layer.params.iter().map(|p| p.len()).sum();
        s.push_str(&format!(
            "{:>3}  {:<22} {:<16} {:>9}\n",
            i,
            layer.spec.to_string(),
            shape(&out),
            params
        ));
    }
    s
}
