//! Mini-batch training with Adam, validation, metrics and checkpoints.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{
    batch_order, collate, mix_seed, splitmix64, stream_rng, DataError, Sample, SampleSource,
};
use crate::nn::{
    self, adam_step, build_custom, build_laksnet, build_pilotnet, decode_checkpoint,
    encode_checkpoint, mse_loss, AdamConfig, AdamState, EvalReport, ModelFile, Network, NnError,
    LAKSNET_INPUT,
};
use crate::tensor::{Mode, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelChoice {
    LaksNet,
    PilotNet,
    /// JSON layer list, see [`ModelFile`].
    Custom(PathBuf),
}

impl ModelChoice {
    pub fn build(&self, seed: u64) -> Result<Network<f32>> {
        Ok(match self {
            ModelChoice::LaksNet => build_laksnet(seed),
            ModelChoice::PilotNet => build_pilotnet(seed),
            ModelChoice::Custom(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                let file: ModelFile = serde_json::from_str(&text)
                    .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
                let (input, specs) = file.into_parts(LAKSNET_INPUT);
                build_custom(specs, input, seed)?
            }
        })
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelChoice::LaksNet => f.write_str("laksnet"),
            ModelChoice::PilotNet => f.write_str("pilotnet"),
            ModelChoice::Custom(p) => write!(f, "custom:{}", p.display()),
        }
    }
}

impl FromStr for ModelChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "laksnet" => Ok(ModelChoice::LaksNet),
            "pilotnet" | "nvidia" => Ok(ModelChoice::PilotNet),
            _ => match s.strip_prefix("custom:") {
                Some(p) if !p.is_empty() => Ok(ModelChoice::Custom(p.into())),
                _ => Err(format!(
                    "unknown model `{s}` (laksnet | pilotnet | custom:FILE)"
                )),
            },
        }
    }
}

impl Serialize for ModelChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// How the per-epoch `train_mse` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMetric {
    /// Eval-mode pass over the training split after the epoch.
    Eval,
    /// Mean of the mini-batch losses seen during the epoch.
    Running,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub model: ModelChoice,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub augment: bool,
    pub train_metric: TrainMetric,
    /// Write a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Include wall-clock seconds in the metrics file (makes it run-dependent).
    pub record_seconds: bool,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::LaksNet,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            validation_fraction: 0.2,
            augment: true,
            train_metric: TrainMetric::Eval,
            checkpoint_every: 0,
            checkpoint_dir: None,
            metrics_path: None,
            record_seconds: false,
            resume_from: None,
        }
    }
}

impl TrainConfig {
    /// 50 epochs, batch 32, Adam at learning rate 0.1.
    pub fn paper_hparams() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(TrainError::Config(
                "checkpoint cadence given without a checkpoint directory".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    /// `None` when the split left no validation samples.
    pub val_mse: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self, with_seconds: bool) -> String {
        let mut obj = serde_json::json!({
            "epoch": self.epoch,
            "train_mse": self.train_mse,
            "val_mse": self.val_mse,
            "lr": self.lr,
        });
        if with_seconds {
            obj["seconds"] = serde_json::json!(self.seconds);
        }
        obj.to_string()
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub optimizer: AdamState<f32>,
    pub metrics: Vec<EpochMetrics>,
}

// Stream tags keep the per-purpose random streams independent.
const PERMUTATION: u64 = 1;
const AUGMENTATION: u64 = 2;
const DROPOUT: u64 = 3;

/// Whether sample group `group` belongs to the validation split. Depends only
/// on the group index, so the split is identical across runs and seeds.
pub fn is_validation(group: usize, fraction: f64) -> bool {
    let h = splitmix64(group as u64 ^ 0xA5A5_5A5A_C3C3_3C3C);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

pub fn split_indices(data: &dyn SampleSource, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    (0..data.len()).partition(|&i| !is_validation(data.group(i), fraction))
}

fn load_batch(
    data: &dyn SampleSource,
    indices: &[usize],
    stream: Option<(u64, u64)>,
) -> Result<(Tensor<f32>, Vec<f32>)> {
    let samples: Vec<Sample> = indices
        .par_iter()
        .map(|&i| match stream {
            Some((seed, epoch)) => {
                let mut rng = stream_rng(seed, epoch, i as u64);
                data.load(i, Some(&mut rng))
            }
            None => data.load(i, None),
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(collate(&samples)?)
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode predictions over `indices`.
pub fn predict_indices(
    net: &Network<f32>,
    data: &dyn SampleSource,
    indices: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut actual = Vec::with_capacity(indices.len());
    let mut predicted = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = load_batch(data, chunk, None)?;
        let out = net.predict(&x)?;
        actual.extend(y.iter().map(|&v| v as f64));
        predicted.extend(out.data().iter().map(|&v| v as f64));
    }
    Ok((actual, predicted))
}

/// Eval-mode predictions and MSE over a whole dataset.
pub fn evaluate(net: &Network<f32>, data: &dyn SampleSource) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(TrainError::Config(
            "cannot evaluate an empty dataset".into(),
        ));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (actual, predicted) = predict_indices(net, data, &all)?;
    Ok(EvalReport::from_pairs(actual, predicted)?)
}

/// Trains a fresh (or resumed) network on `data`.
pub fn train(config: &TrainConfig, data: &dyn SampleSource) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("training dataset is empty".into()));
    }
    let (train_idx, val_idx) = split_indices(data, config.validation_fraction);
    if train_idx.is_empty() {
        return Err(TrainError::Config(
            "validation split left no training samples".into(),
        ));
    }
    let batches_per_epoch = train_idx.len().div_ceil(config.batch_size);

    let (mut net, mut adam, start_epoch) = match &config.resume_from {
        None => {
            let net = config.model.build(config.seed)?;
            let adam = AdamState::new(&net, config.adam());
            (net, adam, 0)
        }
        Some(path) => resume(path, config, batches_per_epoch)?,
    };

    let mut metrics_file = match &config.metrics_path {
        None => None,
        Some(p) => Some(
            if start_epoch == 0 {
                File::create(p)
            } else {
                OpenOptions::new().append(true).create(true).open(p)
            }
            .map_err(io_err(p))?,
        ),
    };

    log::info!(
        "training {} ({} parameters) on {} samples, validating on {}, {} batches per epoch",
        config.model,
        net.count_parameters(),
        train_idx.len(),
        val_idx.len(),
        batches_per_epoch
    );

    let mut history = Vec::new();
    for epoch in start_epoch + 1..=config.epochs {
        let started = Instant::now();
        let e = epoch as u64;
        let order = batch_order(
            train_idx.len(),
            config.batch_size,
            mix_seed(&[config.seed, e, PERMUTATION]),
        )?;
        let aug_seed = mix_seed(&[config.seed, AUGMENTATION]);
        let mut loss_sum = 0.0;
        for (b, batch) in order.iter().enumerate() {
            let indices: Vec<usize> = batch.iter().map(|&j| train_idx[j]).collect();
            let stream = config.augment.then_some((aug_seed, e));
            let (x, labels) = load_batch(data, &indices, stream)?;
            let mut drop_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, e, b as u64, DROPOUT]));
            let pass = net.forward(&x, Mode::Train, &mut drop_rng)?;
            let actual: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
            let predicted: Vec<f64> = pass.output.data().iter().map(|&v| v as f64).collect();
            let (loss, grad) = mse_loss(&actual, &predicted)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b + 1,
                    detail: format!("loss is {loss}"),
                });
            }
            loss_sum += loss * indices.len() as f64;
            let g = Tensor::new(
                vec![indices.len(), 1],
                grad.iter().map(|&v| v as f32).collect(),
            )
            .map_err(NnError::from)?;
            let grads = net.backward(&pass, &g)?;
            adam_step(&mut net, &grads, &mut adam).map_err(|e| match e {
                NnError::NonFinite { layer } => TrainError::Diverged {
                    epoch,
                    batch: b + 1,
                    detail: format!("non-finite gradient in {layer}"),
                },
                other => other.into(),
            })?;
        }

        let train_mse = match config.train_metric {
            TrainMetric::Running => loss_sum / train_idx.len() as f64,
            TrainMetric::Eval => {
                let (a, p) = predict_indices(&net, data, &train_idx)?;
                mse_loss(&a, &p)?.0
            }
        };
        let val_mse = if val_idx.is_empty() {
            None
        } else {
            let (a, p) = predict_indices(&net, data, &val_idx)?;
            Some(mse_loss(&a, &p)?.0)
        };
        if !train_mse.is_finite() || val_mse.is_some_and(|v| !v.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                batch: batches_per_epoch,
                detail: "non-finite epoch MSE".into(),
            });
        }
        let m = EpochMetrics {
            epoch,
            train_mse,
            val_mse,
            lr: config.learning_rate,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: train_mse {train_mse:.6} val_mse {} ({:.1} s)",
            config.epochs,
            val_mse.map_or("-".into(), |v| format!("{v:.6}")),
            m.seconds
        );
        if let (Some(f), Some(p)) = (metrics_file.as_mut(), config.metrics_path.as_ref()) {
            writeln!(f, "{}", m.to_json_line(config.record_seconds)).map_err(io_err(p))?;
        }
        history.push(m);

        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            let dir = config.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = checkpoint_path(dir, epoch);
            std::fs::write(&path, encode_checkpoint(&net, &adam)).map_err(io_err(&path))?;
        }
    }

    Ok(TrainOutcome {
        network: net,
        optimizer: adam,
        metrics: history,
    })
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.ckpt"))
}

fn resume(
    path: &Path,
    config: &TrainConfig,
    batches_per_epoch: usize,
) -> Result<(Network<f32>, AdamState<f32>, usize)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (net, state) = decode_checkpoint(&bytes)?;
    let mut state = state.ok_or_else(|| {
        TrainError::Config(format!(
            "{} holds weights only; resuming needs a checkpoint with optimizer state",
            path.display()
        ))
    })?;
    let expected = config.model.build(config.seed)?;
    if expected.specs() != net.specs() || expected.input_shape() != net.input_shape() {
        return Err(NnError::Incompatible(format!(
            "checkpoint architecture differs from model {}",
            config.model
        ))
        .into());
    }
    let steps = state.step_count as usize;
    if !steps.is_multiple_of(batches_per_epoch) {
        return Err(TrainError::Config(format!(
            "checkpoint holds {steps} optimizer steps, not a whole number of {batches_per_epoch}-batch epochs"
        )));
    }
    if state.config.learning_rate != config.learning_rate {
        log::warn!(
            "checkpoint learning rate {} replaced by {}",
            state.config.learning_rate,
            config.learning_rate
        );
        state.config.learning_rate = config.learning_rate;
    }
    let done = steps / batches_per_epoch;
    if done >= config.epochs {
        return Err(TrainError::Config(format!(
            "checkpoint already covers {done} of {} epochs",
            config.epochs
        )));
    }
    Ok((net, state, done))
}

/// Writes final weights without optimizer state.
pub fn save_network(net: &Network<f32>, path: &Path) -> Result<()> {
    nn::save_weights(net, path)?;
    Ok(())
}
