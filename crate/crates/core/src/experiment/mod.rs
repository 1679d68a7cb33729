//! Synthetic data, dataset files, training and the with/without-CAN
//! comparison.

mod dataset;
mod synth;

pub use dataset::{
    load_dataset, load_dataset_file, save_dataset, save_dataset_file, write_dataset_file, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use synth::{
    generate_drive, generate_synthetic, render_lane, sample_rows, write_raw_recording, Drive, RawRecording,
    SynthConfig, GROUPS, GROUPS_HEADER, GROUP_SPEED_MEANS, MIN_PER_GROUP, RAW_GROUPS, RAW_LOG, RAW_MANIFEST,
    SPEED_SD,
};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canlog::CanLogError;
use crate::fusionmodel::{FusedModel, ModelConfig, ModelError, ModelInput, Variant};
use crate::neuralnet::{adam_step, rmse, AdamState, NnError, DEFAULT_LR};
use crate::seeds::{self, Stream};
use crate::sync::{split_groups, SyncError, SyncedSample};
use crate::videostream::VideoError;

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_VAL_GROUP: u8 = 5;
/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("synthetic data needs exactly 5 groups, got {0}")]
    BadGroupCount(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset file truncated")]
    TruncatedFile,
    #[error("unsupported dataset version {0}")]
    VersionMismatch(u8),
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("split leaves the {0} side empty")]
    EmptySplit(&'static str),
    #[error("validation group {0} is not present")]
    UnknownGroup(u8),
    #[error("{variant} training diverged at epoch {epoch}, step {step}: non-finite loss")]
    DivergedLoss { variant: &'static str, epoch: usize, step: usize },
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("model is {found}, expected {expected}")]
    VariantMismatch { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sync(SyncError),
    #[error(transparent)]
    CanLog(#[from] CanLogError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

impl From<SyncError> for ExperimentError {
    fn from(e: SyncError) -> Self {
        match e {
            SyncError::EmptySplit(side) => ExperimentError::EmptySplit(side),
            SyncError::UnknownGroup(g) => ExperimentError::UnknownGroup(g),
            e => ExperimentError::Sync(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| ExperimentError::Io { path: path.to_path_buf(), source };
    let name = path.file_name().ok_or_else(|| io(std::io::ErrorKind::InvalidInput.into()))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Variants trained for the without-CAN and with-CAN columns.
    pub variants: [Variant; 2],
    pub val_groups: BTreeSet<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            variants: [Variant::VisionOnly, Variant::Fused],
            val_groups: [DEFAULT_VAL_GROUP].into(),
            dataset: None,
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(ExperimentError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ExperimentError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ExperimentError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.val_groups.is_empty() {
            return Err(ExperimentError::InvalidConfig("at least one validation group is needed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch training losses seen during the epoch.
    pub train_mse: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation RMSE.
    pub model: FusedModel,
    /// Optimizer state at that epoch.
    pub adam: AdamState,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Per-feature mean and population standard deviation; a constant feature
/// gets unit scale.
pub fn feature_standardization(samples: &[&SyncedSample]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; 5];
    for s in samples {
        mean.iter_mut().zip(s.can_features).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; 5];
    for s in samples {
        var.iter_mut().zip(s.can_features).zip(&mean).for_each(|((q, v), m)| *q += (v - m) * (v - m));
    }
    let std = var.into_iter().map(|q| (q / n).sqrt()).map(|sd| if sd > 1e-12 { sd } else { 1.0 }).collect();
    (mean, std)
}

/// Mini-batch Adam on MSE over the training groups. The batch order comes
/// from the seed alone, so every variant sees the same sequence.
pub fn train(config: &ExperimentConfig, samples: &[SyncedSample], variant: Variant) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, val_set) = split_groups(samples, &config.val_groups)?;
    let mut model = FusedModel::new(ModelConfig::new(variant, config.seed))?;
    if variant.uses_can() {
        let (mean, std) = feature_standardization(&train_set);
        model.set_can_standardization(mean, std)?;
    }
    let mut adam = AdamState::new(config.lr, &model.parameters());
    let mut rng = seeds::rng(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, FusedModel, AdamState)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SyncedSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let input = ModelInput::from_samples(&batch, variant.uses_can())?;
            let target: Vec<f64> = batch.iter().map(|s| s.steering_angle).collect();
            let diverged = || ExperimentError::DivergedLoss { variant: variant.name(), epoch, step: step + 1 };
            let (loss, grads) = match model.loss_and_gradients(&input, &target) {
                Ok(r) => r,
                Err(ModelError::Nn(NnError::NonFinite(_))) => return Err(diverged()),
                Err(e) => return Err(e.into()),
            };
            adam_step(&mut model.parameters_mut(), &grads, &mut adam).map_err(ModelError::from)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_mse = loss_sum / train_set.len() as f64;
        let val_rmse = match evaluate(&model, &val_set) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(ExperimentError::Model(ModelError::Nn(NnError::NonFinite(_)))) => {
                return Err(ExperimentError::DivergedLoss { variant: variant.name(), epoch, step: 0 })
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord { epoch, train_mse, val_rmse });
        if best.as_ref().map_or(true, |(b, ..)| val_rmse < *b) {
            best = Some((val_rmse, epoch, model.clone(), adam.clone()));
        }
    }
    let (_, best_epoch, model, adam) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, adam, best_epoch, history })
}

/// Predictions in sample order.
pub fn predict_samples(model: &FusedModel, samples: &[&SyncedSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        out.extend(model.forward(&ModelInput::from_samples(chunk, model.variant().uses_can())?)?);
    }
    Ok(out)
}

/// RMSE of the model's predictions against the steering labels.
pub fn evaluate(model: &FusedModel, samples: &[&SyncedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(ExperimentError::EmptyInput);
    }
    let pred = predict_samples(model, samples)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.steering_angle).collect();
    rmse(&pred, &labels).map_err(|e| ModelError::from(e).into())
}

pub fn check_variant(model: &FusedModel, expected: Variant) -> Result<()> {
    if model.variant() == expected {
        Ok(())
    } else {
        Err(ExperimentError::VariantMismatch { expected: expected.name(), found: model.variant().name() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub rmse_train: f64,
    pub rmse_val: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub vision_only: VariantResult,
    pub fused: VariantResult,
    /// `100 * (without - with) / without` on validation RMSE.
    pub percent_decrease_val: f64,
    pub config: ExperimentConfig,
    pub seed: u64,
}

pub fn percent_decrease(without: f64, with: f64) -> f64 {
    100.0 * (without - with) / without
}

fn run_variant(config: &ExperimentConfig, samples: &[SyncedSample], variant: Variant) -> Result<VariantResult> {
    let out = train(config, samples, variant)?;
    let (train_set, val_set) = split_groups(samples, &config.val_groups)?;
    Ok(VariantResult {
        variant,
        rmse_train: evaluate(&out.model, &train_set)?,
        rmse_val: evaluate(&out.model, &val_set)?,
        best_epoch: out.best_epoch,
        history: out.history,
    })
}

/// Trains both configured variants from the same seed and split.
pub fn compare(config: &ExperimentConfig, samples: &[SyncedSample]) -> Result<ComparisonReport> {
    config.validate()?;
    let without = run_variant(config, samples, config.variants[0])?;
    let with = run_variant(config, samples, config.variants[1])?;
    Ok(ComparisonReport {
        percent_decrease_val: percent_decrease(without.rmse_val, with.rmse_val),
        vision_only: without,
        fused: with,
        config: config.clone(),
        seed: config.seed,
    })
}
