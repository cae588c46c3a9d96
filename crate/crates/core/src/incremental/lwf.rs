//! Learning without forgetting: distillation against old-head logits recorded
//! on the new task's inputs before any update.

use serde::{Deserialize, Serialize};

use super::train::{run_epochs, Control, EpochHook, EpochLog, Objective, TrainConfig, TrainOutcome};
use super::{begin_task, IncrementalError, Inputs, StageData};
use crate::nn::loss::softmax_rows;
use crate::nn::{ForwardOptions, Partition, PartitionedModel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StallConfig {
    /// The stall threshold is `tau_fraction · ln(classes)`.
    pub tau_fraction: f64,
    pub patience: usize,
    /// An epoch counts as progress when it lowers the best loss so far by at
    /// least this fraction.
    pub min_relative_improvement: f64,
}

impl Default for StallConfig {
    fn default() -> Self {
        Self {
            tau_fraction: 0.8,
            patience: 5,
            min_relative_improvement: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LwfConfig {
    pub lambda0: f64,
    pub temperature: f64,
    pub stall: StallConfig,
}

impl Default for LwfConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            temperature: 2.0,
            stall: StallConfig::default(),
        }
    }
}

impl LwfConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            out.push(format!("{prefix}.lambda0 must be a non-negative number"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            out.push(format!("{prefix}.temperature must be positive"));
        }
        if !(self.stall.tau_fraction.is_finite() && self.stall.tau_fraction > 0.0) {
            out.push(format!("{prefix}.stall.tau_fraction must be positive"));
        }
        if self.stall.patience == 0 {
            out.push(format!("{prefix}.stall.patience must be positive"));
        }
        if !(0.0..1.0).contains(&self.stall.min_relative_improvement) {
            out.push(format!("{prefix}.stall.min_relative_improvement must lie in [0, 1)"));
        }
        out
    }
}

/// Cross-entropy between tempered softmaxes: `-Σ softmax(c/T)·log softmax(z/T)`
/// averaged over rows, where `z` are the current logits and `c` the recorded
/// ones. Returns the loss and its gradient with respect to `z`.
pub fn distillation_loss(logits: &Tensor, calibration: &Tensor, temperature: f64) -> Result<(f64, Tensor), IncrementalError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(IncrementalError::Temperature(temperature));
    }
    if logits.shape() != calibration.shape() {
        return Err(crate::nn::NnError::Shape(format!(
            "logits {:?} vs calibration {:?}",
            logits.shape(),
            calibration.shape()
        ))
        .into());
    }
    let n = logits.rows();
    if n == 0 {
        return Ok((0.0, logits.clone()));
    }
    let p = softmax_rows(&logits.map(|v| v / temperature));
    let q = softmax_rows(&calibration.map(|v| v / temperature));
    let logp = crate::nn::loss::log_softmax_rows(&logits.map(|v| v / temperature));
    let loss = -q.data().iter().zip(logp.data()).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let scale = 1.0 / (temperature * n as f64);
    let grad_data = p.data().iter().zip(q.data()).map(|(a, b)| (a - b) * scale).collect();
    let grad = Tensor::from_vec(logits.shape(), grad_data)?;
    Ok((loss, grad))
}

/// Old-head logits on a fixed set of inputs. Recorded once, then read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    logits: Vec<Tensor>,
    rows: usize,
}

impl CalibrationSet {
    pub fn heads(&self) -> usize {
        self.logits.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn logits(&self, head: usize) -> &Tensor {
        &self.logits[head]
    }
}

/// Evaluates every attached head on `inputs` in eval mode.
pub fn record_calibration(model: &PartitionedModel, inputs: &Inputs) -> Result<CalibrationSet, IncrementalError> {
    if model.heads().is_empty() {
        return Err(IncrementalError::NoExistingHead);
    }
    let out = inputs.forward(model, ForwardOptions::eval())?;
    Ok(CalibrationSet {
        rows: inputs.rows(),
        logits: out.logits,
    })
}

/// True when the last `patience` epochs all sit above `tau_fraction·ln(classes)`
/// and none of them improved on the best earlier loss by the required fraction.
/// A NaN loss never counts as stalled.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn detect_stall(ce_history: &[f64], classes: usize, cfg: &StallConfig) -> bool {
    let p = cfg.patience;
    if p == 0 || ce_history.len() < p + 1 || classes < 2 {
        return false;
    }
    let tau = cfg.tau_fraction * (classes as f64).ln();
    let start = ce_history.len() - p;
    let mut best = ce_history[..start].iter().copied().fold(f64::INFINITY, f64::min);
    for &ce in &ce_history[start..] {
        if !(ce > tau) || ce < best * (1.0 - cfg.min_relative_improvement) {
            return false;
        }
        best = best.min(ce);
    }
    true
}

pub(crate) fn lwf_stage(
    model: &mut PartitionedModel,
    data: &StageData,
    lwf: &LwfConfig,
    train: &TrainConfig,
    head_seed: u64,
    seed: u64,
    hook: EpochHook<'_>,
) -> Result<TrainOutcome, IncrementalError> {
    let inputs = if model.backbone_frozen() { data.train.inputs.featurize(model)? } else { data.train.inputs.clone() };
    let calibration = record_calibration(model, &inputs)?;
    begin_task(model, data.classes, head_seed)?;
    let objective = Objective {
        lambda0: lwf.lambda0,
        temperature: lwf.temperature,
        calibration: Some(&calibration),
        ewc: None,
    };
    run_epochs(model, data, &objective, train, seed, hook)
}

/// One LwF stage: records old-head logits on the training inputs, attaches a
/// new head and trains it with the unfrozen hidden blocks on
/// `lambda0·distill + ce + l2`.
pub fn lwf_train_task(
    model: &mut PartitionedModel,
    data: &StageData,
    lwf: &LwfConfig,
    train: &TrainConfig,
    head_seed: u64,
    seed: u64,
) -> Result<TrainOutcome, IncrementalError> {
    lwf_train_task_observed(model, data, lwf, train, head_seed, seed, &mut |_, _| {})
}

/// [`lwf_train_task`] that hands the model and the epoch log to `observe`
/// after every epoch.
pub fn lwf_train_task_observed(
    model: &mut PartitionedModel,
    data: &StageData,
    lwf: &LwfConfig,
    train: &TrainConfig,
    head_seed: u64,
    seed: u64,
    observe: &mut dyn FnMut(&PartitionedModel, &EpochLog),
) -> Result<TrainOutcome, IncrementalError> {
    if !(lwf.temperature.is_finite() && lwf.temperature > 0.0) {
        return Err(IncrementalError::Temperature(lwf.temperature));
    }
    lwf_stage(model, data, lwf, train, head_seed, seed, &mut |m, logs| {
        observe(m, logs.last().expect("hook runs after an epoch"));
        Ok(Control::Continue)
    })
}

/// LwF after a widening: only the blocks added by expansions (and the new
/// head) may be trainable.
pub fn lwf_train_expanded(
    model: &mut PartitionedModel,
    data: &StageData,
    lwf: &LwfConfig,
    train: &TrainConfig,
    head_seed: u64,
    seed: u64,
) -> Result<TrainOutcome, IncrementalError> {
    if model.generation() == 0 {
        return Err(IncrementalError::NotExpanded);
    }
    let stray = model.params().iter().find(|(_, b)| {
        !b.frozen && !matches!(b.partition, Partition::Expanded(_) | Partition::TaskHead(_))
    });
    if let Some((_, b)) = stray {
        return Err(IncrementalError::Config(format!("block {} outside the expansion is trainable", b.name)));
    }
    lwf_train_task(model, data, lwf, train, head_seed, seed)
}
