//! The epoch loop shared by every method.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ewc::EwcPenalty;
use super::lwf::{distillation_loss, CalibrationSet};
use super::{begin_task, derive_seed, IncrementalError, StageData};
use crate::nn::loss::{accuracy, cross_entropy};
use crate::nn::{adam_step, reduce_lr_on_plateau, AdamConfig, ForwardOptions, OptimizerState, PartitionedModel, PlateauConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Coefficient of the L2 term `c·Σθ²` over trainable parameters.
    pub l2: f64,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 128,
            l2: 1e-4,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Negated comparisons make NaN settings fail validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push(format!("{prefix}.batch_size must be positive"));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            out.push(format!("{prefix}.l2 must be a non-negative number"));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            out.push(format!("{prefix}.adam.learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            out.push(format!("{prefix}.adam betas must lie in [0, 1)"));
        }
        if !(self.adam.eps > 0.0) {
            out.push(format!("{prefix}.adam.eps must be positive"));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            out.push(format!("{prefix}.plateau.factor must lie in (0, 1)"));
        }
        if self.plateau.patience == 0 {
            out.push(format!("{prefix}.plateau.patience must be positive"));
        }
        if !(self.plateau.min_delta >= 0.0) {
            out.push(format!("{prefix}.plateau.min_delta must be non-negative"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training cross-entropy of the new head.
    pub ce: f64,
    /// Mean distillation loss summed over old heads (unweighted).
    pub distill: f64,
    /// Mean L2 term.
    pub reg: f64,
    /// Mean EWC penalty.
    pub ewc: f64,
    /// Mean of `lambda0·distill + ce + reg + ewc` per batch.
    pub total: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Abort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub aborted: bool,
}

pub(crate) struct Objective<'a> {
    pub lambda0: f64,
    pub temperature: f64,
    pub calibration: Option<&'a CalibrationSet>,
    pub ewc: Option<&'a EwcPenalty>,
}

impl Objective<'_> {
    pub fn plain() -> Self {
        Self {
            lambda0: 0.0,
            temperature: 1.0,
            calibration: None,
            ewc: None,
        }
    }
}

pub(crate) type EpochHook<'h> = &'h mut dyn FnMut(&PartitionedModel, &[EpochLog]) -> Result<Control, IncrementalError>;

/// Trains the last head (and every unfrozen block) on `data`.
pub(crate) fn run_epochs(
    model: &mut PartitionedModel,
    data: &StageData,
    objective: &Objective<'_>,
    cfg: &TrainConfig,
    seed: u64,
    hook: EpochHook<'_>,
) -> Result<TrainOutcome, IncrementalError> {
    let n = data.train.len();
    if n == 0 {
        return Err(IncrementalError::EmptyTrainingSet);
    }
    let head = model.heads().len().checked_sub(1).ok_or(IncrementalError::NoExistingHead)?;
    if model.heads()[head].classes != data.classes {
        return Err(IncrementalError::Config(format!(
            "task head has {} classes, stage has {}",
            model.heads()[head].classes,
            data.classes
        )));
    }
    let frozen_backbone = model.backbone_frozen();
    let train_inputs = if frozen_backbone { data.train.inputs.featurize(model)? } else { data.train.inputs.clone() };
    let val = if data.val.is_empty() { &data.train } else { &data.val };
    let val_inputs = if frozen_backbone { val.inputs.featurize(model)? } else { val.inputs.clone() };
    if let Some(c) = objective.calibration {
        if c.rows() != n || c.heads() != head {
            return Err(IncrementalError::Config(format!(
                "calibration covers {} heads x {} rows, model has {head} old heads and {n} training rows",
                c.heads(),
                c.rows()
            )));
        }
    }
    let use_distill = objective.lambda0 > 0.0 && objective.calibration.is_some();
    let mut state = OptimizerState::new(cfg.adam, cfg.plateau);
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let trainable = model.params().trainable_ids();
        let (mut ce_sum, mut lstar_sum, mut reg_sum, mut ewc_sum, mut total_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = train_inputs.select(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let opts = ForwardOptions::train(derive_seed(seed, &[epoch as u64, b as u64]));
            let out = xb.forward(model, opts)?;
            let (ce, g_new) = cross_entropy(&out.logits[head], &yb)?;
            let mut head_grads = vec![None; head + 1];
            head_grads[head] = Some(g_new);
            let mut lstar = 0.0;
            if let Some(calib) = objective.calibration {
                for (h, slot) in head_grads.iter_mut().enumerate().take(head) {
                    let target = calib.logits(h).select_rows(chunk);
                    let (l, mut g) = distillation_loss(&out.logits[h], &target, objective.temperature)?;
                    lstar += l;
                    if use_distill {
                        g.scale(objective.lambda0);
                        *slot = Some(g);
                    }
                }
            }
            let mut grads = model.backward(&out, &head_grads)?;
            let mut reg = 0.0;
            if cfg.l2 > 0.0 {
                for &id in &trainable {
                    let v = model.params().value(id);
                    reg += cfg.l2 * v.sum_squares();
                    let mut g = v.clone();
                    g.scale(2.0 * cfg.l2);
                    grads.accumulate(id, g)?;
                }
            }
            let mut ewc = 0.0;
            if let Some(pen) = objective.ewc {
                ewc = pen.apply(model.params(), &mut grads)?;
            }
            adam_step(model.params_mut(), &grads, &mut state)?;
            let w = chunk.len() as f64;
            let dl = if use_distill { objective.lambda0 * lstar } else { 0.0 };
            ce_sum += w * ce;
            lstar_sum += w * lstar;
            reg_sum += w * reg;
            ewc_sum += w * ewc;
            total_sum += w * (dl + ce + reg + ewc);
        }
        let out = val_inputs.forward(model, ForwardOptions::eval())?;
        let (val_loss, _) = cross_entropy(&out.logits[head], &val.labels)?;
        let val_accuracy = accuracy(&out.logits[head], &val.labels);
        reduce_lr_on_plateau(&mut state, val_loss)?;
        let nf = n as f64;
        logs.push(EpochLog {
            epoch,
            ce: ce_sum / nf,
            distill: lstar_sum / nf,
            reg: reg_sum / nf,
            ewc: ewc_sum / nf,
            total: total_sum / nf,
            val_loss,
            val_accuracy,
            learning_rate: state.learning_rate,
        });
        if hook(model, &logs)? == Control::Abort {
            return Ok(TrainOutcome { logs, aborted: true });
        }
    }
    Ok(TrainOutcome { logs, aborted: false })
}

/// First-stage training: attaches the first head and trains every unfrozen
/// block (backbone included) with cross-entropy plus L2.
pub fn train_base(
    model: &mut PartitionedModel,
    data: &StageData,
    cfg: &TrainConfig,
    head_seed: u64,
    seed: u64,
) -> Result<TrainOutcome, IncrementalError> {
    if !model.heads().is_empty() {
        return Err(IncrementalError::Config("base training expects a model without heads".into()));
    }
    begin_task(model, data.classes, head_seed)?;
    run_epochs(model, data, &Objective::plain(), cfg, seed, &mut |_, _| Ok(Control::Continue))
}

/// Naive fine-tuning: retires the old heads, attaches a new one and trains it
/// together with the unfrozen hidden blocks on cross-entropy plus L2.
pub fn finetune(
    model: &mut PartitionedModel,
    data: &StageData,
    cfg: &TrainConfig,
    head_seed: u64,
    seed: u64,
) -> Result<TrainOutcome, IncrementalError> {
    begin_task(model, data.classes, head_seed)?;
    run_epochs(model, data, &Objective::plain(), cfg, seed, &mut |_, _| Ok(Control::Continue))
}
