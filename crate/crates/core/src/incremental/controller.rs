//! The PRIME stage controller.
//!
//! A stage first runs LwF on the unchanged stack. If the new-task loss stalls,
//! the probed hidden layer is measured; when its indicator crosses the trigger
//! the stage is rolled back to its starting point, every hidden layer is
//! widened and LwF is rerun on the new units only. At most one widening
//! happens per stage.

use serde::{Deserialize, Serialize};

use super::lwf::{detect_stall, lwf_stage, LwfConfig};
use super::train::{Control, EpochLog, TrainConfig};
use super::widen::{widen, WidenReport};
use super::{derive_seed, IncrementalError, StageData};
use crate::nn::PartitionedModel;
use crate::plasticity::{
    evaluate_features, plan_expansion, ExpansionConfig, PlasticityConfig, PlasticityError, PlasticityReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PrimeConfig {
    pub lwf: LwfConfig,
    pub plasticity: PlasticityConfig,
    pub expansion: ExpansionConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CyclePath {
    /// LwF ran to completion on the unchanged stack.
    Short,
    /// The stack was widened and LwF rerun on the new units.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlasticityCheck {
    /// Epoch (0-based) after which the check ran.
    pub epoch: usize,
    pub report: PlasticityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub stage: usize,
    pub predicted_pr1: f64,
    pub saturated: bool,
    pub widen: WidenReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub path: CyclePath,
    /// Epochs of the first LwF pass (discarded on the full path).
    pub lwf_epochs: Vec<EpochLog>,
    /// Epochs of the LwF pass on the widened stack.
    pub expanded_epochs: Vec<EpochLog>,
    pub checks: Vec<PlasticityCheck>,
    pub expansion: Option<ExpansionEvent>,
    pub params_before: usize,
    pub params_after: usize,
}

/// Runs one incremental stage (`stage` counts from 1; stage 1 is the base
/// task and is not handled here).
pub fn prime_controller(
    model: &mut PartitionedModel,
    data: &StageData,
    cfg: &PrimeConfig,
    train: &TrainConfig,
    stage: usize,
    head_seed: u64,
    seed: u64,
) -> Result<StageReport, IncrementalError> {
    prime_controller_observed(model, data, cfg, train, stage, head_seed, seed, &mut |_, _, _| {})
}

/// [`prime_controller`] that hands the model, the pass and the epoch log to
/// `observe` after every training epoch of either pass.
#[allow(clippy::too_many_arguments)]
pub fn prime_controller_observed(
    model: &mut PartitionedModel,
    data: &StageData,
    cfg: &PrimeConfig,
    train: &TrainConfig,
    stage: usize,
    head_seed: u64,
    seed: u64,
    observe: &mut dyn FnMut(&PartitionedModel, CyclePath, &EpochLog),
) -> Result<StageReport, IncrementalError> {
    if model.heads().is_empty() {
        return Err(IncrementalError::NoExistingHead);
    }
    let problems = cfg.plasticity.problems();
    if !problems.is_empty() {
        return Err(PlasticityError::Config(problems.join("; ")).into());
    }
    let params_before = model.param_count();
    let snapshot = model.clone();
    let probe_rows: Vec<usize> = (0..data.train.len().min(cfg.plasticity.probe_samples)).collect();
    let probe = data.train.inputs.select(&probe_rows).featurize(model)?;
    let crate::incremental::Inputs::Features(probe) = probe else { unreachable!("featurize yields features") };

    let mut checks = Vec::new();
    let mut trigger: Option<PlasticityReport> = None;
    let mut last_check = 0usize;
    let stall_cfg = cfg.lwf.stall;
    let classes = data.classes;
    let mut hook = |m: &PartitionedModel, logs: &[EpochLog]| -> Result<Control, IncrementalError> {
        observe(m, CyclePath::Short, logs.last().expect("hook runs after an epoch"));
        let fresh = &logs[last_check..];
        let ce: Vec<f64> = fresh.iter().map(|l| l.ce).collect();
        if !detect_stall(&ce, classes, &stall_cfg) {
            return Ok(Control::Continue);
        }
        last_check = logs.len();
        let report = evaluate_features(m, &probe, &cfg.plasticity)?;
        checks.push(PlasticityCheck {
            epoch: logs.len() - 1,
            report: report.clone(),
        });
        let plannable = report.limited && report.pr1 >= cfg.expansion.safe_pr1;
        if plannable {
            trigger = Some(report);
            return Ok(Control::Abort);
        }
        Ok(Control::Continue)
    };
    let first = lwf_stage(model, data, &cfg.lwf, train, head_seed, seed, &mut hook)?;
    let Some(report) = trigger else {
        return Ok(StageReport {
            stage,
            path: CyclePath::Short,
            lwf_epochs: first.logs,
            expanded_epochs: Vec::new(),
            checks,
            expansion: None,
            params_before,
            params_after: model.param_count(),
        });
    };

    *model = snapshot;
    let plan = plan_expansion(&report, model.hidden_layers().len(), &cfg.plasticity, &cfg.expansion)?;
    let widened = widen(model, &plan, derive_seed(seed, &[0x5749_4445]))?;
    // The widen step froze the previous task head; LwF retires it as an old head.
    let second = lwf_stage(model, data, &cfg.lwf, train, head_seed, derive_seed(seed, &[1]), &mut |m, logs| {
        observe(m, CyclePath::Full, logs.last().expect("hook runs after an epoch"));
        Ok(Control::Continue)
    })?;
    Ok(StageReport {
        stage,
        path: CyclePath::Full,
        lwf_epochs: first.logs,
        expanded_epochs: second.logs,
        checks,
        expansion: Some(ExpansionEvent {
            stage,
            predicted_pr1: plan.predicted_pr1,
            saturated: plan.saturated,
            widen: widened,
        }),
        params_before,
        params_after: model.param_count(),
    })
}
