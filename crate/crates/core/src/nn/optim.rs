//! Adam with bias correction and a reduce-on-plateau scheduler.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, NnError, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best: f64,
    pub bad_epochs: usize,
}

impl Default for PlateauState {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub learning_rate: f64,
    pub step: u64,
    pub scheduler: PlateauState,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl OptimizerState {
    pub fn new(adam: AdamConfig, plateau: PlateauConfig) -> Self {
        Self {
            adam,
            plateau,
            learning_rate: adam.learning_rate,
            step: 0,
            scheduler: PlateauState::default(),
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update of every parameter that has a gradient.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves both parameters and state untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState) -> Result<(), NnError> {
    for (id, g) in grads.iter() {
        if g.shape() != params.value(id).shape() {
            return Err(NnError::Shape(format!(
                "gradient {:?} for parameter `{}` of shape {:?}",
                g.shape(),
                params.block(id).name,
                params.value(id).shape()
            )));
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient(params.block(id).name.clone()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps, .. } = state.adam;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let lr = state.learning_rate;
    for (id, g) in grads.iter() {
        let m = state.moments.entry(id).or_insert_with(|| Moments {
            first: Tensor::zeros(g.shape()),
            second: Tensor::zeros(g.shape()),
        });
        let value = params.value_mut(id);
        let it = value
            .data_mut()
            .iter_mut()
            .zip(m.first.data_mut().iter_mut())
            .zip(m.second.data_mut().iter_mut())
            .zip(g.data());
        for (((p, m1), m2), &gi) in it {
            *m1 = beta1 * *m1 + (1.0 - beta1) * gi;
            *m2 = beta2 * *m2 + (1.0 - beta2) * gi * gi;
            let mhat = *m1 / bc1;
            let vhat = *m2 / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Feeds one validation loss to the scheduler. After `patience` consecutive
/// calls without an improvement larger than `min_delta`, the learning rate is
/// multiplied by `factor` and the counter restarts.
pub fn reduce_lr_on_plateau(state: &mut OptimizerState, validation_loss: f64) -> Result<(), NnError> {
    if !validation_loss.is_finite() {
        return Err(NnError::NonFinite(format!("validation loss {validation_loss}")));
    }
    let sched = &mut state.scheduler;
    if validation_loss < sched.best - state.plateau.min_delta {
        sched.best = validation_loss;
        sched.bad_epochs = 0;
    } else {
        sched.bad_epochs += 1;
        if sched.bad_epochs >= state.plateau.patience {
            state.learning_rate *= state.plateau.factor;
            sched.bad_epochs = 0;
        }
    }
    Ok(())
}
