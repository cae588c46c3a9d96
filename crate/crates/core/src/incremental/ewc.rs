//! Elastic weight consolidation with a diagonal Fisher estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{run_epochs, Control, Objective, TrainConfig, TrainOutcome};
use super::{begin_task, IncrementalError, Inputs, StageData};
use crate::nn::loss::softmax_rows;
use crate::nn::{ForwardOptions, Gradients, ParamId, ParamStore, Partition, PartitionedModel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwcConfig {
    /// Weight of the quadratic penalty `lambda/2 · Σ F (θ - θ*)²`.
    pub lambda: f64,
    /// Training inputs used for the Fisher estimate.
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambda: 1000.0,
            fisher_samples: 200,
        }
    }
}

impl EwcConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            out.push(format!("{prefix}.lambda must be a non-negative number"));
        }
        if self.fisher_samples == 0 {
            out.push(format!("{prefix}.fisher_samples must be positive"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EwcPenalty {
    lambda: f64,
    entries: Vec<(ParamId, Tensor, Tensor)>,
}

impl EwcPenalty {
    /// Fisher diagonal of each anchored block.
    pub fn fisher(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(id, f, _)| (*id, f))
    }

    /// Adds the penalty gradient into `grads` and returns the penalty value.
    pub fn apply(&self, params: &ParamStore, grads: &mut Gradients) -> Result<f64, IncrementalError> {
        if self.lambda == 0.0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (id, fisher, anchor) in &self.entries {
            let value = params.value(*id);
            let mut g = Tensor::zeros(value.shape());
            for (((gi, &f), &v), &a) in g.data_mut().iter_mut().zip(fisher.data()).zip(value.data()).zip(anchor.data()) {
                let d = v - a;
                total += 0.5 * self.lambda * f * d * d;
                *gi = self.lambda * f * d;
            }
            grads.accumulate(*id, g)?;
        }
        Ok(total)
    }
}

/// Empirical diagonal Fisher of the old heads with respect to the unfrozen
/// hidden blocks. Labels are sampled from each old head's own predictive
/// distribution; the squared per-sample gradients are summed over old heads
/// and averaged over samples. The last head is treated as the new one and
/// ignored.
pub fn fisher_diagonal(
    model: &PartitionedModel,
    inputs: &Inputs,
    samples: usize,
    seed: u64,
) -> Result<Vec<(ParamId, Tensor)>, IncrementalError> {
    let old_heads = model.heads().len().saturating_sub(1);
    if old_heads == 0 {
        return Err(IncrementalError::NoExistingHead);
    }
    let ids: Vec<ParamId> = model
        .params()
        .iter()
        .filter(|(_, b)| !b.frozen && matches!(b.partition, Partition::Shared | Partition::Expanded(_)))
        .map(|(id, _)| id)
        .collect();
    let mut fisher: Vec<(ParamId, Tensor)> =
        ids.iter().map(|&id| (id, Tensor::zeros(model.params().value(id).shape()))).collect();
    let n = inputs.rows().min(samples);
    if n == 0 {
        return Ok(fisher);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ForwardOptions {
        train: false,
        seed: 0,
        record: true,
    };
    for r in 0..n {
        let out = inputs.select(&[r]).forward(model, opts)?;
        for h in 0..old_heads {
            let p = softmax_rows(&out.logits[h]);
            let y = sample_index(p.row(0), rng.gen::<f64>());
            let mut g = p.clone();
            g.row_mut(0)[y] -= 1.0;
            let mut head_grads = vec![None; model.heads().len()];
            head_grads[h] = Some(g);
            let grads = model.backward(&out, &head_grads)?;
            for (id, f) in fisher.iter_mut() {
                if let Some(g) = grads.get(*id) {
                    f.data_mut().iter_mut().zip(g.data()).for_each(|(f, g)| *f += g * g);
                }
            }
        }
    }
    fisher.iter_mut().for_each(|(_, f)| f.scale(1.0 / n as f64));
    Ok(fisher)
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One EWC stage: attaches a new head, estimates the Fisher diagonal of the
/// old heads on the new training inputs, then trains on
/// `ce + l2 + lambda/2 · Σ F (θ - θ*)²`.
pub fn ewc_train_task(
    model: &mut PartitionedModel,
    data: &StageData,
    ewc: &EwcConfig,
    train: &TrainConfig,
    head_seed: u64,
    seed: u64,
) -> Result<TrainOutcome, IncrementalError> {
    if model.heads().is_empty() {
        return Err(IncrementalError::NoExistingHead);
    }
    let inputs = if model.backbone_frozen() { data.train.inputs.featurize(model)? } else { data.train.inputs.clone() };
    begin_task(model, data.classes, head_seed)?;
    let fisher = fisher_diagonal(model, &inputs, ewc.fisher_samples, super::derive_seed(seed, &[u64::MAX]))?;
    let penalty = EwcPenalty {
        lambda: ewc.lambda,
        entries: fisher
            .into_iter()
            .map(|(id, f)| (id, f, model.params().value(id).clone()))
            .collect(),
    };
    let objective = Objective {
        ewc: Some(&penalty),
        ..Objective::plain()
    };
    run_epochs(model, data, &objective, train, seed, &mut |_, _| Ok(Control::Continue))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_follows_cumulative_mass() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(sample_index(&p, 0.1), 0);
        assert_eq!(sample_index(&p, 0.69), 1);
        assert_eq!(sample_index(&p, 0.71), 2);
        assert_eq!(sample_index(&p, 1.0), 2);
    }

    #[test]
    fn penalty_value_and_gradient() {
        let mut store = ParamStore::new();
        let id = store.push("w", Partition::Shared, Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap());
        let pen = EwcPenalty {
            lambda: 2.0,
            entries: vec![(id, Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap(), Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap())],
        };
        let mut grads = Gradients::new();
        let v = pen.apply(&store, &mut grads).unwrap();
        // 0.5·2·(0.5·1 + 1·4) = 4.5
        assert!((v - 4.5).abs() < 1e-15);
        assert_eq!(grads.get(id).unwrap().data(), &[1.0, 4.0]);
    }
}
