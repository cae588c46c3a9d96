//! Function-preserving widening of the hidden stack.
//!
//! Each widened layer receives a new column segment whose units copy existing
//! units round-robin. A copy of unit `s` reads every input of its layer: rows
//! for an input `u` (and for every fresh copy of `u` in the layer below) carry
//! `W[u, s] / count(u)`, where `count(u)` is one plus the number of fresh
//! copies of `u`. With zero noise every copy therefore reproduces the
//! activation of its source exactly. The existing segments and heads keep
//! reading their original prefix and are frozen, so old-task outputs do not
//! change at all; the noise only affects the new units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::IncrementalError;
use crate::nn::{Partition, PartitionedModel, Tensor};
use crate::plasticity::ExpansionPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerExpansion {
    pub layer: usize,
    pub old_width: usize,
    pub new_width: usize,
    /// Source unit of each new unit, in order.
    pub sources: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidenReport {
    pub generation: u32,
    pub factor: f64,
    pub epsilon0: f64,
    pub layers: Vec<LayerExpansion>,
    pub frozen_params_before: usize,
    pub frozen_params_after: usize,
}

/// Widens every hidden layer by `plan.factor`, freezing all pre-existing
/// blocks. The new blocks are tagged with the next expansion generation.
pub fn widen(model: &mut PartitionedModel, plan: &ExpansionPlan, seed: u64) -> Result<WidenReport, IncrementalError> {
    let depth = model.hidden_layers().len();
    let expected: Vec<usize> = (0..depth).collect();
    if plan.layers != expected {
        return Err(IncrementalError::PlanMismatch(format!(
            "plan targets layers {:?}, model has {depth} hidden layers",
            plan.layers
        )));
    }
    if !(plan.factor.is_finite() && plan.factor > 1.0) {
        return Err(IncrementalError::PlanMismatch(format!("factor {} must exceed 1", plan.factor)));
    }
    if !(plan.epsilon0.is_finite() && plan.epsilon0 >= 0.0) {
        return Err(IncrementalError::PlanMismatch(format!("noise scale {} must be non-negative", plan.epsilon0)));
    }
    let frozen_count = |m: &PartitionedModel| m.params().count_where(|b| b.frozen);
    for (_, block) in model.params_mut().iter_mut() {
        block.frozen = true;
    }
    let frozen_params_before = frozen_count(model);
    let noise = if plan.epsilon0 > 0.0 {
        Some(Normal::new(0.0, plan.epsilon0).map_err(|e| IncrementalError::PlanMismatch(e.to_string()))?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generation = model.generation() + 1;

    // Sources and counts of the layer below; the backbone output is not widened.
    let mut below_sources: Vec<usize> = Vec::new();
    let mut below_counts: Vec<f64> = vec![1.0; model.feature_dim()];
    let mut layers = Vec::with_capacity(depth);
    for layer in 0..depth {
        let full = model.hidden_weight_matrix(layer);
        let bias = model.hidden_bias(layer);
        let old_width = full.cols();
        let old_in = below_counts.len();
        let new_width = ((old_width as f64 * plan.factor).round() as usize).max(old_width + 1);
        let added = new_width - old_width;
        let sources: Vec<usize> = (0..added).map(|k| k % old_width).collect();
        let in_width = old_in + below_sources.len();
        let mut w = Tensor::zeros(&[in_width, added]);
        let mut b = Tensor::zeros(&[added]);
        for (k, &src) in sources.iter().enumerate() {
            for u in 0..in_width {
                // an input row is either an original unit or a fresh copy of one
                let orig = if u < old_in { u } else { below_sources[u - old_in] };
                let weight = if orig < full.rows() { full.get(orig, src) } else { 0.0 };
                w.set(u, k, weight / below_counts[orig]);
            }
            b.data_mut()[k] = bias[src];
        }
        if let Some(dist) = &noise {
            w.data_mut().iter_mut().for_each(|v| *v += dist.sample(&mut rng));
        }
        model.push_segment(layer, w, b, Partition::Expanded(generation))?;
        let mut counts = vec![1.0; old_width];
        sources.iter().for_each(|&s| counts[s] += 1.0);
        layers.push(LayerExpansion {
            layer,
            old_width,
            new_width,
            sources: sources.clone(),
        });
        below_sources = sources;
        below_counts = counts;
    }
    let gen = model.bump_generation();
    debug_assert_eq!(gen, generation);
    Ok(WidenReport {
        generation,
        factor: plan.factor,
        epsilon0: plan.epsilon0,
        layers,
        frozen_params_before,
        frozen_params_after: frozen_count(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ForwardOptions, ModelSpec};

    fn plan(factor: f64, eps: f64, layers: usize) -> ExpansionPlan {
        ExpansionPlan {
            layers: (0..layers).collect(),
            factor,
            epsilon0: eps,
            predicted_pr1: 0.0,
            saturated: false,
        }
    }

    fn small() -> PartitionedModel {
        let mut spec = ModelSpec::desk(32, 4);
        spec.d_model = 8;
        spec.ff_dim = 8;
        spec.hidden = vec![6, 5];
        let mut m = PartitionedModel::new(spec, 3).unwrap();
        m.add_head(3, 4).unwrap();
        m
    }

    #[test]
    fn copies_reproduce_their_sources() {
        let mut m = small();
        let x = Tensor::from_vec(&[3, m.spec().input_dim()], (0..3 * m.spec().input_dim()).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
        let before = m.forward(&x, ForwardOptions::eval()).unwrap();
        let report = widen(&mut m, &plan(1.5, 0.0, 2), 1).unwrap();
        assert_eq!(m.hidden_widths(), vec![9, 8]);
        let after = m.forward(&x, ForwardOptions::eval()).unwrap();
        assert_eq!(before.logits[0], after.logits[0]);
        for (l, exp) in report.layers.iter().enumerate() {
            let a = &after.activations[l];
            for (k, &s) in exp.sources.iter().enumerate() {
                for r in 0..3 {
                    assert!((a.get(r, exp.old_width + k) - a.get(r, s)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn only_new_blocks_train() {
        let mut m = small();
        widen(&mut m, &plan(2.0, 1e-2, 2), 1).unwrap();
        for (_, b) in m.params().iter() {
            assert_eq!(!b.frozen, b.partition == Partition::Expanded(1), "{}", b.name);
        }
        assert_eq!(m.generation(), 1);
    }

    #[test]
    fn partial_plans_are_rejected() {
        let mut m = small();
        assert!(matches!(widen(&mut m, &plan(1.5, 0.0, 1), 1), Err(IncrementalError::PlanMismatch(_))));
        assert!(matches!(widen(&mut m, &plan(1.0, 0.0, 2), 1), Err(IncrementalError::PlanMismatch(_))));
    }
}
