//! Expansion plans built by hand and the merged-head construction used to
//! check that widening preserves the network function.

use prime_core::incremental::WidenReport;
use prime_core::nn::PartitionedModel;
use prime_core::plasticity::ExpansionPlan;

pub fn plan(factor: f64, epsilon0: f64, layers: usize) -> ExpansionPlan {
    ExpansionPlan {
        layers: (0..layers).collect(),
        factor,
        epsilon0,
        predicted_pr1: 0.0,
        saturated: false,
    }
}

/// A head over the widened stack that splits each old head row evenly among
/// a unit and its copies. On a function-preserving widening its logits equal
/// those of the original head.
#[allow(clippy::needless_range_loop)]
pub fn merged_head(m: &mut PartitionedModel, report: &WidenReport, old_head: usize) -> usize {
    let old = m.heads()[old_head].clone();
    let last = report.layers.last().unwrap();
    let mut counts = vec![1.0; last.old_width];
    last.sources.iter().for_each(|&s| counts[s] += 1.0);
    let w_old = m.params().value(old.w).clone();
    let b_old = m.params().value(old.b).clone();
    let h = m.add_head(old.classes, 0).unwrap();
    let new = m.heads()[h].clone();
    let w = m.params_mut().value_mut(new.w);
    for c in 0..old.classes {
        for j in 0..last.old_width {
            w.set(j, c, w_old.get(j, c) / counts[j]);
        }
        for (k, &s) in last.sources.iter().enumerate() {
            w.set(last.old_width + k, c, w_old.get(s, c) / counts[s]);
        }
    }
    *m.params_mut().value_mut(new.b) = b_old;
    h
}
