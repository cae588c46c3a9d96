//! Contracts of the incremental trainers, the widening step and the stage
//! controller, checked against hand-written oracles.

mod common;

use common::tiny;
use common::widening::{merged_head, plan};
use prime_core::incremental::{
    begin_task, ewc_train_task, finetune, fisher_diagonal, lwf_train_task, lwf_train_task_observed, prime_controller,
    prime_controller_observed, widen, CyclePath, EwcConfig, Inputs, LwfConfig, PrimeConfig, StageData,
};
use prime_core::nn::loss::softmax_rows;
use prime_core::nn::{ForwardOptions, ModelSpec, ParamId, Partition, PartitionedModel, Tensor};
use prime_core::plasticity::PlasticityConfig;

fn values(m: &PartitionedModel) -> Vec<(ParamId, Tensor)> {
    m.params().iter().map(|(id, b)| (id, b.value.clone())).collect()
}

fn bitwise_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn same_params(a: &PartitionedModel, b: &PartitionedModel) -> bool {
    a.params().len() == b.params().len()
        && a.params().iter().zip(b.params().iter()).all(|((_, x), (_, y))| x.name == y.name && bitwise_equal(&x.value, &y.value))
}

fn features(data: &StageData) -> &Tensor {
    match &data.train.inputs {
        Inputs::Features(t) => t,
        Inputs::Raw(_) => panic!("stage was not featurized"),
    }
}

#[test]
fn lwf_without_distillation_is_finetuning() {
    let (base, stages) = tiny::based(1);
    let cfg = tiny::train_cfg(5);
    let mut a = base.clone();
    let mut b = base.clone();
    let ft = finetune(&mut a, &stages[1], &cfg, 21, 22).unwrap();
    let lwf = LwfConfig {
        lambda0: 0.0,
        ..LwfConfig::default()
    };
    let lw = lwf_train_task(&mut b, &stages[1], &lwf, &cfg, 21, 22).unwrap();
    assert!(same_params(&a, &b));
    for (x, y) in ft.logs.iter().zip(&lw.logs) {
        assert_eq!(x.ce.to_bits(), y.ce.to_bits());
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
}

#[test]
fn widening_without_noise_preserves_the_function() {
    let mut init = tiny::model(5);
    init.add_head(4, 6).unwrap();
    let mut rng = tiny::rng(7);
    let batches: Vec<Tensor> = (0..100).map(|_| tiny::random_rows(6, init.spec().input_dim(), &mut rng)).collect();
    for factor in [1.25, 1.5, 2.0] {
        let mut m = init.clone();
        let report = widen(&mut m, &plan(factor, 0.0, 2), 9).unwrap();
        let h = merged_head(&mut m, &report, 0);
        for x in &batches {
            let before = init.forward(x, ForwardOptions::eval()).unwrap();
            let after = m.forward(x, ForwardOptions::eval()).unwrap();
            assert!(before.logits[0].max_abs_diff(&after.logits[0]) == 0.0);
            let drift = before.logits[0].max_abs_diff(&after.logits[h]);
            assert!(drift <= 1e-12, "factor {factor}: merged head drifts by {drift}");
        }
    }
}

fn abs_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
    for r in 0..a.rows() {
        for c in 0..b.cols() {
            let s: f64 = (0..a.cols()).map(|k| (a.get(r, k) * b.get(k, c)).abs()).sum();
            out.set(r, c, s);
        }
    }
    out
}

fn segment(m: &PartitionedModel, layer: usize) -> Tensor {
    let seg = m.hidden_layers()[layer].segments.last().unwrap();
    m.params().value(seg.w).clone()
}

#[test]
fn noisy_widening_drift_stays_within_a_propagated_bound() {
    // Standard fixture: the desk model at initialization on a synthetic probe.
    let mut base = PartitionedModel::new(ModelSpec::desk(64, 16), 3).unwrap();
    base.add_head(5, 4).unwrap();
    let mut rng = tiny::rng(8);
    let x = tiny::random_rows(64, base.spec().input_dim(), &mut rng);
    let feats = base.backbone_features(&x).unwrap();

    let mut clean = base.clone();
    let report = widen(&mut clean, &plan(1.5, 0.0, 2), 41).unwrap();
    let mut noisy = base.clone();
    widen(&mut noisy, &plan(1.5, 1e-2, 2), 41).unwrap();
    let hc = merged_head(&mut clean, &report, 0);
    let hn = merged_head(&mut noisy, &report, 0);
    assert_eq!(hc, hn);

    // Noise matrices of the two new segments.
    let n0 = {
        let (mut n, c) = (segment(&noisy, 0), segment(&clean, 0));
        n.data_mut().iter_mut().zip(c.data()).for_each(|(v, w)| *v -= w);
        n
    };
    let w1n = segment(&noisy, 1);
    let n1 = {
        let (mut n, c) = (w1n.clone(), segment(&clean, 1));
        n.data_mut().iter_mut().zip(c.data()).for_each(|(v, w)| *v -= w);
        n
    };
    let out_c = clean.forward_features(&feats, ForwardOptions::eval()).unwrap();
    let out_n = noisy.forward_features(&feats, ForwardOptions::eval()).unwrap();

    // |Δa0| ≤ |F N0| (ReLU is 1-Lipschitz, layer 0 sees unchanged inputs)
    let da0 = abs_matmul(&feats, &n0);
    // layer 1: |Δa1| ≤ |x1 N1| + |Δx1| |W1'| where only the new inputs move
    let l0 = &report.layers[0];
    let x1 = &out_c.activations[0];
    let mut dx1 = Tensor::zeros(&[x1.rows(), x1.cols()]);
    for r in 0..x1.rows() {
        for k in 0..l0.new_width - l0.old_width {
            dx1.set(r, l0.old_width + k, da0.get(r, k));
        }
    }
    let mut da1 = abs_matmul(x1, &n1);
    da1.add_assign(&abs_matmul(&dx1, &w1n)).unwrap();
    // logits: |Δz| ≤ |Δa1| |H_new|
    let l1 = &report.layers[1];
    let head = clean.params().value(clean.heads()[hc].w).clone();
    let h_new = Tensor::from_rows(&(l1.old_width..l1.new_width).map(|j| head.row(j).to_vec()).collect::<Vec<_>>()).unwrap();
    let bound = abs_matmul(&da1, &h_new);

    let (zc, zn) = (&out_c.logits[hc], &out_n.logits[hn]);
    let mut max_drift = 0.0f64;
    for r in 0..zc.rows() {
        for c in 0..zc.cols() {
            let d = (zc.get(r, c) - zn.get(r, c)).abs();
            assert!(d <= bound.get(r, c) + 1e-12, "drift {d} exceeds bound {}", bound.get(r, c));
            max_drift = max_drift.max(d);
        }
    }
    assert!(max_drift > 0.0 && max_drift < 0.1, "max drift {max_drift}");
    // old heads ignore the new units entirely
    assert_eq!(out_n.logits[0], base.forward_features(&feats, ForwardOptions::eval()).unwrap().logits[0]);
}

#[test]
fn lwf_leaves_frozen_blocks_untouched_after_every_epoch() {
    let (base, stages) = tiny::based(2);
    let before = values(&base);
    let mut m = base.clone();
    let mut epochs = 0;
    lwf_train_task_observed(&mut m, &stages[1], &LwfConfig::default(), &tiny::train_cfg(4), 3, 4, &mut |m, _| {
        epochs += 1;
        for (id, v) in &before {
            let b = m.params().block(*id);
            if b.frozen {
                assert!(bitwise_equal(&b.value, v), "{} moved while frozen", b.name);
            }
        }
        // the retired head and the backbone must be among the frozen blocks
        assert!(m.params().iter().all(|(_, b)| !matches!(b.partition, Partition::OldHead(_) | Partition::Backbone) || b.frozen));
    })
    .unwrap();
    assert_eq!(epochs, 4);
}

fn forced_expansion() -> PrimeConfig {
    let mut cfg = PrimeConfig::default();
    cfg.lwf.stall.tau_fraction = 1e-6;
    cfg.lwf.stall.patience = 2;
    cfg.lwf.stall.min_relative_improvement = 0.99;
    cfg.plasticity = PlasticityConfig {
        trigger: 0.0,
        safe: 0.0,
        ..PlasticityConfig::default()
    };
    cfg.expansion.safe_pr1 = 0.01;
    cfg
}

#[test]
fn expanded_pass_only_moves_new_units() {
    let (base, stages) = tiny::based(3);
    let before = values(&base);
    let mut m = base.clone();
    let mut passes = Vec::new();
    let report = prime_controller_observed(&mut m, &stages[1], &forced_expansion(), &tiny::train_cfg(5), 2, 5, 6, &mut |m, path, _| {
        passes.push(path);
        for (id, v) in &before {
            let b = m.params().block(*id);
            if b.frozen || path == CyclePath::Full {
                // on the expanded pass every pre-stage block is frozen
                assert!(b.frozen, "{} trainable on the expanded pass", b.name);
                assert!(bitwise_equal(&b.value, v), "{} moved while frozen", b.name);
            }
        }
        if path == CyclePath::Full {
            for (_, b) in m.params().iter().filter(|(_, b)| !b.frozen) {
                assert!(matches!(b.partition, Partition::Expanded(1) | Partition::TaskHead(_)), "{}", b.name);
            }
        }
    })
    .unwrap();
    assert_eq!(report.path, CyclePath::Full);
    // stall after patience + 1 epochs aborts step A; step D runs in full
    assert_eq!(passes.iter().filter(|p| **p == CyclePath::Short).count(), 3);
    assert_eq!(passes.iter().filter(|p| **p == CyclePath::Full).count(), 5);
    assert!(m.params().iter().any(|(_, b)| b.partition == Partition::Expanded(1)));
    assert!(report.params_after > report.params_before);
}

#[test]
fn joint_loss_decomposes_into_its_terms() {
    // no dropout and a single batch, so the logged losses are those of the
    // starting parameters and can be recomputed here
    let raw = tiny::stages(4);
    let mut spec = tiny::spec(vec![12, 8]);
    spec.dropout = 0.0;
    let mut m = PartitionedModel::new(spec, 4).unwrap();
    prime_core::incremental::train_base(&mut m, &raw[0], &tiny::train_cfg(3), 1, 2).unwrap();
    m.set_backbone_frozen(true);
    let data = raw[1].featurize(&m).unwrap();
    let x = features(&data).clone();
    let y = data.train.labels.clone();
    let lwf = LwfConfig {
        lambda0: 1.7,
        temperature: 3.0,
        ..LwfConfig::default()
    };
    let mut cfg = tiny::train_cfg(1);
    cfg.batch_size = x.rows();
    cfg.l2 = 3e-3;

    let calib = m.forward_features(&x, ForwardOptions::eval()).unwrap().logits[0].clone();
    let mut start = m.clone();
    begin_task(&mut start, data.classes, 9).unwrap();
    let z = start.forward_features(&x, ForwardOptions::eval()).unwrap();

    let log_softmax = |row: &[f64], t: f64| -> Vec<f64> {
        let s: Vec<f64> = row.iter().map(|v| v / t).collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        s.iter().map(|v| v - lse).collect()
    };
    let n = x.rows() as f64;
    let ce: f64 = (0..x.rows()).map(|r| -log_softmax(z.logits[1].row(r), 1.0)[y[r]]).sum::<f64>() / n;
    let distill: f64 = (0..x.rows())
        .map(|r| {
            let q = log_softmax(calib.row(r), 3.0);
            let p = log_softmax(z.logits[0].row(r), 3.0);
            -q.iter().zip(&p).map(|(a, b)| a.exp() * b).sum::<f64>()
        })
        .sum::<f64>()
        / n;
    let reg: f64 = start.params().iter().filter(|(_, b)| !b.frozen).map(|(_, b)| 3e-3 * b.value.sum_squares()).sum();

    let out = lwf_train_task(&mut m, &data, &lwf, &cfg, 9, 10).unwrap();
    let log = &out.logs[0];
    assert!((log.ce - ce).abs() < 1e-12, "{} vs {ce}", log.ce);
    assert!((log.distill - distill).abs() < 1e-12, "{} vs {distill}", log.distill);
    assert!((log.reg - reg).abs() < 1e-12, "{} vs {reg}", log.reg);
    assert_eq!(log.ewc, 0.0);
    assert!((log.total - (1.7 * distill + ce + reg)).abs() < 1e-12);
}

#[test]
fn ewc_without_penalty_is_finetuning() {
    let (base, stages) = tiny::based(5);
    let cfg = tiny::train_cfg(4);
    let mut a = base.clone();
    let mut b = base.clone();
    finetune(&mut a, &stages[1], &cfg, 3, 4).unwrap();
    let ewc = EwcConfig {
        lambda: 0.0,
        ..EwcConfig::default()
    };
    ewc_train_task(&mut b, &stages[1], &ewc, &cfg, 3, 4).unwrap();
    assert!(same_params(&a, &b));
}

/// `sqrt(Σ F (θ - θ*)²)` over the blocks the Fisher estimate covers.
fn weighted_drift(before: &PartitionedModel, after: &PartitionedModel, fisher: &[(ParamId, Tensor)]) -> f64 {
    fisher
        .iter()
        .map(|&(id, ref f)| {
            let (a, b) = (after.params().value(id), before.params().value(id));
            f.data().iter().zip(a.data().iter().zip(b.data())).map(|(f, (x, y))| f * (x - y) * (x - y)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

#[test]
fn a_dominant_ewc_penalty_pins_the_shared_layers() {
    let (base, stages) = tiny::based(6);
    let cfg = tiny::train_cfg(6);
    let mut probe = base.clone();
    begin_task(&mut probe, stages[1].classes, 3).unwrap();
    let fisher = fisher_diagonal(&probe, &stages[1].train.inputs, 200, 77).unwrap();
    let mut free = base.clone();
    finetune(&mut free, &stages[1], &cfg, 3, 4).unwrap();
    let mut pinned = base.clone();
    let ewc = EwcConfig {
        lambda: 1e7,
        ..EwcConfig::default()
    };
    let out = ewc_train_task(&mut pinned, &stages[1], &ewc, &cfg, 3, 4).unwrap();
    let (d_free, d_pinned) = (weighted_drift(&base, &free, &fisher), weighted_drift(&base, &pinned, &fisher));
    assert!(d_pinned < 0.2 * d_free, "pinned drift {d_pinned} vs free {d_free}");
    // the new head still learns
    assert!(out.logs.last().unwrap().ce < out.logs[0].ce);
}

#[test]
fn controller_is_deterministic_and_short_path_is_plain_lwf() {
    let (base, stages) = tiny::based(7);
    let mut cfg = PrimeConfig::default();
    cfg.lwf.stall.patience = 50;
    let train = tiny::train_cfg(4);
    let mut a = base.clone();
    let mut b = base.clone();
    let ra = prime_controller(&mut a, &stages[1], &cfg, &train, 2, 8, 9).unwrap();
    let rb = prime_controller(&mut b, &stages[1], &cfg, &train, 2, 8, 9).unwrap();
    assert_eq!(ra, rb);
    assert!(same_params(&a, &b));
    assert_eq!(ra.path, CyclePath::Short);
    assert!(ra.checks.is_empty() && ra.expansion.is_none());
    assert!(a.params().iter().all(|(_, b)| !matches!(b.partition, Partition::Expanded(_))));
    assert_eq!(a.generation(), 0);

    let mut c = base.clone();
    lwf_train_task(&mut c, &stages[1], &cfg.lwf, &train, 8, 9).unwrap();
    assert!(same_params(&a, &c));

    // a forced expansion is just as reproducible
    let mut d = base.clone();
    let mut e = base.clone();
    let rd = prime_controller(&mut d, &stages[1], &forced_expansion(), &train, 2, 8, 9).unwrap();
    let re = prime_controller(&mut e, &stages[1], &forced_expansion(), &train, 2, 8, 9).unwrap();
    assert_eq!(rd, re);
    assert!(same_params(&d, &e));
}

#[test]
fn strong_distillation_keeps_old_outputs_closer() {
    // without dropout, so the training-mode logits can match the calibration
    let (base, stages) = tiny::based_with(8, 0.0);
    let test = match &stages[0].test.inputs {
        Inputs::Features(t) => t.clone(),
        Inputs::Raw(_) => unreachable!(),
    };
    let probs = |m: &PartitionedModel| softmax_rows(&m.forward_features(&test, ForwardOptions::eval()).unwrap().logits[0]);
    let reference = probs(&base);
    let drift = |lambda0: f64| {
        let mut m = base.clone();
        let lwf = LwfConfig {
            lambda0,
            ..LwfConfig::default()
        };
        lwf_train_task(&mut m, &stages[1], &lwf, &tiny::train_cfg(8), 3, 4).unwrap();
        let now = probs(&m);
        now.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / test.rows() as f64
    };
    let (none, strong) = (drift(0.0), drift(20.0));
    assert!(strong < 0.5 * none, "λ0 = 20 drift {strong} vs λ0 = 0 drift {none}");
}

