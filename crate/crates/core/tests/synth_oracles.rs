use prime_core::ingest::Dataset;
use prime_core::synth::{
    make_profiles, plan_from_sizes, sample_dataset, stage_stream, transition_distance, SynthError, DEFAULT_SPLIT,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Greedy Gini tree on a handful of quantile thresholds per feature.
enum Tree {
    Leaf(usize),
    Split { feature: usize, threshold: f64, left: Box<Tree>, right: Box<Tree> },
}

fn majority(labels: &[usize], classes: usize) -> usize {
    let mut counts = vec![0; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    (0..classes).max_by_key(|&c| counts[c]).unwrap()
}

fn gini(labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0.0; classes];
    labels.iter().for_each(|&l| counts[l] += 1.0);
    let n = labels.len() as f64;
    1.0 - counts.iter().map(|c| (c / n) * (c / n)).sum::<f64>()
}

fn grow(rows: &[Vec<f64>], labels: &[usize], classes: usize, depth: usize) -> Tree {
    if depth == 0 || gini(labels, classes) == 0.0 {
        return Tree::Leaf(majority(labels, classes));
    }
    let n = labels.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..rows[0].len() {
        let mut vals: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        for q in 1..16 {
            let t = vals[vals.len() * q / 16];
            let (l, r): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| rows[i][f] < t);
            if l.is_empty() || r.is_empty() {
                continue;
            }
            let ll: Vec<usize> = l.iter().map(|&i| labels[i]).collect();
            let rl: Vec<usize> = r.iter().map(|&i| labels[i]).collect();
            let score = ll.len() as f64 / n * gini(&ll, classes) + rl.len() as f64 / n * gini(&rl, classes);
            if best.is_none_or(|b| score < b.0) {
                best = Some((score, f, t));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return Tree::Leaf(majority(labels, classes));
    };
    let (l, r): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| rows[i][feature] < threshold);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (idx.iter().map(|&i| rows[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (lr, ll) = pick(&l);
    let (rr, rl) = pick(&r);
    Tree::Split {
        feature,
        threshold,
        left: Box::new(grow(&lr, &ll, classes, depth - 1)),
        right: Box::new(grow(&rr, &rl, classes, depth - 1)),
    }
}

fn predict(t: &Tree, x: &[f64]) -> usize {
    match t {
        Tree::Leaf(c) => *c,
        Tree::Split { feature, threshold, left, right } => {
            if x[*feature] < *threshold {
                predict(left, x)
            } else {
                predict(right, x)
            }
        }
    }
}

/// Bagged depth-3 trees, majority vote; test accuracy on a 75/25 split.
fn tree_ensemble_accuracy(ds: &Dataset, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let cut = order.len() * 3 / 4;
    let (train, test) = order.split_at(cut);
    let classes = ds.num_classes();
    let trees: Vec<Tree> = (0..5)
        .map(|_| {
            let boot: Vec<usize> = (0..train.len()).map(|_| train[rng.gen_range(0..train.len())]).collect();
            let rows: Vec<Vec<f64>> = boot.iter().map(|&i| ds.row(i).to_vec()).collect();
            let labels: Vec<usize> = boot.iter().map(|&i| ds.label(i).unwrap()).collect();
            grow(&rows, &labels, classes, 3)
        })
        .collect();
    let correct = test
        .iter()
        .filter(|&&i| {
            let votes: Vec<usize> = trees.iter().map(|t| predict(t, ds.row(i))).collect();
            majority(&votes, classes) == ds.label(i).unwrap()
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn independent_profiles_have_distinct_transitions() {
    let mean: f64 = (0..10)
        .map(|seed| {
            let p = make_profiles(2, 0.0, seed).unwrap();
            transition_distance(&p[0], &p[1])
        })
        .sum::<f64>()
        / 10.0;
    assert!(mean > 0.2, "mean total variation {mean}");
}

#[test]
fn distinguishable_classes_are_learnable_by_shallow_trees() {
    let profiles = make_profiles(2, 0.2, 5).unwrap();
    let ds = sample_dataset(&profiles, 500, 32, 8, 6).unwrap();
    let acc = tree_ensemble_accuracy(&ds, 7);
    assert!(acc > 0.8, "tree ensemble accuracy {acc}");
}

#[test]
fn identical_classes_are_not_learnable() {
    let profiles = make_profiles(2, 1.0, 5).unwrap();
    let ds = sample_dataset(&profiles, 400, 32, 8, 6).unwrap();
    let acc = tree_ensemble_accuracy(&ds, 7);
    assert!((acc - 0.5).abs() < 0.1, "accuracy on identical classes {acc}");
}

#[test]
fn scenario_shapes() {
    let profiles = make_profiles(14, 0.3, 1).unwrap();
    let ds = sample_dataset(&profiles, 20, 16, 4, 1).unwrap();
    let s = stage_stream(&ds, &plan_from_sizes(&[10, 2, 2]), DEFAULT_SPLIT, 2).unwrap();
    assert_eq!(s.stages.len(), 3);
    assert_eq!(s.stages[0].classes.len(), 10);
    let s = stage_stream(&ds, &plan_from_sizes(&[4, 3]), DEFAULT_SPLIT, 2).unwrap();
    assert_eq!(s.stages.len(), 2);
    assert_eq!(s.stages[1].classes, vec![4, 5, 6]);
    for stage in &s.stages {
        // 20 per class -> 15 / 2 / 3
        assert_eq!(stage.train.len(), 15 * stage.classes.len());
        assert_eq!(stage.val.len(), 2 * stage.classes.len());
        assert_eq!(stage.test.len(), 3 * stage.classes.len());
        for k in 0..stage.classes.len() {
            assert!(stage.train.labels.contains(&k) && stage.val.labels.contains(&k) && stage.test.labels.contains(&k));
        }
    }
}

#[test]
fn train_only_split() {
    let profiles = make_profiles(3, 0.3, 1).unwrap();
    let ds = sample_dataset(&profiles, 10, 16, 4, 1).unwrap();
    let s = stage_stream(&ds, &[vec![0, 1, 2]], (1.0, 0.0, 0.0), 0).unwrap();
    assert!(s.stages[0].test.is_empty());
    assert_eq!(s.stages[0].train.len(), 30);
}

#[test]
fn bad_plans_are_rejected() {
    let profiles = make_profiles(3, 0.3, 1).unwrap();
    let ds = sample_dataset(&profiles, 4, 16, 4, 1).unwrap();
    assert!(matches!(stage_stream(&ds, &[vec![0, 7]], DEFAULT_SPLIT, 0), Err(SynthError::Plan(_))));
    assert!(matches!(stage_stream(&ds, &[vec![0], vec![0]], DEFAULT_SPLIT, 0), Err(SynthError::Plan(_))));
    assert!(matches!(stage_stream(&ds, &[vec![0]], (0.5, 0.1, 0.1), 0), Err(SynthError::Split(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_a_pure_function_of_seeds(seed in 0u64..10_000, sim in 0.0f64..1.0) {
        let a = make_profiles(3, sim, seed).unwrap();
        let da = sample_dataset(&a, 3, 16, 4, seed + 1).unwrap();
        let db = sample_dataset(&make_profiles(3, sim, seed).unwrap(), 3, 16, 4, seed + 1).unwrap();
        prop_assert_eq!(&da, &db);
        let plan = vec![vec![0, 1], vec![2]];
        prop_assert_eq!(stage_stream(&da, &plan, DEFAULT_SPLIT, 5).unwrap(), stage_stream(&db, &plan, DEFAULT_SPLIT, 5).unwrap());
    }

    #[test]
    fn features_stay_in_range(seed in 0u64..10_000) {
        let p = make_profiles(2, 0.5, seed).unwrap();
        let ds = sample_dataset(&p, 4, 24, 6, seed).unwrap();
        for i in 0..ds.len() {
            let fv = ds.feature_vector(i);
            prop_assert!(fv.x_pay.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(fv.x_hdr.iter().all(|r| r[3] == 0.0 || r[3] == 1.0));
            prop_assert!(fv.x_hdr.iter().all(|r| r[2] >= 0.0 && r[2] <= 1.0));
        }
    }
}
