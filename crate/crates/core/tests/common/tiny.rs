//! Small models and stage streams that train in well under a second.

use prime_core::incremental::{Batch, Inputs, StageData, TrainConfig};
use prime_core::ingest::Dataset;
use prime_core::nn::{ModelSpec, PartitionedModel, Tensor};
use prime_core::synth::{make_profiles, sample_dataset, stage_stream, Split, DEFAULT_SPLIT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_B: usize = 32;
pub const N_P: usize = 4;

pub fn spec(hidden: Vec<usize>) -> ModelSpec {
    let mut spec = ModelSpec::desk(N_B, N_P);
    spec.d_model = 8;
    spec.ff_dim = 8;
    spec.hidden = hidden;
    spec
}

pub fn model(seed: u64) -> PartitionedModel {
    PartitionedModel::new(spec(vec![12, 8]), seed).unwrap()
}

pub fn train_cfg(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 16,
        ..TrainConfig::default()
    };
    cfg.adam.learning_rate = 1e-2;
    cfg
}

pub fn dataset(seed: u64) -> Dataset {
    let profiles = make_profiles(7, 0.3, seed).unwrap();
    sample_dataset(&profiles, 40, N_B, N_P, seed + 1).unwrap()
}

fn batch(ds: &Dataset, s: &Split) -> Batch {
    Batch {
        inputs: Inputs::Raw(ds.tensor(&s.indices)),
        labels: s.labels.clone(),
    }
}

/// Three stages over seven classes: 3 + 2 + 2.
pub fn stages(seed: u64) -> Vec<StageData> {
    let ds = dataset(seed);
    let plan = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]];
    let stream = stage_stream(&ds, &plan, DEFAULT_SPLIT, seed).unwrap();
    stream
        .stages
        .iter()
        .map(|s| StageData {
            classes: s.classes.len(),
            train: batch(&ds, &s.train),
            val: batch(&ds, &s.val),
            test: batch(&ds, &s.test),
        })
        .collect()
}

/// A model trained on the first stage with a frozen backbone, and every
/// stage in backbone-feature form.
pub fn based(seed: u64) -> (PartitionedModel, Vec<StageData>) {
    based_with(seed, ModelSpec::desk(N_B, N_P).dropout)
}

pub fn based_with(seed: u64, dropout: f64) -> (PartitionedModel, Vec<StageData>) {
    let raw = stages(seed);
    let mut spec = spec(vec![12, 8]);
    spec.dropout = dropout;
    let mut m = PartitionedModel::new(spec, seed).unwrap();
    prime_core::incremental::train_base(&mut m, &raw[0], &train_cfg(15), 11, 12).unwrap();
    m.set_backbone_frozen(true);
    let feats = raw.iter().map(|s| s.featurize(&m).unwrap()).collect();
    (m, feats)
}

pub fn random_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
