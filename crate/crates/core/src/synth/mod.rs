//! Synthetic labeled traffic.
//!
//! Each class is a small generative model of a bi-flow: a Markov chain over
//! eight payload-size buckets, a direction-switch probability, exponential
//! inter-arrival gaps, a TCP window level and a categorical distribution over
//! payload byte values. Flows are simulated and then passed through
//! [`extract_features`], so synthetic vectors have exactly the layout of
//! ingested ones.

use std::net::{IpAddr, Ipv4Addr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{extract_features, Dataset, Endpoint, FlowKey, FlowRecord, Normalizers, PacketMeta, Protocol};

pub const SIZE_BUCKETS: usize = 8;
pub const MAX_PAYLOAD: f64 = 1460.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("similarity {0} outside [0, 1]")]
    Similarity(f64),
    #[error("samples per class must be at least 1")]
    NoSamples,
    #[error("stage plan: {0}")]
    Plan(String),
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    Split((f64, f64, f64)),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_id: usize,
    /// Row-stochastic transitions between size buckets.
    pub transitions: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    /// Probability that a packet travels the other way from its predecessor.
    pub direction_switch: f64,
    /// Rate of the exponential inter-arrival distribution, per second.
    pub arrival_rate: f64,
    pub window_mean: f64,
    pub protocol: Protocol,
    /// Flow length range in packets, inclusive.
    pub min_packets: usize,
    pub max_packets: usize,
    /// Categorical weights over the 256 byte values.
    pub byte_weights: Vec<f64>,
}

impl ClassProfile {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let row = Dirichlet::new(&[0.4; SIZE_BUCKETS]).expect("valid concentration");
        let bytes = Dirichlet::new(&[0.15; 256]).expect("valid concentration");
        let min_packets = rng.gen_range(2..12);
        Self {
            class_id: 0,
            transitions: (0..SIZE_BUCKETS).map(|_| row.sample(rng)).collect(),
            initial: row.sample(rng),
            direction_switch: rng.gen_range(0.05..0.95),
            arrival_rate: 10f64.powf(rng.gen_range(-1.0..2.5)),
            window_mean: rng.gen_range(2_000.0..65_000.0),
            protocol: if rng.gen_bool(0.75) { Protocol::Tcp } else { Protocol::Udp },
            min_packets,
            max_packets: min_packets + rng.gen_range(4..40),
            byte_weights: bytes.sample(rng),
        }
    }

    /// `(1 - s)·self + s·proto` field by field.
    fn blend(&self, proto: &ClassProfile, s: f64) -> Self {
        let mix = |a: f64, b: f64| (1.0 - s) * a + s * b;
        let mix_vec = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| mix(*x, *y)).collect::<Vec<_>>();
        let mix_len = |a: usize, b: usize| mix(a as f64, b as f64).round() as usize;
        Self {
            class_id: self.class_id,
            transitions: self.transitions.iter().zip(&proto.transitions).map(|(a, b)| normalize(mix_vec(a, b))).collect(),
            initial: normalize(mix_vec(&self.initial, &proto.initial)),
            direction_switch: mix(self.direction_switch, proto.direction_switch),
            arrival_rate: mix(self.arrival_rate, proto.arrival_rate),
            window_mean: mix(self.window_mean, proto.window_mean),
            protocol: if s < 0.5 { self.protocol } else { proto.protocol },
            min_packets: mix_len(self.min_packets, proto.min_packets),
            max_packets: mix_len(self.max_packets, proto.max_packets),
            byte_weights: normalize(mix_vec(&self.byte_weights, &proto.byte_weights)),
        }
    }

    /// The profile with its class id cleared, for comparing generative content.
    pub fn content(&self) -> ClassProfile {
        ClassProfile { class_id: 0, ..self.clone() }
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Profiles for `num_classes` classes. `similarity` pulls every class towards
/// one shared prototype: 0 draws classes independently, 1 makes them identical.
pub fn make_profiles(num_classes: usize, similarity: f64, seed: u64) -> Result<Vec<ClassProfile>, SynthError> {
    make_profiles_with(&vec![similarity; num_classes], seed)
}

/// Like [`make_profiles`] with one similarity per class, so that some classes
/// can be made fine-grained variants of the shared prototype while others
/// stay distinct. Equal entries reproduce [`make_profiles`] exactly.
pub fn make_profiles_with(similarities: &[f64], seed: u64) -> Result<Vec<ClassProfile>, SynthError> {
    if similarities.len() < 2 {
        return Err(SynthError::TooFewClasses(similarities.len()));
    }
    if let Some(&bad) = similarities.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(SynthError::Similarity(bad));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proto = ClassProfile::random(&mut rng);
    Ok(similarities
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let mut own = ClassProfile::random(&mut rng);
            own.class_id = c;
            own.blend(&proto, s)
        })
        .collect())
}

/// Total-variation distance between two transition matrices, averaged over rows.
pub fn transition_distance(a: &ClassProfile, b: &ClassProfile) -> f64 {
    let rows = a.transitions.len() as f64;
    a.transitions
        .iter()
        .zip(&b.transitions)
        .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum::<f64>()
        / rows
}

fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Simulates one bi-flow from a profile.
pub fn simulate_flow(profile: &ClassProfile, prefix_limit: usize, rng: &mut ChaCha8Rng) -> FlowRecord {
    let client = Endpoint { addr: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)), port: 40000 };
    let server = Endpoint { addr: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)), port: 443 };
    let len = rng.gen_range(profile.min_packets.max(1)..=profile.max_packets.max(profile.min_packets.max(1)));
    let gaps = Exp::new(profile.arrival_rate).expect("positive rate");
    let jitter = Normal::new(1.0, 0.1).expect("valid normal");
    let bucket_width = MAX_PAYLOAD / SIZE_BUCKETS as f64;
    let mut packets = Vec::with_capacity(len);
    let mut payload_prefix = Vec::with_capacity(prefix_limit);
    let mut state = categorical(&profile.initial, rng);
    let mut t = 0.0;
    let mut direction = 0u8;
    for i in 0..len {
        if i > 0 {
            state = categorical(&profile.transitions[state], rng);
            t += gaps.sample(rng);
            if rng.gen_bool(profile.direction_switch) {
                direction ^= 1;
            }
        }
        let size = ((state as f64 + rng.gen::<f64>()) * bucket_width).floor() as usize;
        let window = match profile.protocol {
            Protocol::Tcp => (profile.window_mean * jitter.sample(rng)).clamp(0.0, 65535.0) as u16,
            Protocol::Udp => 0,
        };
        packets.push(PacketMeta { timestamp: t, payload_len: size, tcp_window: window, direction });
        let room = prefix_limit.saturating_sub(payload_prefix.len()).min(size);
        for _ in 0..room {
            payload_prefix.push(categorical(&profile.byte_weights, rng) as u8);
        }
    }
    FlowRecord {
        key: FlowKey::new(client, server, profile.protocol),
        initiator: client,
        packets,
        payload_prefix,
    }
}

/// Independent generator for sample `index` under `seed`.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `samples_per_class` labeled vectors per profile, class-major order.
pub fn sample_dataset(
    profiles: &[ClassProfile],
    samples_per_class: usize,
    n_b: usize,
    n_p: usize,
    seed: u64,
) -> Result<Dataset, SynthError> {
    if samples_per_class == 0 {
        return Err(SynthError::NoSamples);
    }
    let norm = Normalizers::default();
    let names = profiles.iter().map(|p| format!("class-{}", p.class_id)).collect();
    let total = profiles.len() * samples_per_class;
    let rows: Vec<(usize, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let label = i / samples_per_class;
            let mut rng = sample_rng(seed, i as u64);
            let flow = simulate_flow(&profiles[label], n_b, &mut rng);
            (label, extract_features(&flow, n_b, n_p, &norm).to_row())
        })
        .collect();
    let mut ds = Dataset::new(n_b, n_p, norm, names);
    for (label, row) in rows {
        ds.push_row(Some(label), &row).expect("synthetic rows match the dataset layout");
    }
    Ok(ds)
}

/// Row indices into a dataset and their stage-local labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    /// Dataset class ids learned in this stage; local label `k` is `classes[k]`.
    pub classes: Vec<usize>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub stages: Vec<Stage>,
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.75, 0.10, 0.15);

/// Per-class train/val/test counts: train and val are rounded, test takes the rest.
pub fn split_counts(n: usize, split: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = ((n as f64) * split.0).round() as usize;
    let val = (((n as f64) * split.1).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    (train, val, n - train - val)
}

/// Splits every stage's classes into stratified train/val/test sets.
pub fn stage_stream(dataset: &Dataset, plan: &[Vec<usize>], split: (f64, f64, f64), seed: u64) -> Result<TaskStream, SynthError> {
    let (a, b, c) = split;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(SynthError::Split(split));
    }
    let by_class = dataset.indices_by_class();
    let mut seen = vec![false; by_class.len()];
    for (s, stage) in plan.iter().enumerate() {
        if stage.is_empty() {
            return Err(SynthError::Plan(format!("stage {} has no classes", s + 1)));
        }
        for &c in stage {
            if c >= by_class.len() {
                return Err(SynthError::Plan(format!("stage {} references unknown class {c}", s + 1)));
            }
            if seen[c] {
                return Err(SynthError::Plan(format!("class {c} appears in more than one stage")));
            }
            if by_class[c].is_empty() {
                return Err(SynthError::Plan(format!("class {c} has no samples")));
            }
            seen[c] = true;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(plan.len());
    for stage in plan {
        let mut train = Split::default();
        let mut val = Split::default();
        let mut test = Split::default();
        for (local, &c) in stage.iter().enumerate() {
            let mut idx = by_class[c].clone();
            shuffle(&mut idx, &mut rng);
            let (n_train, n_val, _) = split_counts(idx.len(), split);
            for (k, &i) in idx.iter().enumerate() {
                let target = if k < n_train {
                    &mut train
                } else if k < n_train + n_val {
                    &mut val
                } else {
                    &mut test
                };
                target.indices.push(i);
                target.labels.push(local);
            }
        }
        for s in [&mut train, &mut val, &mut test] {
            shuffle_pairs(s, &mut rng);
        }
        stages.push(Stage {
            classes: stage.clone(),
            train,
            val,
            test,
        });
    }
    Ok(TaskStream { stages })
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
}

fn shuffle_pairs(s: &mut Split, rng: &mut ChaCha8Rng) {
    let mut order: Vec<usize> = (0..s.len()).collect();
    shuffle(&mut order, rng);
    s.indices = order.iter().map(|&k| s.indices[k]).collect();
    s.labels = order.iter().map(|&k| s.labels[k]).collect();
}

/// Consecutive class ids grouped by stage sizes, e.g. `[10, 2, 2]`.
pub fn plan_from_sizes(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut next = 0;
    sizes
        .iter()
        .map(|&n| {
            let stage = (next..next + n).collect();
            next += n;
            stage
        })
        .collect()
}
