//! Replay-free incremental training.
//!
//! Every stage after the first attaches a new head and trains the hidden
//! stack on the new classes only. The methods differ in what they add to the
//! cross-entropy of the new head:
//!
//! | method    | extra loss                                   | structure change |
//! |-----------|----------------------------------------------|------------------|
//! | fine-tune | L2 only                                      | none             |
//! | LwF       | distillation against recorded old-head logits | none             |
//! | EWC       | diagonal-Fisher quadratic penalty             | none             |
//! | PRIME     | LwF, then widen + LwF on the new units if the probed layer is plasticity-limited | widening |

mod controller;
mod ewc;
mod lwf;
mod train;
mod widen;

pub use controller::{prime_controller, prime_controller_observed, CyclePath, ExpansionEvent, PlasticityCheck, PrimeConfig, StageReport};
pub use ewc::{ewc_train_task, fisher_diagonal, EwcConfig, EwcPenalty};
pub use lwf::{
    detect_stall, distillation_loss, lwf_train_expanded, lwf_train_task, lwf_train_task_observed, record_calibration,
    CalibrationSet, LwfConfig,
    StallConfig,
};
pub use train::{finetune, train_base, Control, EpochLog, TrainConfig, TrainOutcome};
pub use widen::{widen, LayerExpansion, WidenReport};

use thiserror::Error;

use crate::nn::{ForwardOptions, ForwardOutput, NnError, PartitionedModel, Tensor};
use crate::plasticity::PlasticityError;

#[derive(Debug, Error)]
pub enum IncrementalError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Plasticity(#[from] PlasticityError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("distillation temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("model has no existing head to preserve")]
    NoExistingHead,
    #[error("model contains no expanded blocks")]
    NotExpanded,
    #[error("expansion plan does not match the model: {0}")]
    PlanMismatch(String),
    #[error("features supplied while the backbone is trainable")]
    FeaturesWithTrainableBackbone,
}

/// Inputs either as raw feature vectors or as precomputed backbone outputs.
/// Backbone outputs are only valid while the backbone stays frozen.
#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    Raw(Tensor),
    Features(Tensor),
}

impl Inputs {
    pub fn rows(&self) -> usize {
        match self {
            Inputs::Raw(t) | Inputs::Features(t) => t.rows(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Inputs {
        match self {
            Inputs::Raw(t) => Inputs::Raw(t.select_rows(idx)),
            Inputs::Features(t) => Inputs::Features(t.select_rows(idx)),
        }
    }

    /// Converts raw inputs into backbone features of `model`.
    pub fn featurize(&self, model: &PartitionedModel) -> Result<Inputs, IncrementalError> {
        match self {
            Inputs::Raw(t) => Ok(Inputs::Features(model.backbone_features(t)?)),
            f => Ok(f.clone()),
        }
    }

    pub fn forward(&self, model: &PartitionedModel, opts: ForwardOptions) -> Result<ForwardOutput, IncrementalError> {
        match self {
            Inputs::Raw(t) => Ok(model.forward(t, opts)?),
            Inputs::Features(t) => {
                if opts.record && !model.backbone_frozen() {
                    return Err(IncrementalError::FeaturesWithTrainableBackbone);
                }
                Ok(model.forward_features(t, opts)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn featurize(&self, model: &PartitionedModel) -> Result<Batch, IncrementalError> {
        Ok(Batch {
            inputs: self.inputs.featurize(model)?,
            labels: self.labels.clone(),
        })
    }
}

/// One stage of a task stream, labels local to the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageData {
    pub classes: usize,
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

impl StageData {
    pub fn featurize(&self, model: &PartitionedModel) -> Result<StageData, IncrementalError> {
        Ok(StageData {
            classes: self.classes,
            train: self.train.featurize(model)?,
            val: self.val.featurize(model)?,
            test: self.test.featurize(model)?,
        })
    }
}

/// Retires the current heads and attaches a fresh one for `classes` classes.
/// Returns the new head's index.
pub fn begin_task(model: &mut PartitionedModel, classes: usize, head_seed: u64) -> Result<usize, IncrementalError> {
    model.retire_heads();
    Ok(model.add_head(classes, head_seed)?)
}

/// Accuracy of head `head` on a batch (eval mode).
pub fn accuracy(model: &PartitionedModel, head: usize, batch: &Batch) -> Result<f64, IncrementalError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let out = batch.inputs.forward(model, ForwardOptions::eval())?;
    Ok(crate::nn::loss::accuracy(&out.logits[head], &batch.labels))
}

/// Deterministic 64-bit mixing of a seed with a sequence of counters.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Values of every frozen block, for purity checks.
pub fn frozen_snapshot(model: &PartitionedModel) -> Vec<(crate::nn::ParamId, Tensor)> {
    model
        .params()
        .iter()
        .filter(|(_, b)| b.frozen)
        .map(|(id, b)| (id, b.value.clone()))
        .collect()
}

/// True when every block in `snapshot` is bit-identical in `model`.
pub fn frozen_unchanged(model: &PartitionedModel, snapshot: &[(crate::nn::ParamId, Tensor)]) -> bool {
    snapshot.iter().all(|(id, v)| {
        let now = model.params().value(*id);
        now.shape() == v.shape() && now.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    })
}
