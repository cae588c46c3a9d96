use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which part of the partitioned model a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    /// The backbone (token embeddings + encoder). Trained only at base.
    Backbone,
    /// Shared hidden layers present before any expansion.
    Shared,
    /// Blocks added by the n-th widening.
    Expanded(u32),
    /// Heads of tasks already learned.
    OldHead(usize),
    /// The head of the task currently being learned.
    TaskHead(usize),
}

impl Partition {
    pub fn label(&self) -> String {
        match self {
            Partition::Backbone => "z".into(),
            Partition::Shared => "s".into(),
            Partition::Expanded(g) => format!("e{g}"),
            Partition::OldHead(t) => format!("o-{t}"),
            Partition::TaskHead(t) => format!("task-{t}"),
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        match label {
            "z" => Some(Partition::Backbone),
            "s" => Some(Partition::Shared),
            _ => {
                if let Some(rest) = label.strip_prefix("task-") {
                    rest.parse().ok().map(Partition::TaskHead)
                } else if let Some(rest) = label.strip_prefix("o-") {
                    rest.parse().ok().map(Partition::OldHead)
                } else if let Some(rest) = label.strip_prefix('e') {
                    rest.parse().ok().map(Partition::Expanded)
                } else {
                    None
                }
            }
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub partition: Partition,
    pub frozen: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, partition: Partition, value: Tensor) -> ParamId {
        self.blocks.push(ParamBlock {
            name: name.into(),
            partition,
            frozen: false,
            value,
        });
        ParamId(self.blocks.len() - 1)
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.blocks[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.blocks[id.0].frozen
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamBlock)> {
        self.blocks.iter().enumerate().map(|(i, b)| (ParamId(i), b))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamBlock)> {
        self.blocks.iter_mut().enumerate().map(|(i, b)| (ParamId(i), b))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, b)| !b.frozen).map(|(id, _)| id).collect()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn count_where(&self, pred: impl Fn(&ParamBlock) -> bool) -> usize {
        self.blocks.iter().filter(|b| pred(b)).map(|b| b.value.len()).sum()
    }
}

/// Gradients keyed by parameter id. Frozen blocks never appear here.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `g` into the entry for `id`, creating it if absent.
    pub fn accumulate(&mut self, id: ParamId, g: Tensor) -> Result<(), NnError> {
        match self.grads.get_mut(&id) {
            Some(existing) => existing.add_assign(&g),
            None => {
                self.grads.insert(id, g);
                Ok(())
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) -> Result<(), NnError> {
        for (id, g) in other.grads {
            self.accumulate(id, g)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.values_mut().for_each(|g| g.scale(s));
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.grads.retain(|id, _| keep(*id));
    }
}
