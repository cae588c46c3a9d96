//! Binary checkpoints of a [`PartitionedModel`] plus optional optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PRIMECKP"            8 bytes
//! version               u32
//! header length         u64
//! header                JSON (model layout, block table, optimizer scalars)
//! payload               f64 values, little-endian, addressed by offsets
//! ```
//!
//! Parameter values and Adam moments live in the payload so they round-trip
//! bit for bit; partition labels and freeze flags live in the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelLayout;
use super::optim::{Moments, PlateauState};
use super::{AdamConfig, NnError, OptimizerState, ParamId, ParamStore, Partition, PartitionedModel, PlateauConfig, Tensor};

const MAGIC: &[u8; 8] = b"PRIMECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    layout: ModelLayout,
    blocks: Vec<BlockMeta>,
    optimizer: Option<OptimizerMeta>,
    payload_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockMeta {
    name: String,
    partition: String,
    frozen: bool,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    adam: AdamConfig,
    plateau: PlateauConfig,
    learning_rate: f64,
    step: u64,
    best_loss: Option<f64>,
    bad_epochs: usize,
    moments: Vec<MomentMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentMeta {
    param: usize,
    first: usize,
    second: usize,
}

pub fn to_bytes(model: &PartitionedModel, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut payload: Vec<f64> = Vec::new();
    let mut put = |t: &Tensor| {
        let offset = payload.len();
        payload.extend_from_slice(t.data());
        offset
    };
    let blocks: Vec<BlockMeta> = model
        .params()
        .iter()
        .map(|(_, b)| BlockMeta {
            name: b.name.clone(),
            partition: b.partition.label(),
            frozen: b.frozen,
            shape: b.value.shape().to_vec(),
            offset: put(&b.value),
        })
        .collect();
    let optimizer = optimizer.map(|st| OptimizerMeta {
        adam: st.adam,
        plateau: st.plateau,
        learning_rate: st.learning_rate,
        step: st.step,
        best_loss: st.scheduler.best.is_finite().then_some(st.scheduler.best),
        bad_epochs: st.scheduler.bad_epochs,
        moments: st
            .moments
            .iter()
            .map(|(id, m)| MomentMeta {
                param: id.0,
                first: put(&m.first),
                second: put(&m.second),
            })
            .collect(),
    });
    let header = Header {
        layout: model.layout(),
        blocks,
        optimizer,
        payload_len: payload.len(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(PartitionedModel, Option<OptimizerState>), NnError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("malformed header: {e}")))?;
    let raw = &body[header_len..];
    if raw.len() != header.payload_len * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, header declares {} values",
            raw.len(),
            header.payload_len
        )));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let take = |offset: usize, shape: &[usize], what: &str| -> Result<Tensor, NnError> {
        let len: usize = shape.iter().product();
        let slice = payload
            .get(offset..offset + len)
            .ok_or_else(|| bad(format!("{what}: values out of range")))?;
        if slice.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("{what}: non-finite value")));
        }
        Tensor::from_vec(shape, slice.to_vec())
    };

    let mut params = ParamStore::new();
    for meta in &header.blocks {
        let partition =
            Partition::parse(&meta.partition).ok_or_else(|| bad(format!("unknown partition `{}`", meta.partition)))?;
        let value = take(meta.offset, &meta.shape, &meta.name)?;
        let id = params.push(meta.name.clone(), partition, value);
        params.block_mut(id).frozen = meta.frozen;
    }
    let model = PartitionedModel::from_layout(header.layout, params)?;

    let optimizer = match header.optimizer {
        None => None,
        Some(meta) => {
            let mut st = OptimizerState::new(meta.adam, meta.plateau);
            st.learning_rate = meta.learning_rate;
            st.step = meta.step;
            st.scheduler = PlateauState {
                best: meta.best_loss.unwrap_or(f64::INFINITY),
                bad_epochs: meta.bad_epochs,
            };
            for m in meta.moments {
                if m.param >= model.params().len() {
                    return Err(bad(format!("moments for missing parameter {}", m.param)));
                }
                let shape = model.params().value(ParamId(m.param)).shape().to_vec();
                st.moments.insert(
                    ParamId(m.param),
                    Moments {
                        first: take(m.first, &shape, "adam first moment")?,
                        second: take(m.second, &shape, "adam second moment")?,
                    },
                );
            }
            Some(st)
        }
    };
    Ok((model, optimizer))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn save(path: &Path, model: &PartitionedModel, optimizer: Option<&OptimizerState>) -> Result<(), NnError> {
    let bytes = to_bytes(model, optimizer);
    let tmp = path.with_extension("ckpt.partial");
    let io = |e: std::io::Error| bad(format!("{}: {e}", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(PartitionedModel, Option<OptimizerState>), NnError> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adam_step, ForwardOptions, Gradients, ModelSpec};

    fn small() -> PartitionedModel {
        let mut spec = ModelSpec::desk(8, 2);
        spec.payload_token = 4;
        spec.d_model = 4;
        spec.ff_dim = 4;
        spec.hidden = vec![6, 3];
        let mut m = PartitionedModel::new(spec, 11).unwrap();
        m.add_head(3, 1).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = small();
        m.retire_heads();
        m.add_head(2, 5).unwrap();
        let mut st = OptimizerState::new(AdamConfig::default(), PlateauConfig::default());
        let mut g = Gradients::new();
        let id = m.hidden_param_ids()[0];
        g.accumulate(id, Tensor::from_vec(m.params().value(id).shape(), vec![0.1; m.params().value(id).len()]).unwrap())
            .unwrap();
        adam_step(m.params_mut(), &g, &mut st).unwrap();
        let (back, st_back) = from_bytes(&to_bytes(&m, Some(&st))).unwrap();
        assert_eq!(back, m);
        assert_eq!(st_back.unwrap(), st);
        let x = Tensor::from_vec(&[1, 16], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let a = m.forward(&x, ForwardOptions::eval()).unwrap();
        let b = back.forward(&x, ForwardOptions::eval()).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&small(), None);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
        assert!(from_bytes(b"PRIMECKP").is_err());
    }
}
