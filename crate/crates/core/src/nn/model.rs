//! The partitioned traffic classifier.
//!
//! ```text
//! x = [x_pay | x_hdr]
//!   -> payload tokens (chunks of `payload_token` bytes) and header tokens (one per packet)
//!   -> per-stream token embedding + learned positions
//!   -> encoder block
//!   -> pooling   (backbone)
//!   -> [dense -> relu -> dropout] per hidden layer (shared and expanded blocks)
//!   -> one dense head per task   (old and current task heads)
//! ```
//!
//! Hidden layers are stored as column *segments*. Segment `k` of a layer reads
//! only the input prefix `[0, in_width_k)` that existed when it was created,
//! so units added by a widening never feed units that predate it. Heads read a
//! prefix of the last hidden layer in the same way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::{EncoderBlock, EncoderCache};
use super::init::glorot_uniform;
use super::layers::{dense_backward, dense_forward, dropout_mask, hadamard, relu, relu_backward};
use super::{Gradients, NnError, ParamId, ParamStore, Partition, Tensor};

/// Width of one header token: payload length, window, inter-arrival, direction.
pub const HEADER_FIELDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean of payload-token outputs concatenated with the mean of
    /// header-token outputs; feature width `2 * d_model`.
    StreamConcat,
    /// Mean over all tokens; feature width `d_model`.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_b: usize,
    pub n_p: usize,
    pub payload_token: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub pooling: Pooling,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::desk(784, 32)
    }
}

impl ModelSpec {
    /// Laptop-scale configuration: attention dim 64, 2 heads, hidden [64, 32].
    pub fn desk(n_b: usize, n_p: usize) -> Self {
        Self {
            n_b,
            n_p,
            payload_token: 16,
            d_model: 64,
            heads: 2,
            ff_dim: 128,
            pooling: Pooling::StreamConcat,
            hidden: vec![64, 32],
            dropout: 0.2,
        }
    }

    /// Full-size configuration: 912-dim encoder, 2 heads, linear stack
    /// [912, 256, 64, N].
    pub fn full(n_b: usize, n_p: usize) -> Self {
        Self {
            n_b,
            n_p,
            payload_token: 16,
            d_model: 912,
            heads: 2,
            ff_dim: 912,
            pooling: Pooling::Mean,
            hidden: vec![256, 64],
            dropout: 0.2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.n_b + HEADER_FIELDS * self.n_p
    }

    pub fn payload_tokens(&self) -> usize {
        self.n_b.div_ceil(self.payload_token)
    }

    pub fn seq_len(&self) -> usize {
        self.payload_tokens() + self.n_p
    }

    pub fn feature_dim(&self) -> usize {
        match self.pooling {
            Pooling::StreamConcat => 2 * self.d_model,
            Pooling::Mean => self.d_model,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let mut problems = Vec::new();
        if self.n_b == 0 || self.n_p == 0 {
            problems.push("n_b and n_p must be positive".to_string());
        }
        if self.payload_token == 0 {
            problems.push("payload_token must be positive".to_string());
        }
        if self.d_model == 0 || self.ff_dim == 0 {
            problems.push("d_model and ff_dim must be positive".to_string());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            problems.push(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            problems.push("hidden stack must be non-empty with positive widths".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NnError::InvalidSpec(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Relu,
    Dropout,
    AttentionEncoder,
    SoftmaxHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub dropout_rate: f64,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Backbone {
    pay_w: ParamId,
    pay_b: ParamId,
    hdr_w: ParamId,
    hdr_b: ParamId,
    pos: ParamId,
    encoder: EncoderBlock,
}

#[derive(Debug, Clone)]
struct BackboneCache {
    pay_tokens: Tensor,
    hdr_tokens: Tensor,
    enc: EncoderCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub w: ParamId,
    pub b: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub segments: Vec<Segment>,
}

impl HiddenLayer {
    pub fn width(&self) -> usize {
        self.segments.iter().map(|s| s.out_width).sum()
    }

    pub fn in_width(&self) -> usize {
        self.segments.iter().map(|s| s.in_width).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub task: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub in_width: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub train: bool,
    /// Seeds the dropout masks; nothing else is random in a forward pass.
    pub seed: u64,
    /// Keeps the intermediate values needed by [`PartitionedModel::backward`].
    pub record: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            record: false,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            seed,
            record: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Tape {
    structure: u64,
    backbone: Option<Vec<BackboneCache>>,
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    masks: Vec<Option<Tensor>>,
    last: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One `batch x classes` tensor per attached head, in task order.
    pub logits: Vec<Tensor>,
    /// Post-ReLU (pre-dropout) output of every hidden layer.
    pub activations: Vec<Tensor>,
    /// Backbone output the hidden stack consumed.
    pub features: Tensor,
    tape: Option<Tape>,
}

impl ForwardOutput {
    pub fn has_trace(&self) -> bool {
        self.tape.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedModel {
    spec: ModelSpec,
    params: ParamStore,
    backbone: Backbone,
    hidden: Vec<HiddenLayer>,
    heads: Vec<Head>,
    generation: u32,
    structure: u64,
}

impl PartitionedModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = spec.d_model;
        let z = Partition::Backbone;
        let pay_w = params.push("embed.payload.w", z, glorot_uniform(spec.payload_token, d, &mut rng));
        let pay_b = params.push("embed.payload.b", z, Tensor::zeros(&[d]));
        let hdr_w = params.push("embed.header.w", z, glorot_uniform(HEADER_FIELDS, d, &mut rng));
        let hdr_b = params.push("embed.header.b", z, Tensor::zeros(&[d]));
        let pos = params.push("embed.position", z, glorot_uniform(spec.seq_len(), d, &mut rng));
        let encoder = EncoderBlock::new(&mut params, z, d, spec.heads, spec.ff_dim, &mut rng)?;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        let mut in_width = spec.feature_dim();
        for (l, &width) in spec.hidden.iter().enumerate() {
            let w = params.push(format!("hidden.{l}.seg0.w"), Partition::Shared, glorot_uniform(in_width, width, &mut rng));
            let b = params.push(format!("hidden.{l}.seg0.b"), Partition::Shared, Tensor::zeros(&[width]));
            hidden.push(HiddenLayer {
                segments: vec![Segment {
                    w,
                    b,
                    in_width,
                    out_width: width,
                }],
            });
            in_width = width;
        }
        Ok(Self {
            spec,
            params,
            backbone: Backbone {
                pay_w,
                pay_b,
                hdr_w,
                hdr_b,
                pos,
                encoder,
            },
            hidden,
            heads: Vec::new(),
            generation: 0,
            structure: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn hidden_layers(&self) -> &[HiddenLayer] {
        &self.hidden
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    /// Number of widenings applied so far.
    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn last_width(&self) -> usize {
        self.hidden.last().map_or(self.feature_dim(), HiddenLayer::width)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(HiddenLayer::width).collect()
    }

    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        let b = &self.backbone;
        let mut ids = vec![b.pay_w, b.pay_b, b.hdr_w, b.hdr_b, b.pos];
        ids.extend(b.encoder.param_ids());
        ids
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_param_ids().iter().all(|&id| self.params.is_frozen(id))
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        for id in self.backbone_param_ids() {
            self.params.block_mut(id).frozen = frozen;
        }
    }

    /// Attaches a fresh head reading the full current width of the last
    /// hidden layer. Returns its index.
    pub fn add_head(&mut self, classes: usize, seed: u64) -> Result<usize, NnError> {
        if classes == 0 {
            return Err(NnError::InvalidSpec("head with zero classes".into()));
        }
        let task = self.heads.len();
        let in_width = self.last_width();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let part = Partition::TaskHead(task);
        let w = self.params.push(format!("head.{task}.w"), part, glorot_uniform(in_width, classes, &mut rng));
        let b = self.params.push(format!("head.{task}.b"), part, Tensor::zeros(&[classes]));
        self.heads.push(Head {
            task,
            w,
            b,
            in_width,
            classes,
        });
        self.structure += 1;
        Ok(task)
    }

    /// Relabels every task head as an old head and freezes it.
    pub fn retire_heads(&mut self) {
        for h in &self.heads {
            for id in [h.w, h.b] {
                let block = self.params.block_mut(id);
                block.partition = Partition::OldHead(h.task);
                block.frozen = true;
            }
        }
    }

    /// Ids of the blocks belonging to hidden layers, in layer/segment order.
    pub fn hidden_param_ids(&self) -> Vec<ParamId> {
        self.hidden
            .iter()
            .flat_map(|l| l.segments.iter().flat_map(|s| [s.w, s.b]))
            .collect()
    }

    /// The full `in_width x width` weight matrix of hidden layer `layer`,
    /// with zeros where a segment does not read an input.
    pub fn hidden_weight_matrix(&self, layer: usize) -> Tensor {
        let l = &self.hidden[layer];
        let mut full = Tensor::zeros(&[l.in_width(), l.width()]);
        let mut col = 0;
        for seg in &l.segments {
            let w = self.params.value(seg.w);
            for r in 0..seg.in_width {
                for c in 0..seg.out_width {
                    full.set(r, col + c, w.get(r, c));
                }
            }
            col += seg.out_width;
        }
        full
    }

    pub fn hidden_bias(&self, layer: usize) -> Vec<f64> {
        self.hidden[layer]
            .segments
            .iter()
            .flat_map(|s| self.params.value(s.b).data().to_vec())
            .collect()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let s = &self.spec;
        let mut out = vec![LayerSpec {
            kind: LayerKind::AttentionEncoder,
            in_dim: s.input_dim(),
            out_dim: s.feature_dim(),
            dropout_rate: 0.0,
            heads: s.heads,
        }];
        let mut in_dim = s.feature_dim();
        for l in &self.hidden {
            let w = l.width();
            out.push(LayerSpec { kind: LayerKind::Dense, in_dim, out_dim: w, dropout_rate: 0.0, heads: 0 });
            out.push(LayerSpec { kind: LayerKind::Relu, in_dim: w, out_dim: w, dropout_rate: 0.0, heads: 0 });
            out.push(LayerSpec { kind: LayerKind::Dropout, in_dim: w, out_dim: w, dropout_rate: s.dropout, heads: 0 });
            in_dim = w;
        }
        for h in &self.heads {
            out.push(LayerSpec {
                kind: LayerKind::SoftmaxHead,
                in_dim: h.in_width,
                out_dim: h.classes,
                dropout_rate: 0.0,
                heads: 0,
            });
        }
        out
    }

    // ---- structural edits used by widening ---------------------------------

    pub(crate) fn push_segment(&mut self, layer: usize, w: Tensor, b: Tensor, partition: Partition) -> Result<(), NnError> {
        let in_width = w.rows();
        let out_width = w.cols();
        if b.len() != out_width {
            return Err(NnError::Shape("segment bias width".into()));
        }
        let expected_in = if layer == 0 { self.feature_dim() } else { self.hidden[layer - 1].width() };
        if in_width != expected_in {
            return Err(NnError::Shape(format!(
                "segment for layer {layer} reads {in_width} inputs, layer input is {expected_in}"
            )));
        }
        let k = self.hidden[layer].segments.len();
        let w_id = self.params.push(format!("hidden.{layer}.seg{k}.w"), partition, w);
        let b_id = self.params.push(format!("hidden.{layer}.seg{k}.b"), partition, b);
        self.hidden[layer].segments.push(Segment {
            w: w_id,
            b: b_id,
            in_width,
            out_width,
        });
        self.structure += 1;
        Ok(())
    }

    pub(crate) fn bump_generation(&mut self) -> u32 {
        self.generation += 1;
        self.structure += 1;
        self.generation
    }

    // ---- forward ------------------------------------------------------------

    fn check_batch(&self, batch: &Tensor) -> Result<(), NnError> {
        if batch.shape().len() != 2 || batch.cols() != self.spec.input_dim() {
            return Err(NnError::Shape(format!(
                "batch of shape {:?}, model expects width {}",
                batch.shape(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    fn backbone_sample(&self, x: &[f64]) -> Result<(Vec<f64>, BackboneCache), NnError> {
        let s = &self.spec;
        let p = &self.params;
        let bb = &self.backbone;
        let tp = s.payload_tokens();
        let mut pay = vec![0.0; tp * s.payload_token];
        pay[..s.n_b].copy_from_slice(&x[..s.n_b]);
        let pay_tokens = Tensor::from_vec(&[tp, s.payload_token], pay)?;
        let hdr_tokens = Tensor::from_vec(&[s.n_p, HEADER_FIELDS], x[s.n_b..].to_vec())?;
        let ep = dense_forward(&pay_tokens, p.value(bb.pay_w), p.value(bb.pay_b))?;
        let eh = dense_forward(&hdr_tokens, p.value(bb.hdr_w), p.value(bb.hdr_b))?;
        let mut seq_data = ep.into_data();
        seq_data.extend(eh.into_data());
        let mut seq = Tensor::from_vec(&[s.seq_len(), s.d_model], seq_data)?;
        seq.add_assign(p.value(bb.pos))?;
        let (out, enc) = bb.encoder.forward(p, &seq)?;
        let feat = self.pool(&out);
        Ok((
            feat,
            BackboneCache {
                pay_tokens,
                hdr_tokens,
                enc,
            },
        ))
    }

    fn pool(&self, out: &Tensor) -> Vec<f64> {
        let s = &self.spec;
        let d = s.d_model;
        let tp = s.payload_tokens();
        let mean = |rows: std::ops::Range<usize>| {
            let n = rows.len() as f64;
            let mut acc = vec![0.0; d];
            for r in rows {
                acc.iter_mut().zip(out.row(r)).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        };
        match s.pooling {
            Pooling::StreamConcat => {
                let mut f = mean(0..tp);
                f.extend(mean(tp..s.seq_len()));
                f
            }
            Pooling::Mean => mean(0..s.seq_len()),
        }
    }

    fn pool_backward(&self, dfeat: &[f64]) -> Tensor {
        let s = &self.spec;
        let d = s.d_model;
        let tp = s.payload_tokens();
        let len = s.seq_len();
        let mut dout = Tensor::zeros(&[len, d]);
        for r in 0..len {
            let row = dout.row_mut(r);
            match s.pooling {
                Pooling::StreamConcat => {
                    let (src, n) = if r < tp { (&dfeat[..d], tp) } else { (&dfeat[d..], s.n_p) };
                    row.iter_mut().zip(src).for_each(|(o, g)| *o = g / n as f64);
                }
                Pooling::Mean => row.iter_mut().zip(dfeat).for_each(|(o, g)| *o = g / len as f64),
            }
        }
        dout
    }

    fn run_backbone(&self, batch: &Tensor, keep: bool) -> Result<(Tensor, Option<Vec<BackboneCache>>), NnError> {
        self.check_batch(batch)?;
        let results: Vec<(Vec<f64>, BackboneCache)> = (0..batch.rows())
            .into_par_iter()
            .map(|i| self.backbone_sample(batch.row(i)))
            .collect::<Result<_, _>>()?;
        let mut data = Vec::with_capacity(batch.rows() * self.feature_dim());
        let mut caches = Vec::with_capacity(if keep { results.len() } else { 0 });
        for (f, c) in results {
            data.extend(f);
            if keep {
                caches.push(c);
            }
        }
        let features = Tensor::from_vec(&[batch.rows(), self.feature_dim()], data)?;
        Ok((features, keep.then_some(caches)))
    }

    /// Backbone output for a batch (eval mode, nothing recorded).
    pub fn backbone_features(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.run_backbone(batch, false)?.0)
    }

    pub fn forward(&self, batch: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput, NnError> {
        let (features, caches) = self.run_backbone(batch, opts.record)?;
        let mut out = self.forward_features(&features, opts)?;
        if let Some(tape) = out.tape.as_mut() {
            tape.backbone = caches;
        }
        Ok(out)
    }

    /// Runs the hidden stack and heads on precomputed backbone features.
    /// A trace recorded this way cannot propagate into the backbone.
    pub fn forward_features(&self, features: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput, NnError> {
        if features.shape().len() != 2 || features.cols() != self.feature_dim() {
            return Err(NnError::Shape(format!(
                "features of shape {:?}, expected width {}",
                features.shape(),
                self.feature_dim()
            )));
        }
        let n = features.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut x = features.clone();
        let mut inputs = Vec::with_capacity(self.hidden.len());
        let mut pres = Vec::with_capacity(self.hidden.len());
        let mut masks = Vec::with_capacity(self.hidden.len());
        let mut activations = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let mut parts = Vec::with_capacity(layer.segments.len());
            for seg in &layer.segments {
                let xin = if seg.in_width == x.cols() { x.clone() } else { x.columns(0..seg.in_width) };
                parts.push(dense_forward(&xin, self.params.value(seg.w), self.params.value(seg.b))?);
            }
            let pre = Tensor::hcat(&parts)?;
            let act = relu(&pre);
            let (post, mask) = if opts.train && self.spec.dropout > 0.0 {
                let m = dropout_mask(n, act.cols(), self.spec.dropout, &mut rng);
                (hadamard(&act, &m), Some(m))
            } else {
                (act.clone(), None)
            };
            if opts.record {
                inputs.push(x);
                pres.push(pre);
                masks.push(mask);
            }
            activations.push(act);
            x = post;
        }
        let mut logits = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let xin = if h.in_width == x.cols() { x.clone() } else { x.columns(0..h.in_width) };
            logits.push(dense_forward(&xin, self.params.value(h.w), self.params.value(h.b))?);
        }
        for l in &logits {
            if !l.is_finite() {
                return Err(NnError::NonFinite("logits".into()));
            }
        }
        let tape = opts.record.then_some(Tape {
            structure: self.structure,
            backbone: None,
            inputs,
            pre: pres,
            masks,
            last: x,
        });
        Ok(ForwardOutput {
            logits,
            activations,
            features: features.clone(),
            tape,
        })
    }

    // ---- backward -----------------------------------------------------------

    /// Gradients of `Σ_h <head_grads[h], logits[h]>` with respect to every
    /// unfrozen parameter. `None` entries contribute nothing.
    pub fn backward(&self, out: &ForwardOutput, head_grads: &[Option<Tensor>]) -> Result<Gradients, NnError> {
        let tape = out.tape.as_ref().ok_or(NnError::MissingTrace)?;
        if tape.structure != self.structure {
            return Err(NnError::StaleTrace);
        }
        if head_grads.len() != self.heads.len() {
            return Err(NnError::Shape(format!(
                "{} head gradients for {} heads",
                head_grads.len(),
                self.heads.len()
            )));
        }
        let n = tape.last.rows();
        let mut grads = Gradients::new();
        let mut dlast = Tensor::zeros(&[n, self.last_width()]);
        for (h, g) in self.heads.iter().zip(head_grads) {
            let Some(g) = g else { continue };
            if g.shape() != [n, h.classes] {
                return Err(NnError::Shape(format!(
                    "head {} gradient {:?}, expected [{n}, {}]",
                    h.task,
                    g.shape(),
                    h.classes
                )));
            }
            let xin = tape.last.columns(0..h.in_width);
            let gd = dense_backward(&xin, self.params.value(h.w), g)?;
            if !self.params.is_frozen(h.w) {
                grads.accumulate(h.w, gd.dw)?;
            }
            if !self.params.is_frozen(h.b) {
                grads.accumulate(h.b, gd.db)?;
            }
            dlast.add_into_columns(0, &gd.dx);
        }

        let backbone_trainable = !self.backbone_frozen();
        let mut dpost = dlast;
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let dact = match &tape.masks[l] {
                Some(m) => hadamard(&dpost, m),
                None => dpost,
            };
            let dpre = relu_backward(&tape.pre[l], &dact);
            let x = &tape.inputs[l];
            let need_dx = l > 0 || backbone_trainable;
            let mut dx = Tensor::zeros(&[n, x.cols()]);
            let mut col = 0;
            for seg in &layer.segments {
                let dseg = dpre.columns(col..col + seg.out_width);
                col += seg.out_width;
                let xin = x.columns(0..seg.in_width);
                if !self.params.is_frozen(seg.w) {
                    grads.accumulate(seg.w, xin.matmul_tn(&dseg)?)?;
                }
                if !self.params.is_frozen(seg.b) {
                    grads.accumulate(seg.b, dseg.sum_rows())?;
                }
                if need_dx {
                    dx.add_into_columns(0, &dseg.matmul_nt(self.params.value(seg.w))?);
                }
            }
            dpost = dx;
        }

        if backbone_trainable {
            let caches = tape.backbone.as_ref().ok_or(NnError::MissingTrace)?;
            let bb = self.backbone_grads(caches, &dpost)?;
            for (id, g) in bb {
                if !self.params.is_frozen(id) {
                    grads.accumulate(id, g)?;
                }
            }
        }
        Ok(grads)
    }

    fn backbone_grads(&self, caches: &[BackboneCache], dfeat: &Tensor) -> Result<Vec<(ParamId, Tensor)>, NnError> {
        const CHUNK: usize = 8;
        let ids = self.backbone_param_ids();
        let chunk_sums: Vec<Vec<Tensor>> = caches
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut acc: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(self.params.value(id).shape())).collect();
                for (j, cache) in chunk.iter().enumerate() {
                    let sample = ci * CHUNK + j;
                    for (slot, (id, g)) in self.backbone_sample_backward(cache, dfeat.row(sample))?.into_iter().enumerate() {
                        debug_assert_eq!(id, ids[slot]);
                        acc[slot].add_assign(&g)?;
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_, NnError>>()?;
        let mut total: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(self.params.value(id).shape())).collect();
        for sums in chunk_sums {
            for (t, s) in total.iter_mut().zip(&sums) {
                t.add_assign(s)?;
            }
        }
        Ok(ids.into_iter().zip(total).collect())
    }

    /// Per-sample backbone gradients, ordered as [`Self::backbone_param_ids`].
    fn backbone_sample_backward(&self, cache: &BackboneCache, dfeat: &[f64]) -> Result<Vec<(ParamId, Tensor)>, NnError> {
        let s = &self.spec;
        let bb = &self.backbone;
        let tp = s.payload_tokens();
        let dout = self.pool_backward(dfeat);
        let (dseq, enc_grads) = bb.encoder.backward(&self.params, &cache.enc, &dout)?;
        let dep = Tensor::from_vec(&[tp, s.d_model], dseq.data()[..tp * s.d_model].to_vec())?;
        let deh = Tensor::from_vec(&[s.n_p, s.d_model], dseq.data()[tp * s.d_model..].to_vec())?;
        let gp = cache.pay_tokens.matmul_tn(&dep)?;
        let gh = cache.hdr_tokens.matmul_tn(&deh)?;
        let mut out = vec![
            (bb.pay_w, gp),
            (bb.pay_b, dep.sum_rows()),
            (bb.hdr_w, gh),
            (bb.hdr_b, deh.sum_rows()),
            (bb.pos, dseq),
        ];
        let enc_ids = bb.encoder.param_ids();
        let mut enc_map: Vec<Option<Tensor>> = vec![None; enc_ids.len()];
        for (id, g) in enc_grads {
            let slot = enc_ids.iter().position(|&e| e == id).expect("encoder id");
            enc_map[slot] = Some(g);
        }
        for (id, g) in enc_ids.into_iter().zip(enc_map) {
            out.push((id, g.expect("encoder gradient")));
        }
        Ok(out)
    }

    // ---- serialization support ---------------------------------------------

    pub(crate) fn layout(&self) -> ModelLayout {
        ModelLayout {
            spec: self.spec.clone(),
            backbone: self.backbone.clone(),
            hidden: self.hidden.clone(),
            heads: self.heads.clone(),
            generation: self.generation,
            structure: self.structure,
        }
    }

    pub(crate) fn from_layout(layout: ModelLayout, params: ParamStore) -> Result<Self, NnError> {
        layout.spec.validate()?;
        let model = Self {
            spec: layout.spec,
            params,
            backbone: layout.backbone,
            hidden: layout.hidden,
            heads: layout.heads,
            generation: layout.generation,
            structure: layout.structure,
        };
        let n = model.params.len();
        let all_ids = model
            .backbone_param_ids()
            .into_iter()
            .chain(model.hidden_param_ids())
            .chain(model.heads.iter().flat_map(|h| [h.w, h.b]));
        for id in all_ids {
            if id.0 >= n {
                return Err(NnError::Checkpoint(format!("layout references missing block {}", id.0)));
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ModelLayout {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub hidden: Vec<HiddenLayer>,
    pub heads: Vec<Head>,
    pub generation: u32,
    pub structure: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            n_b: 6,
            n_p: 3,
            payload_token: 4,
            d_model: 4,
            heads: 2,
            ff_dim: 6,
            pooling: Pooling::StreamConcat,
            hidden: vec![5, 3],
            dropout: 0.2,
        }
    }

    fn batch(rows: usize, width: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[rows, width], (0..rows * width).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_follow_spec() {
        let mut m = PartitionedModel::new(tiny_spec(), 1).unwrap();
        m.add_head(3, 2).unwrap();
        m.add_head(2, 3).unwrap();
        let x = batch(5, m.spec().input_dim(), 4);
        let out = m.forward(&x, ForwardOptions::eval()).unwrap();
        assert_eq!(out.logits.len(), 2);
        assert_eq!(out.logits[0].shape(), &[5, 3]);
        assert_eq!(out.logits[1].shape(), &[5, 2]);
        assert_eq!(out.activations[0].shape(), &[5, 5]);
        assert_eq!(out.features.shape(), &[5, 8]);
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let m = PartitionedModel::new(tiny_spec(), 1).unwrap();
        let x = batch(2, 7, 1);
        assert!(matches!(m.forward(&x, ForwardOptions::eval()), Err(NnError::Shape(_))));
    }

    #[test]
    fn backward_without_trace_is_an_error() {
        let mut m = PartitionedModel::new(tiny_spec(), 1).unwrap();
        m.add_head(2, 1).unwrap();
        let x = batch(2, m.spec().input_dim(), 1);
        let out = m.forward(&x, ForwardOptions::eval()).unwrap();
        assert_eq!(m.backward(&out, &[None]).unwrap_err(), NnError::MissingTrace);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut m = PartitionedModel::new(tiny_spec(), 1).unwrap();
        m.add_head(2, 1).unwrap();
        let x = batch(2, m.spec().input_dim(), 1);
        let out = m.forward(&x, ForwardOptions::train(0)).unwrap();
        m.add_head(2, 2).unwrap();
        assert_eq!(m.backward(&out, &[None, None]).unwrap_err(), NnError::StaleTrace);
    }

    #[test]
    fn dropout_only_in_train_mode_and_seeded() {
        let mut m = PartitionedModel::new(tiny_spec(), 1).unwrap();
        m.add_head(2, 1).unwrap();
        let x = batch(4, m.spec().input_dim(), 9);
        let e1 = m.forward(&x, ForwardOptions::eval()).unwrap();
        let e2 = m.forward(&x, ForwardOptions { train: false, seed: 77, record: false }).unwrap();
        assert_eq!(e1.logits, e2.logits);
        let t1 = m.forward(&x, ForwardOptions::train(5)).unwrap();
        let t2 = m.forward(&x, ForwardOptions::train(5)).unwrap();
        let t3 = m.forward(&x, ForwardOptions::train(6)).unwrap();
        assert_eq!(t1.logits, t2.logits);
        assert_ne!(t1.logits, t3.logits);
    }

    #[test]
    fn frozen_blocks_receive_no_gradient() {
        let mut m = PartitionedModel::new(tiny_spec(), 1).unwrap();
        m.add_head(2, 1).unwrap();
        m.set_backbone_frozen(true);
        let x = batch(3, m.spec().input_dim(), 2);
        let out = m.forward(&x, ForwardOptions::train(1)).unwrap();
        let g = Tensor::from_vec(&[3, 2], vec![0.3, -0.3, 0.1, 0.2, -0.5, 0.5]).unwrap();
        let grads = m.backward(&out, &[Some(g)]).unwrap();
        for id in m.backbone_param_ids() {
            assert!(!grads.contains(id));
        }
        for id in m.hidden_param_ids() {
            assert!(grads.contains(id));
        }
    }

    #[test]
    fn hidden_weight_matrix_matches_single_segment() {
        let m = PartitionedModel::new(tiny_spec(), 3).unwrap();
        let seg = &m.hidden_layers()[1].segments[0];
        assert_eq!(&m.hidden_weight_matrix(1), m.params().value(seg.w));
    }

    #[test]
    fn full_profile_has_a_912_wide_stack() {
        let s = ModelSpec::full(784, 32);
        assert_eq!(s.input_dim(), 912);
        assert_eq!(s.feature_dim(), 912);
        assert_eq!(s.hidden, vec![256, 64]);
        s.validate().unwrap();
    }
}
