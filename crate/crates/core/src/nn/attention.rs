//! One pre-norm transformer encoder block:
//!
//! ```text
//! h   = x + MHA(LN1(x))
//! out = h + W2·relu(W1·LN2(h) + b1) + b2
//! ```
//!
//! Operates on a single sequence (`len x d_model`). Batches are handled by the
//! caller, one sequence per sample.

use rand::Rng;

use super::init::glorot_uniform;
use super::layers::{dense_backward, dense_forward, relu, relu_backward};
use serde::{Deserialize, Serialize};

use super::loss::softmax_in_place;
use super::{NnError, ParamId, ParamStore, Partition, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    ids: EncoderIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct EncoderIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    x: Tensor,
    xhat1: Tensor,
    inv1: Vec<f64>,
    y1: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    o: Tensor,
    xhat2: Tensor,
    inv2: Vec<f64>,
    z: Tensor,
    m_pre: Tensor,
    m_act: Tensor,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        partition: Partition,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(NnError::InvalidSpec(format!(
                "{heads} heads do not divide d_model {d_model}"
            )));
        }
        let d = d_model;
        let ones = Tensor::from_vec(&[d], vec![1.0; d])?;
        let mut p = |name: &str, t: Tensor| params.push(format!("encoder.{name}"), partition, t);
        let ids = EncoderIds {
            ln1_g: p("ln1.gain", ones.clone()),
            ln1_b: p("ln1.bias", Tensor::zeros(&[d])),
            wq: p("attn.wq", glorot_uniform(d, d, rng)),
            bq: p("attn.bq", Tensor::zeros(&[d])),
            wk: p("attn.wk", glorot_uniform(d, d, rng)),
            bk: p("attn.bk", Tensor::zeros(&[d])),
            wv: p("attn.wv", glorot_uniform(d, d, rng)),
            bv: p("attn.bv", Tensor::zeros(&[d])),
            wo: p("attn.wo", glorot_uniform(d, d, rng)),
            bo: p("attn.bo", Tensor::zeros(&[d])),
            ln2_g: p("ln2.gain", ones),
            ln2_b: p("ln2.bias", Tensor::zeros(&[d])),
            w1: p("mlp.w1", glorot_uniform(d, ff_dim, rng)),
            b1: p("mlp.b1", Tensor::zeros(&[ff_dim])),
            w2: p("mlp.w2", glorot_uniform(ff_dim, d, rng)),
            b2: p("mlp.b2", Tensor::zeros(&[d])),
        };
        Ok(Self {
            d_model,
            heads,
            ff_dim,
            ids,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let i = &self.ids;
        vec![
            i.ln1_g, i.ln1_b, i.wq, i.bq, i.wk, i.bk, i.wv, i.bv, i.wo, i.bo, i.ln2_g, i.ln2_b,
            i.w1, i.b1, i.w2, i.b2,
        ]
    }

    /// Ids of the query/key/value/output projections, in that order.
    pub fn projection_ids(&self) -> [ParamId; 4] {
        [self.ids.wq, self.ids.wk, self.ids.wv, self.ids.wo]
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<(Tensor, EncoderCache), NnError> {
        if x.cols() != self.d_model {
            return Err(NnError::Shape(format!(
                "encoder expects width {}, got {}",
                self.d_model,
                x.cols()
            )));
        }
        let p = |id: ParamId| params.value(id);
        let ids = &self.ids;
        let (xhat1, inv1, y1) = layer_norm(x, p(ids.ln1_g), p(ids.ln1_b));
        let q = dense_forward(&y1, p(ids.wq), p(ids.bq))?;
        let k = dense_forward(&y1, p(ids.wk), p(ids.bk))?;
        let v = dense_forward(&y1, p(ids.wv), p(ids.bv))?;
        let (o, probs) = self.attend(&q, &k, &v)?;
        let a = dense_forward(&o, p(ids.wo), p(ids.bo))?;
        let mut h = x.clone();
        h.add_assign(&a)?;
        let (xhat2, inv2, z) = layer_norm(&h, p(ids.ln2_g), p(ids.ln2_b));
        let m_pre = dense_forward(&z, p(ids.w1), p(ids.b1))?;
        let m_act = relu(&m_pre);
        let m = dense_forward(&m_act, p(ids.w2), p(ids.b2))?;
        let mut out = h;
        out.add_assign(&m)?;
        Ok((
            out,
            EncoderCache {
                x: x.clone(),
                xhat1,
                inv1,
                y1,
                q,
                k,
                v,
                probs,
                o,
                xhat2,
                inv2,
                z,
                m_pre,
                m_act,
            },
        ))
    }

    /// Multi-head scaled dot-product attention. Returns the concatenated head
    /// outputs and the per-head attention matrices.
    pub fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        let len = q.rows();
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Tensor::zeros(&[len, self.d_model]);
        let mut probs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let cols = head * dh..(head + 1) * dh;
            let (qh, kh, vh) = (q.columns(cols.clone()), k.columns(cols.clone()), v.columns(cols));
            let mut s = qh.matmul_nt(&kh)?;
            s.scale(scale);
            for r in 0..len {
                softmax_in_place(s.row_mut(r));
            }
            o.add_into_columns(head * dh, &s.matmul(&vh)?);
            probs.push(s);
        }
        Ok((o, probs))
    }

    /// Returns `d out / d x` and gradients for every block parameter.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &EncoderCache,
        dout: &Tensor,
    ) -> Result<(Tensor, Vec<(ParamId, Tensor)>), NnError> {
        let p = |id: ParamId| params.value(id);
        let ids = &self.ids;
        let mut grads = Vec::with_capacity(16);

        // out = h + mlp(ln2(h))
        let g2 = dense_backward(&cache.m_act, p(ids.w2), dout)?;
        grads.push((ids.w2, g2.dw));
        grads.push((ids.b2, g2.db));
        let dm_pre = relu_backward(&cache.m_pre, &g2.dx);
        let g1 = dense_backward(&cache.z, p(ids.w1), &dm_pre)?;
        grads.push((ids.w1, g1.dw));
        grads.push((ids.b1, g1.db));
        let (dh_ln, dg2, db2) = layer_norm_backward(&g1.dx, &cache.xhat2, &cache.inv2, p(ids.ln2_g));
        grads.push((ids.ln2_g, dg2));
        grads.push((ids.ln2_b, db2));
        let mut dh = dout.clone();
        dh.add_assign(&dh_ln)?;

        // h = x + attn(ln1(x))
        let go = dense_backward(&cache.o, p(ids.wo), &dh)?;
        grads.push((ids.wo, go.dw));
        grads.push((ids.bo, go.db));
        let (dq, dk, dv) = self.attend_backward(cache, &go.dx)?;
        let gq = dense_backward(&cache.y1, p(ids.wq), &dq)?;
        let gk = dense_backward(&cache.y1, p(ids.wk), &dk)?;
        let gv = dense_backward(&cache.y1, p(ids.wv), &dv)?;
        let mut dy1 = gq.dx;
        dy1.add_assign(&gk.dx)?;
        dy1.add_assign(&gv.dx)?;
        grads.push((ids.wq, gq.dw));
        grads.push((ids.bq, gq.db));
        grads.push((ids.wk, gk.dw));
        grads.push((ids.bk, gk.db));
        grads.push((ids.wv, gv.dw));
        grads.push((ids.bv, gv.db));
        let (dx_ln, dg1, db1) = layer_norm_backward(&dy1, &cache.xhat1, &cache.inv1, p(ids.ln1_g));
        grads.push((ids.ln1_g, dg1));
        grads.push((ids.ln1_b, db1));
        let mut dx = dh;
        dx.add_assign(&dx_ln)?;
        debug_assert_eq!(cache.x.cols(), dx.cols());
        Ok((dx, grads))
    }

    fn attend_backward(&self, cache: &EncoderCache, do_: &Tensor) -> Result<(Tensor, Tensor, Tensor), NnError> {
        let len = cache.q.rows();
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(&[len, self.d_model]);
        let mut dk = Tensor::zeros(&[len, self.d_model]);
        let mut dv = Tensor::zeros(&[len, self.d_model]);
        for head in 0..self.heads {
            let cols = head * dh..(head + 1) * dh;
            let qh = cache.q.columns(cols.clone());
            let kh = cache.k.columns(cols.clone());
            let vh = cache.v.columns(cols.clone());
            let doh = do_.columns(cols);
            let pr = &cache.probs[head];
            let dp = doh.matmul_nt(&vh)?;
            dv.add_into_columns(head * dh, &pr.matmul_tn(&doh)?);
            let mut ds = Tensor::zeros(&[len, len]);
            for r in 0..len {
                let (prow, dprow) = (pr.row(r), dp.row(r));
                let dot: f64 = prow.iter().zip(dprow).map(|(a, b)| a * b).sum();
                let out = ds.row_mut(r);
                for c in 0..len {
                    out[c] = prow[c] * (dprow[c] - dot) * scale;
                }
            }
            dq.add_into_columns(head * dh, &ds.matmul(&kh)?);
            dk.add_into_columns(head * dh, &ds.matmul_tn(&qh)?);
        }
        Ok((dq, dk, dv))
    }
}

/// Row-wise layer norm. Returns `(x̂, 1/σ per row, γ·x̂ + β)`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, Vec<f64>, Tensor) {
    let d = x.cols();
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    let mut y = x.clone();
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv.push(is);
        let terms = gain.data().iter().zip(xhat.row(r)).zip(bias.data());
        for (out, ((g, xh), b)) in y.row_mut(r).iter_mut().zip(terms) {
            *out = g * xh + b;
        }
    }
    (xhat, inv, y)
}

/// Returns `(dx, dgain, dbias)`.
#[allow(clippy::needless_range_loop)]
pub fn layer_norm_backward(dy: &Tensor, xhat: &Tensor, inv: &[f64], gain: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = dy.cols();
    let mut dx = Tensor::zeros(&[dy.rows(), d]);
    let mut dg = Tensor::zeros(&[d]);
    let db = dy.sum_rows();
    for r in 0..dy.rows() {
        let (dyr, xr) = (dy.row(r), xhat.row(r));
        let mut sum_dxh = 0.0;
        let mut sum_dxh_x = 0.0;
        for c in 0..d {
            dg.data_mut()[c] += dyr[c] * xr[c];
            let dxh = dyr[c] * gain.data()[c];
            sum_dxh += dxh;
            sum_dxh_x += dxh * xr[c];
        }
        let out = dx.row_mut(r);
        for c in 0..d {
            let dxh = dyr[c] * gain.data()[c];
            out[c] = inv[r] / d as f64 * (d as f64 * dxh - sum_dxh - xr[c] * sum_dxh_x);
        }
    }
    (dx, dg, db)
}
