use serde::{Deserialize, Serialize};

use super::flow::FlowRecord;
use crate::nn::model::HEADER_FIELDS;

/// Divisors that map raw header values to roughly `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalizers {
    /// Payload bytes per packet (an Ethernet MSS).
    pub payload_len: f64,
    pub tcp_window: f64,
    /// Inter-arrival gaps are clamped to `[0, inter_arrival_cap]` seconds,
    /// then divided by it.
    pub inter_arrival_cap: f64,
}

impl Default for Normalizers {
    fn default() -> Self {
        Self {
            payload_len: 1460.0,
            tcp_window: 65535.0,
            inter_arrival_cap: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// First `n_b` payload bytes divided by 255, zero-padded.
    pub x_pay: Vec<f64>,
    /// First `n_p` packets as `[payload_len, tcp_window, inter_arrival, direction]`,
    /// zero rows past the end of the flow.
    pub x_hdr: Vec<[f64; HEADER_FIELDS]>,
    pub label: Option<usize>,
}

impl FeatureVector {
    /// `[x_pay | x_hdr row-major]`, the model's input layout.
    pub fn to_row(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.x_pay.len() + self.x_hdr.len() * HEADER_FIELDS);
        out.extend_from_slice(&self.x_pay);
        for row in &self.x_hdr {
            out.extend_from_slice(row);
        }
        out
    }

    pub fn from_row(row: &[f64], n_b: usize, n_p: usize, label: Option<usize>) -> Self {
        let x_pay = row[..n_b].to_vec();
        let x_hdr = row[n_b..n_b + n_p * HEADER_FIELDS]
            .chunks_exact(HEADER_FIELDS)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Self { x_pay, x_hdr, label }
    }
}

pub fn extract_features(flow: &FlowRecord, n_b: usize, n_p: usize, norm: &Normalizers) -> FeatureVector {
    let mut x_pay = vec![0.0; n_b];
    for (dst, &b) in x_pay.iter_mut().zip(&flow.payload_prefix) {
        *dst = f64::from(b) / 255.0;
    }
    let mut x_hdr = vec![[0.0; HEADER_FIELDS]; n_p];
    let mut prev: Option<f64> = None;
    for (row, p) in x_hdr.iter_mut().zip(&flow.packets) {
        let gap = prev.map_or(0.0, |t| p.timestamp - t);
        prev = Some(p.timestamp);
        *row = [
            p.payload_len as f64 / norm.payload_len,
            f64::from(p.tcp_window) / norm.tcp_window,
            gap.clamp(0.0, norm.inter_arrival_cap) / norm.inter_arrival_cap,
            f64::from(p.direction),
        ];
    }
    FeatureVector { x_pay, x_hdr, label: None }
}
