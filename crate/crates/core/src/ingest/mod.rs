//! From packet captures to labeled feature vectors.
//!
//! [`pcap`] streams packets out of a classic capture, [`flow`] groups them
//! into bi-flows, [`features`] turns a flow into `[x_pay | x_hdr]`, and
//! [`dataset`] stores labeled vectors on disk.

pub mod dataset;
pub mod features;
pub mod flow;
pub mod pcap;

pub use dataset::Dataset;
pub use features::{extract_features, FeatureVector, Normalizers};
pub use flow::{assemble_flows, Endpoint, FlowAssembly, FlowKey, FlowRecord, PacketMeta};
pub use pcap::{parse_pcap, Packet, PcapReader, Protocol};

use thiserror::Error;

pub const DEFAULT_IDLE_TIMEOUT: f64 = 60.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated {what} at byte offset {offset}")]
    Truncated { offset: u64, what: String },
    #[error("malformed record at byte offset {offset}: {reason}")]
    Malformed { offset: u64, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
