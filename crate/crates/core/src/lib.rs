//! Plasticity-aware incremental learning for encrypted traffic classification.
//!
//! The pipeline runs from packet captures ([`ingest`]) or synthetic traffic
//! ([`synth`]) through a partitioned transformer classifier ([`nn`]) trained
//! stage by stage ([`incremental`]). The stage controller consults the
//! [`plasticity`] indicators to decide when to widen the hidden stack.
//! [`metrics`] scores the resulting accuracy matrices and [`harness`] runs
//! whole scenarios.

pub mod harness;
pub mod incremental;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod plasticity;
pub mod synth;
