//! Leaker-byte detection for encrypted TLS-over-TCP traffic.
//!
//! The crate trains classifiers on fixed-shape byte views of TCP sessions,
//! reads the trained decision tree's impact vector to find the byte offsets
//! that carry label information, masks them, and repeats until the remaining
//! leakage is spread evenly over the input.
//!
//! Module map, bottom-up:
//!
//! * [`ingest`] reads labeled sessions from classic pcap files or JSONL.
//! * [`tlsparse`] is the TLS record-layer codec.
//! * [`features`] builds the per-iteration byte views and masks.
//! * [`models`] holds the CART tree, the 1-D CNN and the hyperparameter search.
//! * [`interpret`] turns a tree into an impact vector and picks leaker offsets.
//! * [`framework`] runs the iterative detect/mask loop.
//! * [`synth`] generates labeled traffic with planted leakage channels.

pub mod features;
pub mod framework;
pub mod ingest;
pub mod interpret;
pub mod models;
mod rng;
pub mod synth;
pub mod tlsparse;

pub use features::{MaskRange, SampleMatrix, ViewDataset, ViewKind, ViewSpec};
pub use framework::{FrameworkConfig, IterationReport, Mode, TerminationReason};
pub use ingest::{Direction, LabeledDataset, RawSegment, Session};
pub use interpret::{ImpactLayout, ImpactVector, LeakerSelection};
pub use synth::LeakageProfile;
pub use tlsparse::TlsRecord;
