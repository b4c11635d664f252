//! Complex-valued co-domain symmetric (CDS) networks for multispectral image
//! classification, built on a minimal reverse-mode autodiff engine.
//!
//! The crate covers the full pipeline: sliding-channel encoding of 8-band
//! imagery into 7 complex channels, the CDS layer zoo (equivariant
//! convolutions, conjugate layer, radial complex batch norm, CReLU,
//! magnitude max-pooling), the CDS-Large architecture and real-valued
//! baseline CNNs, AdamW training, post-hoc logit adjustment, a binary chip
//! container, and a synthetic imbalanced dataset generator. Everything is
//! deterministic under a seed and verified by symmetry property suites and
//! finite-difference gradient checks (`cdsnet verify`).

pub mod cli;
pub mod complex;
pub mod data;
pub mod encodings;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
