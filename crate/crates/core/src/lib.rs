//! Construction of annotation-based (hard) concept bottleneck models.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`data`]: domain types, manifest ingestion, artifact persistence.
//! - [`gateway`]: uniform client over foundation-model services with a
//!   content-addressed record/replay cache and deterministic mock backends.
//! - [`pool`]: concept collection, deduplication and spurious filtering.
//! - [`spurious`]: description/keyword gathering and point-biserial detection.
//! - [`annotate`]: per-image binary concept annotation and its quality metrics.
//! - [`refine`]: background-removal tool chain and flip accounting.
//! - [`nn`]: concept heads, label MLP, soft projection, leakage probe.
//! - [`eval`]: group-aware metrics, attribute consensus, run reports.
//! - [`pipeline`]: configuration and the end-to-end stage driver.
//! - [`fixtures`] and [`oracles`]: synthetic corpora and reference implementations.

pub mod annotate;
pub mod data;
pub mod digest;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gateway;
pub mod nn;
pub mod oracles;
pub mod pipeline;
pub mod pool;
pub mod refine;
pub mod spurious;
pub mod text;

pub use data::{
    canonicalize, AnnotationMatrix, ConceptEntry, ConceptPool, ConceptStatus, DatasetManifest,
    GroupDef, ImageRecord, MatrixSource, Provenance, Split,
};
pub use error::{Error, Result};
pub use gateway::{Capability, Gateway, ImageRef, ModelRequest, ModelResponse};

