//! Post-hybridization quality assessment for short-oligonucleotide
//! microarray data.
//!
//! The pipeline ingests plain-text chip layouts and intensity files,
//! quantile-normalizes the intensities, robustly fits the additive log2
//! probe-level model per probeset, and derives quality measures from the
//! fit by-products: NUSE and RLE distributions with chip-level summaries
//! and outlier flags, spatial quality landscapes of weights and residuals,
//! and residual scale factors for comparing whole batches. A seeded
//! synthetic-data generator with known ground truth backs the test and
//! acceptance suites.
//!
//! With the default `parallel` feature, probeset fitting and per-chip
//! normalization run on rayon; disabling the feature gives a sequential
//! build with identical output.

pub mod cli;
pub mod error;
pub mod ingest;
pub mod landscape;
pub mod metrics;
pub mod pipeline;
pub mod plm;
pub mod preprocess;
pub mod report;
pub mod stats;
pub mod synthgen;

pub use error::{Error, Result};
