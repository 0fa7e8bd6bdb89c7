//! Cross-modal ingredient/image association, cycle-consistent stacked
//! conditional image synthesis, and the evaluation machinery around them.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`vocab`]: raw ingredient strings to a canonical id space.
//! * [`data`]: recipe manifests, splits, triplet sampling, image IO and the
//!   synthetic glyph-meal generator.
//! * [`assoc`]: the attention-based ingredient encoder, the image encoder and
//!   the bidirectional hinge objective that aligns them.
//! * [`retrieval`]: median rank and recall@K evaluation.
//! * [`gan`]: the three-branch conditional generator, its discriminators and
//!   the cycle-consistency regularizer.
//! * [`metrics`]: Inception Score and Frechet distance.
//! * [`experiments`]: end-to-end orchestration and reports.

pub mod assoc;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod retrieval;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};

pub use assoc::{AssocConfig, AssociationModel};
pub use data::{DatasetManifest, ImageSample, Partition, Recipe, SyntheticSpec};
pub use gan::{GanConfig, GanModel, LossWeights};
pub use retrieval::{Direction, RetrievalReport};
pub use vocab::CanonicalVocabulary;
