//! Training-free open-vocabulary semantic segmentation.
//!
//! Each free-form text query is turned into a support set of generated images.
//! The support set is split into foreground and background regions and distilled
//! into banks of visual prototypes (class, instance and part level). Target images
//! are segmented by nearest-prototype matching, with an explicit background class
//! built from the background prototypes of every query.
//!
//! The heavy pretrained components (text-to-image generator, unsupervised mask
//! proposer, dense feature extractors, image-text scorer) sit behind adapter
//! traits. Deterministic synthetic adapters are provided so the whole pipeline
//! runs at desk scale.

pub mod bank;
pub mod cli;
pub mod config;
pub mod error;
pub mod explain;
pub mod features;
pub mod grid;
pub mod harness;
pub mod inference;
pub mod io;
pub mod kmeans;
pub mod pipeline;
pub mod proposal;
pub mod support;
pub mod synthetic;
pub mod vocabulary;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
