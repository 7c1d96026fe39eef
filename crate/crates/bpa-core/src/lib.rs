//! Two-phase GAN augmentation pipeline for dermoscopic lesion imagery.
//!
//! Phase one trains a progressively grown generator on benign-lesion images
//! and synthesizes an arbitrary supply of base lesions. Phase two trains a
//! cycle-consistent translator that imprints a target dermoscopic structure
//! (atypical pigment network) onto those bases. The crate also carries the
//! downstream evaluation stack: dataset assembly under fixed mixing
//! conditions, structure-detector and malignancy-grader training, and
//! threshold-free ROC/AUC reporting.
//!
//! Everything is deterministic: a single root seed fixes ingestion order,
//! weight init, augmentation, and data shuffling, so reruns produce
//! byte-identical artifacts.

pub mod augment;
pub mod bulk;
pub mod checklist;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod toy;
pub mod transfer;

pub use error::{Error, Result};
