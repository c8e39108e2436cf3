//! Cross-modality chest-CT super-resolution toolkit.
//!
//! Clinical CT and micro-CT scanners image the same anatomy at resolutions
//! three orders of magnitude apart, and spatially registered pairs of the two
//! modalities do not exist. This crate builds the missing supervision in two
//! stages:
//!
//! 1. A modality-translation CycleGAN (`synthnet`) learns to turn
//!    Gaussian-pyramid-downsampled micro-CT patches into clinical-CT-like
//!    patches, with SSIM terms keeping the translation structure-preserving.
//!    Its trained forward generator materializes a synthesized
//!    clinical-CT / micro-CT paired dataset.
//! 2. A supervised 8x SR GAN (`srnet`) trains on those pairs and then
//!    super-resolves real clinical CT.
//!
//! The remaining modules are the machinery around the two networks:
//! volume I/O, lung-region extraction and patch sampling (`volume`),
//! deterministic imaging primitives (`imaging`), a procedural phantom
//! generator standing in for protected clinical data (`phantom`), the
//! round-trip SSIM evaluation (`eval`), and a config-driven staged pipeline
//! (`config`, `pipeline`) behind the `cmsr` CLI.
//!
//! All training math is f64 with hand-written backward passes (`nn`), seeded
//! end to end, so runs are bit-reproducible and every gradient can be checked
//! against central finite differences.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod srnet;
pub mod synthnet;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
