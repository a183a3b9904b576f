//! Labeled 4D short-axis cardiac MR synthesis.
//!
//! The pipeline pairs a fully controllable parametric heart phantom with a
//! spatially-adaptive conditional GAN trained on real annotated cine MR
//! slices. At inference the real segmentation masks are swapped for
//! phantom-generated label sequences, yielding image sequences whose ground
//! truth is known by construction.
//!
//! Modules:
//! - [`phantom`]: analytic 4D heart label generator.
//! - [`data`]: real-case ingestion and preprocessing into training pairs.
//! - [`model`]: generator, style encoder, discriminator and losses, built
//!   on a small f64 reverse-mode graph.
//! - [`train`]: alternating optimization with checkpointing.
//! - [`synth`]: label-swap synthesis, dataset export, montages, reports.
//! - [`config`]: the declarative run configuration shared by the CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod model;
pub mod nifti;
pub mod phantom;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
