//! Conditional slot initialization from clustered perceptual features.
//!
//! The crate bundles a small reverse-mode tensor tape, k-means and
//! mean-shift clustering, permutation-symmetric cluster-to-slot mapping
//! layers, a slot-attention reconstruction pipeline at desk scale, a
//! synthetic sprite generator, and segmentation/quality metrics.
//!
//! See the `examples/` directory for one runnable program per capability;
//! the `slotseed` binary exposes the same machinery as subcommands
//! (`synth`, `train`, `eval`, `cluster`, `gradcheck`, `report`).

pub mod clustering;
pub mod checkpoint;
pub mod checks;
pub mod commands;
pub mod config;
pub mod container;
pub mod datasynth;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod ppm;
pub mod scene;
pub mod slotinit;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Val};
pub use tensor::Tensor;
