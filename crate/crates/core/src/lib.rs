//! Promptable volumetric segmentation engine.
//!
//! The crate is organised around the stages of a spatio-textual segmentation
//! pipeline:
//!
//! - [`volume`]: voxel grids, intensity normalization, resampling, NIfTI I/O.
//! - [`prompt_gen`]: block-corruption simulation of coarse spatial prompts.
//! - [`text`]: class/variant mappings, prompt resolution and text encoders.
//! - [`decoder`]: channel-wise prompt alignment, prediction and iterative
//!   masked refinement around pluggable backbone contracts.
//! - [`pipeline`]: two-stage sliding-window inference and run reports.
//! - [`postproc`]: probability-guided connected-component refinement.
//! - [`metrics`]: BCE+Dice loss and DSC / NSD / instance F1 metrics.
//!
//! [`phantom`] and [`bench`] provide synthetic data and the parallel-vs-sequential
//! benchmark harness used by the command-line tools.

pub mod bench;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod postproc;
pub mod prompt_gen;
pub mod rng;
pub mod text;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, LabelMap, Modality, MultiChannelMask, ProbabilityMap, Spacing, Volume};
