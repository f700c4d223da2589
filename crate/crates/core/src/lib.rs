//! Epistemic/aleatoric uncertainty of deep ensembles and MC-Dropout MLPs,
//! and the width × data-size sweeps that probe how it behaves.
//!
//! Modules build on each other in order: [`ndcore`] arrays and kernels,
//! [`nn`] the MLP and its trainer, [`bayes`] the two posterior samplers,
//! [`uncertainty`] the entropy decomposition, [`eval`] accuracy and OOD
//! scoring, [`data`] loaders and synthetic blobs, [`grid`] the sweep
//! runner, and [`render`] / [`cli`] on top.

pub mod bayes;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod ndcore;
pub mod nn;
pub mod render;
pub mod uncertainty;

pub use error::{Error, Result};
