//! Multi-task reconstruction of methane concentration fields and emission-source
//! attribution from sparse sensor time series.
//!
//! The crate is organised bottom-up:
//!
//! * [`sim`] is the digital twin: stochastic wind, random multi-source scenarios
//!   and an explicit advection-diffusion solver.
//! * [`observation`] samples sensor networks and assembles the gridded model input.
//! * [`nn`] holds the small tensor kernels (im2col convolution, activations,
//!   Adam) the learned components are built from.
//! * [`dmconv`] implements the diffusive masked convolution layer.
//! * [`model`] wires the shared encoder to the field and source decoders, and
//!   [`loss`] holds the reconstruction and inverse objectives.
//! * [`evaluation`] decodes detections and computes the reported metrics.
//! * [`config`], [`dataset`], [`train`], [`pipeline`] and [`plot`] drive the
//!   end-to-end experiments behind the `plume` binary.

pub mod config;
pub mod dataset;
pub mod dmconv;
pub mod error;
pub mod evaluation;
pub mod loss;
pub mod model;
pub mod nn;
pub mod observation;
pub mod pipeline;
pub mod plot;
pub mod seed;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
