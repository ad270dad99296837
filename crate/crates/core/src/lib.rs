//! Runtime out-of-distribution monitoring for neural-network activation traces.
//!
//! Per-neuron Gaussian interval abstractions are fitted on a proper training
//! set, a calibration set turns the fraction of out-of-interval neurons into an
//! inductive conformal p-value, and a threshold on that p-value flags inputs as
//! in- or out-of-distribution. A small reference network and perturbation
//! generators make the whole pipeline runnable on synthetic data.

pub mod abstraction;
pub mod error;
pub mod experiment;
pub mod icad;
pub mod io;
pub mod monitor;
pub mod perturb;
pub mod refnet;
pub mod report;
pub mod trace;

pub use error::{Error, Result};
