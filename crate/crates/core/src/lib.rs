//! Federated Gaussian-process regression.
//!
//! Exact GP primitives ([`kernels`], [`gp`]), a FedAvg-style simulator for
//! learning one shared hyperparameter vector across clients
//! ([`federation`]), data generators ([`synth`]), metrics ([`metrics`]) and
//! the experiment harness behind the `fedgp` binary ([`config`],
//! [`experiment`]).

pub mod config;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod synth;

pub use error::{FedGpError, Result};
pub use gp::{Dataset, GradScaling, Prediction};
pub use kernels::{GPParams, KernelFamily, KernelSpec, LengthscaleMode, ParamBox};
