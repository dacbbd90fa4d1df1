//! From-scratch multi-head self-attention branch for occluded person
//! re-identification, on a minimal f64 reverse-mode tensor engine, with a
//! synthetic occluded-retrieval harness: PK-sampled triplet training,
//! CMC/mAP evaluation, attention export, and grid sweeps.

pub mod autodiff;
pub mod branch;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod rng;

pub use autodiff::{Axis, Gradients, Tape, Tensor, Var};
pub use error::{Error, Result};

pub mod backbone;
pub mod container;
pub mod data;
pub mod eval;
pub mod export;
pub mod optim;
pub mod sampler;

pub mod model;
pub mod train;
pub mod cli;
pub mod config;
