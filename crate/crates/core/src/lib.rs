//! Context-aware federated learning over fixed text embeddings.
//!
//! The crate simulates a mental-health monitoring pipeline end to end:
//! keyboard text cleaning ([`textprep`]), fixed embeddings ([`embed`]),
//! temporal context assignment ([`context`]), linear heads ([`model`]),
//! per-context ensembles ([`call`]), FedAvg ([`fl`]), leave-one-user-out
//! evaluation ([`eval`]), synthetic cohorts ([`synth`]) and the duty-cycled
//! speech collector ([`dutycycle`]).
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common instantiations.

pub mod call;
pub mod context;
pub mod dutycycle;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fl;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod textprep;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LinearModelF64 = model::LinearModel<f64>;
pub type LinearModelF32 = model::LinearModel<f32>;
pub type EnsembleModelF64 = call::EnsembleModel<f64>;
pub type EnsembleModelF32 = call::EnsembleModel<f32>;
pub type SampleF64 = model::Sample<f64>;
pub type RoundUpdateF64 = fl::RoundUpdate<f64>;
pub type ServerStateF64 = fl::ServerState<f64>;
