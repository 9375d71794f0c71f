//! Retrieval-based diagnosis service.
//!
//! Wraps the `refdx-core` engine with configuration, a snapshot-swapping
//! [`Engine`], an HTTP/JSON API, a CLI, reviewer file formats and a toy
//! image featurizer.
//!
//! ```no_run
//! use refdx::{Engine, EngineConfig};
//! let engine = Engine::open(EngineConfig::load("engine.toml")?)?;
//! println!("{} items", engine.health().items);
//! # Ok::<(), refdx::ServiceError>(())
//! ```

pub mod api;
pub mod cli;
pub mod config;
pub mod demo;
pub mod engine;
pub mod error;
pub mod featurize;
pub mod review;

pub use config::{EngineConfig, EngineState, EnsembleConfig};
pub use engine::{
    AugmentResponse, CalibrateRequest, CalibrateResponse, DiagnoseOptions, DiagnosisResponse, Engine,
    HealthResponse, MetricsResponse, QueryInput, RankedLabel, RetrieveResponse,
};
pub use error::{ErrorBody, Result, ServiceError};
pub use featurize::Featurizer;
pub use review::{Decision, DecisionEntry, DecisionLog};
