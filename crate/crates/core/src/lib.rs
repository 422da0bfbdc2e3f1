//! Text-guided human-motion understanding at desk scale.
//!
//! The pipeline encodes motion (and optionally per-frame video features),
//! enhances motion with video context, selects the frames most relevant to a
//! text query, enriches them with local and global context, fuses them with
//! the text, and decodes an answer with a small causal decoder.

pub mod checks;
pub mod config;
pub mod cross_talker;
pub mod data;
pub mod encoders;
pub mod enhancer;
pub mod error;
pub mod generator;
pub mod judge;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelDims, Stage};
pub use numerics::{Matrix, ParamId, ParamStore, Tape, Var};
