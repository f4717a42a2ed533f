//! Soft anisotropic diagrams: images represented as sets of anisotropic,
//! additively weighted, temperature-controlled sites blended by a per-pixel
//! softmax over a top-K candidate list.

pub mod budget;
pub mod candidates;
pub mod codec;
pub mod config;
pub mod error;
pub mod field;
pub mod grad;
pub mod image;
pub mod poisson;
pub mod quality;
pub mod reduce;
pub mod render;
pub mod rng;
pub mod score;
pub mod site;
pub mod train;

pub use candidates::{refresh, PropagationParams, RefreshMode};
pub use config::{LearningRates, MergeMode, TrainConfig};
pub use error::{Result, SadError};
pub use field::{CandidateField, INVALID_ID};
pub use image::ImageBuffer;
pub use rng::RngState;
pub use score::{Metric, ScoreTable};
pub use site::{normalization_scale, ClampBounds, Site, SiteStore};
