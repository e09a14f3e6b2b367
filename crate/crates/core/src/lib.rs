//! Referential grounded video chat machinery: spatial-temporal-context
//! aggregation, mask-pooled object prompts, `[SEG]` grounding, a toy
//! trainable model, grounded-dialogue metrics and data generation.

pub mod autograd;
pub mod client;
pub mod datagen;
pub mod error;
pub mod grounding_head;
pub mod markup;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod referring_prompts;
pub mod selfcheck;
pub mod stc_aggregator;

pub use error::{Error, Result};
