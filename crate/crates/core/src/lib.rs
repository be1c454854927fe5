//! Annotation with critical thinking: a data pipeline in which a machine
//! annotator labels every item, a machine criticizer estimates how likely each
//! label is wrong, and a bounded human budget is spent reviewing the most
//! suspicious items.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`data`]: items, datasets, annotation/review records and the correction operator.
//! - [`backends`]: prompt templates, response parsing, chat-completion clients and
//!   seeded simulated annotators/criticizers.
//! - [`sampling`]: budget-aware transforms from error probabilities to review
//!   probabilities and indicator draws.
//! - [`metrics`]: annotation quality, quality gain, budget-sensitivity area and
//!   stability runs.
//! - [`loss`]: the importance-weighted training loss family, its gradient and
//!   variance.
//! - [`trainer`]: softmax regression with L2 regularisation, parameter-gap
//!   experiments and the high-probability gap bound.
//! - [`pipeline`]: the resumable run state machine that ties everything together.

pub mod backends;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod trainer;

/// Version tag written into every persisted JSONL record.
pub const SCHEMA_VERSION: u32 = 1;
