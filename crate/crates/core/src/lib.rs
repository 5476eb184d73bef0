//! Image-to-recipe generation: set-based ingredient prediction from image
//! features followed by instruction generation conditioned on both the image
//! and the predicted ingredients.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: reverse-mode autodiff engine.
//! * [`nn`]: attention, transformer blocks, conditioning fusion, image encoder.
//! * [`ingredient_decoder`]: set transformer, list transformer and
//!   feed-forward baselines with their losses and samplers.
//! * [`instruction_decoder`]: title and instruction generation.
//! * [`vocab`]: ingredient canonicalization and instruction tokenization.
//! * [`metrics`]: IoU/F1 accumulators, cardinality error, P@K, perplexity.
//! * [`training`]: Adam, schedules, two-stage training, checkpoints.
//! * [`synthetic`]: seeded synthetic dishes for end-to-end experiments.
//! * [`cli`]: the `invcook` command line.

pub mod tensor;
pub mod nn;
pub mod ingredient_decoder;
pub mod instruction_decoder;
pub mod training;
pub mod synthetic;
pub mod dataset;
pub mod vocab;
pub mod metrics;
pub mod cli;

mod error;

pub use error::Error;
