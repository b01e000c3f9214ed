//! Point-token collaborative perception: tokenize each agent's lidar sweep,
//! order and encode the tokens with a selective state-space stack, ship the
//! salient ones, and align neighbor tokens into the ego frame before fusion.

// `!(x > 0.0)` is the idiom for rejecting NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod comms;
pub mod encoder;
pub mod error;
pub mod frequency;
pub mod geometry;
pub mod harness;
pub mod rng;
pub mod scene_context;
pub mod serialization;
pub mod ssm;
pub mod tensor;
pub mod tokenizer;
pub mod weights;

pub use error::{Error, Result};
