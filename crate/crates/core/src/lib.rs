//! Multi-task transformer models for end-to-end spoken language understanding.

pub mod numeric;
pub mod bpe;
pub mod codec;
pub mod features;
pub mod model;
pub mod corpus;
pub mod data;
pub mod trainer;
pub mod inference;
pub mod evaluation;
pub mod pipeline;
