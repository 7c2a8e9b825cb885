//! Glyph-aware character embeddings for Chinese language modeling and word
//! segmentation.

pub mod nn;
pub mod tensor;
pub mod glyph;
pub mod corpus;
pub mod embed;
pub mod lm;
pub mod train;
pub mod seg;
pub mod analysis;
pub mod config;
pub mod experiment;
