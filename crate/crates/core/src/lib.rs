//! Short-text topic modeling: text extension, a prefix-tuned variational topic model,
//! classical baselines and topic-quality evaluation.

pub mod baselines;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod extension;
pub mod nn;
pub mod pipeline;
pub mod pvtm;
pub mod synthetic;
pub mod tensorfile;
pub mod util;
