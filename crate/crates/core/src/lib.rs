//! Collaborative domain-prefix tuning for cross-domain named entity recognition.

pub mod backbone;
pub mod bench;
pub mod composer;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod prefixstore;
pub mod selector;
pub mod synth;
pub mod taskformat;
