//! Few-shot fine-tuning of a masked-language-model encoder without
//! handcrafted patterns or verbalizers: task adapters, multi-token label
//! embeddings trained with a hinge loss, and nearest-prototype inference,
//! plus the usual baselines and an experiment harness.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod head;
pub mod masking;
pub mod model;
pub mod params;
pub mod pretrain;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
