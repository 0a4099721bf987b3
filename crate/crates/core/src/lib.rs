pub mod checkpoint;
pub mod choices;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod inference;
pub mod lm;
pub mod peft_trainer;
pub mod pipeline;
pub mod prompt_kb;
pub mod retrieval;
pub mod select;
pub mod synth;

pub use error::{Error, Result};
