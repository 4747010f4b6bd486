//! Few-shot precise event spotting with two distillation frameworks:
//! annealed multimodal representation distillation and adaptive-weight
//! prediction distillation, on synthetic multimodal clips.

pub mod awd;
pub mod datagen;
pub mod error;
pub mod events;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pseudo;
pub mod schema;
pub mod tensor;

pub use error::{Error, Result};
