pub mod error;
#[cfg(test)]
mod fixtures;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod prompt;
pub mod scalar;
pub mod tasks;
pub mod tuners;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type LanguageModel64 = lm::LanguageModel<f64>;
pub type LanguageModel32 = lm::LanguageModel<f32>;
pub type SoftPrompt64 = prompt::SoftPrompt<f64>;
pub type SoftPrompt32 = prompt::SoftPrompt<f32>;
