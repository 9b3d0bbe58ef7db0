pub mod actions;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod generation;
pub mod error;
pub mod eval;
pub mod lm;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod scalar;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision aliases used by the pipeline.
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type ActionSet32 = actions::ActionSet<f32>;
pub type Planner32 = planner::Planner<f32>;
pub type LanguageModel32 = lm::LanguageModel<f32>;

/// Double-precision aliases for gradient checks and oracles.
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Matrix64 = matrix::Matrix<f64>;
pub type LanguageModel64 = lm::LanguageModel<f64>;
pub type HmmCritic64 = eval::HmmCritic<f64>;
