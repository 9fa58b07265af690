//! Loss-function learning: symbolic search over protected loss expressions,
//! edge-weighted loss networks trained by unrolled differentiation, and the
//! experiment pipeline that compares them with fixed and random alternatives.

pub mod autodiff;
pub mod error;
pub mod expr;
pub mod gp;
pub mod learner;
pub mod lossnet;
pub mod meta;
pub mod nonfinite;
pub mod scalar;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
pub use expr::{LossExpr, Operator, Terminal};
pub use lossnet::{ExportedLoss, FeedForwardLoss, LearnableLoss, MetaLossNetwork};
pub use scalar::Scalar;

pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type MetaLossNetwork64 = MetaLossNetwork<f64>;
pub type MetaLossNetwork32 = MetaLossNetwork<f32>;
