//! Attribute-guided metric distillation.
//!
//! A frozen re-identification embedder produces pairwise distances; an
//! interpreter network learns per-attribute attention maps whose masked
//! features decompose each distance into attribute contributions.

pub mod adam;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod graph;
pub mod interpreter;
pub mod losses;
pub mod ops;
pub mod scalar;
pub mod target;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{AmdError, Result};
pub use graph::{Graph, Var};
pub use scalar::Real;
pub use tensor::Tensor;
pub use interpreter::{Interpreter, InterpreterConfig, PairExplanation};
pub use losses::{LossBreakdown, LossConfig};
pub use target::{Embedder, EmbedderConfig};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Embedder64 = Embedder<f64>;
pub type Embedder32 = Embedder<f32>;
pub type Interpreter64 = Interpreter<f64>;
pub type Interpreter32 = Interpreter<f32>;
