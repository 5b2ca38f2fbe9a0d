pub mod error;
pub mod bench;
pub mod checks;
pub mod data;
pub mod graph;
pub mod head;
pub mod linalg;
pub mod mae;
pub mod nn;
pub mod optim;
pub mod params;
pub mod regimes;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod theory;
pub mod ttt;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use mae::{MaeConfig, MaeModel, MaskSpec};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use params::{Gradients, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type MaeModel32 = MaeModel<f32>;
pub type MaeModel64 = MaeModel<f64>;
