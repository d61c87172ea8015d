//! Adapting a frozen image–text dual encoder to video tasks by learning only
//! continuous prompt vectors and a light temporal Transformer.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod presets;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod video;

pub use autograd::{Gradients, Graph, ParamStore, Parameter, Var};
pub use tensor::{Scalar, Tensor};
