//! A small dense convolutional network with exact backpropagation in f64.

pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod param;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use model::{Model, ModelCache, ModelSpec, Prediction, PRED_EPS};
pub use param::{InitTag, LayerKind, Param};
pub use tensor::{Matrix, Tensor4};
