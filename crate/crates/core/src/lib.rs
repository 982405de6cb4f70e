//! Banana variety and quality classification: tensors, layer kernels with
//! hand-written gradients, the base CNN and MobileNet architectures, dataset
//! handling, training, evaluation and Grad-CAM.

pub mod data;
pub mod error;
pub mod gradcam;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, WeightStore};
pub use tensor::{Shape4, Tensor};
