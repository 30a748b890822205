//! Dense tensors and the differentiable primitives every loss is built from.

pub mod gradcheck;
pub mod io;
pub mod ops;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport, InputGradError};
pub use ops::{cosine_similarity, euclidean_distance, l2_normalize, softmax};
pub use tensor::{FeatureMap, LossValue, ScoreMap, Tensor};
