//! Dense `f64` array substrate with hand-written backward passes.

mod conv;
mod gradcheck;
pub mod ops;
mod params;
mod sample;
mod tensor;

pub use conv::{avg_pool2, avg_pool2_backward, conv3x3, conv3x3_backward};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use params::{Param, ParamStore};
pub use sample::{
    bilinear_sample, bilinear_sample_backward, resize_bilinear, resize_bilinear_backward,
    resize_coords,
};
pub use tensor::Tensor;
