//! Minimal differentiable-network substrate: matrices, a reverse-mode tape,
//! dense layers, Gaussian heads, Adam, and a finite-difference checker.

mod gaussian;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gaussian::{
    gaussian_kl, kl_standard_rows, reparam_rows, reparam_sample, GaussianHead, LOG_STD_MAX, LOG_STD_MIN,
};
pub use gradcheck::{check_param_gradients, finite_diff_check};
pub use layers::{dense_forward, Activation, DenseLayer, Mlp};
pub use optim::{optimizer_step, OptimState};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2;

pub(crate) use tape::softmax_in_place;
