//! Dense tensors, PCA, 2-D filtering, seeded randomness and gradient checking.

mod filter;
mod grad;
mod optim;
mod pca;
mod rng;
mod tensor;

pub use filter::{bilinear_resize, gaussian_kernel, gaussian_smooth_2d};
pub use grad::{grad_check, grad_check_indices, Differentiable};
pub use optim::Adam;
pub use pca::{pca_top_k, PcaResult, MIN_TOTAL_VARIANCE};
pub use rng::RngStream;
pub use tensor::Tensor;
