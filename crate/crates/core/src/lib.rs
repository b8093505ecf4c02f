//! MHCNN: a multi-head convolutional denoiser with multi-path attention,
//! built on a small reverse-mode autodiff tensor core.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, convolution/matmul kernels and the autodiff [`tensor::Tape`]
//! * [`nn`]: dense blocks, path blocks, multi-path attention, ECA, the tail and the full model
//! * [`data`]: PNM I/O, AWGN synthesis, synthetic corpora, patches and batching
//! * [`optim`]: the l2 objective, Adam and the learning-rate schedule
//! * [`metrics`]: PSNR and SSIM
//! * [`runtime`]: training, checkpoints, inference, evaluation, ablations and feature dumps

pub mod data;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod runtime;
pub mod tensor;

pub use tensor::{Scalar, Tensor, TensorError};
