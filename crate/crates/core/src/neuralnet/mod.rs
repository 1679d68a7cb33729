//! Minimal dense/convolutional network core with exact reverse-mode
//! gradients, MSE/RMSE metrics, Adam, and finite-difference checking.
//!
//! Everything is `f64`. Activations flow through layers as batches: a tensor
//! of shape `[batch, ...sample_shape]`, row-major, with images stored as
//! `height x width x channels`.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON, DEFAULT_LR};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{compare_gradients, grad_check, GradCheckReport, GradCheckable};
pub use layers::{Conv2d, Dense, Layer, Sequential, SequentialCache, Trace};
pub use ops::{conv2d_forward, conv_output_len, dense_forward, mse, mse_grad, relu, rmse};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { context: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("kernel {kernel:?} larger than input {input:?}")]
    KernelLargerThanInput { kernel: (usize, usize), input: (usize, usize) },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint truncated")]
    TruncatedFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn check_shape(context: &'static str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch { context, expected: expected.to_vec(), found: found.to_vec() })
    }
}
