//! Dense matrices, reverse-mode differentiation, AdamW and the learning-rate schedule.

mod matrix;
mod optim;
mod params;
mod tape;

use thiserror::Error;

pub use matrix::{gelu, gelu_grad, layer_norm, matmul, softmax_rows, Matrix, LAYER_NORM_EPS};
pub use optim::{adamw_step, clip_global_norm, global_norm, lr_schedule, OptimizerState};
pub use params::ParamStore;
pub use tape::{Gradients, ParamId, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("variable is not recorded on this tape")]
    UnknownNode,
    #[error("step {step} exceeds total steps {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Central-difference gradient of a scalar function, one entry at a time.
pub fn finite_diff_grad<F>(f: F, x: &Matrix, eps: f64) -> Result<Matrix, NumericsError>
where
    F: Fn(&Matrix) -> f64,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Invalid(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - eps;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}
