//! Dense `f64` tensors, a define-by-run tape, SGD and a finite-difference
//! gradient oracle.

mod gradcheck;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{central_differences, grad_check};
pub use optim::sgd_step;
pub use rng::RngStream;
pub use tape::{log_sigmoid, log_sum_exp, Gradients, Tape, Var};
pub(crate) use tape::{cosine_raw, matmul_raw};
pub use tensor::Tensor;

/// Additive bias standing in for `-inf` in attention masks.
pub const HARD_SENTINEL: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("attention row {0} is fully hard-masked")]
    DegenerateRow(usize),
}

/// Cosine similarity of two plain slices.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::Shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    cosine_raw(a, b)
}
