//! Dense linear algebra, tape-based reverse-mode differentiation and a
//! finite-difference gradient checker.

mod gradcheck;
mod linalg;
mod matrix;
mod tape;

pub use gradcheck::grad_check;
pub use linalg::Cholesky;
pub use matrix::{gemm, Matrix};
pub use tape::{Gradients, ParamId, Tape, Var};

use crate::error::{Error, Result};

/// Mean negative log-likelihood of `targets` over unmasked positions,
/// evaluated without recording a tape.
pub fn token_cross_entropy(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy(l, targets, mask)?;
    Ok(tape.scalar(loss))
}

/// Fails with a numeric error when `m` contains NaN or infinity.
pub fn ensure_finite(what: &str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
