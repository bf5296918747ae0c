use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    /// Factorizes a symmetric positive-definite matrix. Fails with a
    /// degenerate-input error if any pivot is not strictly positive.
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape {
                op: "cholesky",
                left: a.shape(),
                right: (n, n),
            });
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::degenerate(format!(
                    "matrix is not positive definite (pivot {j} = {d})"
                )));
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / djj);
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            let row = self.lower.row(i);
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
        }
        y
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ b‖²`.
    pub fn inverse_quadratic_form(&self, b: &[f64]) -> f64 {
        self.forward_solve(b).iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_input() {
        let a = Matrix::from_rows(&[[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]]);
        let c = Cholesky::factor(&a).unwrap();
        let back = c.lower().matmul_nt(c.lower()).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn diagonal_quadratic_form() {
        let a = Matrix::from_rows(&[[4.0, 0.0], [0.0, 1.0]]);
        let c = Cholesky::factor(&a).unwrap();
        assert_eq!(c.inverse_quadratic_form(&[2.0, 0.0]), 1.0);
    }

    #[test]
    fn singular_is_rejected() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(Cholesky::factor(&a), Err(Error::Degenerate(_))));
    }
}
