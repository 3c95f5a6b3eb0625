use super::{Matrix, SymMatrix};
use crate::error::{Error, Result};

/// Pivots at or below this fraction of the largest diagonal entry count as failure.
pub const PIVOT_TOL: f64 = 1e-12;

/// Lower-triangular factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &SymMatrix) -> Result<Self> {
        let n = a.dim();
        if !a.is_finite() {
            return Err(Error::InvalidMatrix("non-finite entries".into()));
        }
        let max_diag = (0..n).map(|i| a.get(i, i)).fold(f64::NEG_INFINITY, f64::max);
        if max_diag <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: 0, value: a.get(0, 0) });
        }
        let tol = PIVOT_TOL * max_diag;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > tol) {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { dim: n, l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `L⁻¹ b`.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// `L⁻ᵀ y`.
    pub fn backward(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(b))
    }

    /// `A⁻¹ B` column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let x = self.solve(&b.column(j));
            for (i, xi) in x.into_iter().enumerate() {
                out.set(i, j, xi);
            }
        }
        out
    }

    /// `bᵀ A⁻¹ b = ‖L⁻¹ b‖²`.
    pub fn inv_quad_form(&self, b: &[f64]) -> f64 {
        self.forward(b).iter().map(|x| x * x).sum()
    }

    /// `L⁻¹ B` applied to each column.
    pub fn forward_matrix(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            for (i, v) in self.forward(&b.column(j)).into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        out
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim).map(|i| 2.0 * self.l[i * self.dim + i].ln()).sum()
    }
}

/// Solves `A x = b` for SPD `A`.
pub fn spd_solve(a: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.dim() {
        return Err(Error::DimensionMismatch(format!(
            "rhs length {} for dimension {}",
            b.len(),
            a.dim()
        )));
    }
    Ok(Cholesky::factor(a)?.solve(b))
}

pub fn is_positive_definite(a: &SymMatrix) -> bool {
    Cholesky::factor(a).is_ok()
}
