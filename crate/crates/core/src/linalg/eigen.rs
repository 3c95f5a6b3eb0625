use super::{Matrix, SymMatrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
/// Converged when the off-diagonal Frobenius mass drops below this fraction of `‖A‖_F`.
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Eigen-decomposition `A = U Λ Uᵀ` with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    values: Vec<f64>,
    /// Column `j` is the eigenvector for `values[j]`.
    vectors: Matrix,
}

impl Spectrum {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        *self.values.last().expect("non-empty spectrum")
    }

    /// `U f(Λ) Uᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let fv: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        SymMatrix::from_fn(n, |i, j| {
            (0..n).map(|k| self.vectors.get(i, k) * fv[k] * self.vectors.get(j, k)).sum()
        })
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|v| v)
    }

    /// `Uᵀ v`.
    pub fn rotate(&self, v: &[f64]) -> Vec<f64> {
        self.vectors.matvec_t(v)
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn eigen_sym(a: &SymMatrix) -> Result<Spectrum> {
    if !a.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entries".into()));
    }
    let n = a.dim();
    let mut m = a.to_matrix();
    let mut v = Matrix::identity(n);
    let norm = a.frobenius_norm();
    let mut converged = false;

    for _ in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(&m);
        if off <= OFF_DIAGONAL_TOL * norm {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate_columns(&mut m, p, q, c, s);
                rotate_rows(&mut m, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal_norm(&m) > OFF_DIAGONAL_TOL * norm {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(Spectrum { values, vectors })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m.get(i, j) * m.get(i, j);
            }
        }
    }
    s.sqrt()
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.rows() {
        let mp = m.get(k, p);
        let mq = m.get(k, q);
        m.set(k, p, c * mp - s * mq);
        m.set(k, q, s * mp + c * mq);
    }
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.cols() {
        let mp = m.get(p, k);
        let mq = m.get(q, k);
        m.set(p, k, c * mp - s * mq);
        m.set(q, k, s * mp + c * mq);
    }
}

/// `max |λ|` of a symmetric matrix.
pub fn spectral_norm(m: &SymMatrix) -> Result<f64> {
    let spec = eigen_sym(m)?;
    Ok(spec.max().abs().max(spec.min().abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_sym(n: usize, seed: u64) -> SymMatrix {
        let mut rng = CounterRng::from_seed(seed);
        let data = rng.fill_symmetric(n * n, 1.0);
        SymMatrix::new(n, data).unwrap()
    }

    /// Power iteration on `A²` gives `λ_max(A²) = ‖A‖₂²` with no sign ambiguity.
    fn power_iteration_norm(a: &SymMatrix) -> f64 {
        let n = a.dim();
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let mut est = 0.0;
        for _ in 0..20_000 {
            let y = a.matvec(&a.matvec(&x));
            let nrm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let new_est = (x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()).sqrt();
            x = y.iter().map(|v| v / nrm).collect();
            if (new_est - est).abs() < 1e-15 * new_est {
                est = new_est;
                break;
            }
            est = new_est;
        }
        est
    }

    #[test]
    fn identity_norm_is_one() {
        assert_eq!(spectral_norm(&SymMatrix::identity(3)).unwrap(), 1.0);
    }

    #[test]
    fn diagonal_norm() {
        assert_eq!(spectral_norm(&SymMatrix::from_diag(&[1.0, 3.0])).unwrap(), 3.0);
        assert_eq!(spectral_norm(&SymMatrix::from_diag(&[1.0, -4.0])).unwrap(), 4.0);
    }

    #[test]
    fn random_norm_matches_power_iteration() {
        let a = random_sym(6, 7);
        let jac = spectral_norm(&a).unwrap();
        let pow = power_iteration_norm(&a);
        assert!((jac - pow).abs() <= 1e-9, "jacobi {jac} power {pow}");
    }

    #[test]
    fn non_finite_is_rejected() {
        let a = SymMatrix::new(2, vec![1.0, f64::NAN, f64::NAN, 1.0]).unwrap();
        assert!(matches!(spectral_norm(&a), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn zero_matrix() {
        let s = eigen_sym(&SymMatrix::zeros(3)).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sorted_descending() {
        let s = eigen_sym(&random_sym(9, 3)).unwrap();
        assert!(s.values().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        for seed in 0..30 {
            let n = 1 + (seed as usize % 12);
            let a = random_sym(n, seed);
            let s = eigen_sym(&a).unwrap();
            let err = s.reconstruct().sub(&a).unwrap().frobenius_norm();
            assert!(err <= 1e-8 * a.frobenius_norm().max(f64::MIN_POSITIVE), "seed {seed}: {err}");
            let u = s.vectors();
            let utu = u.transpose().matmul(u).unwrap();
            let mut dev = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    dev += (utu.get(i, j) - target).powi(2);
                }
            }
            assert!(dev.sqrt() <= 1e-10 * n as f64, "seed {seed}: {}", dev.sqrt());
        }
    }
}
