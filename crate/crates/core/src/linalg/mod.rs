//! Dense symmetric matrix kernel: Jacobi eigendecomposition, Cholesky
//! solves, spectral norms, layer partitions and Schur complements.

mod blocks;
mod cholesky;
mod dense;
mod eigen;
mod sym;

pub use blocks::{
    block_coupling, block_factors, block_split, schur_complement, schur_reduce, whitened_interaction,
    Partition,
};
pub use cholesky::{is_positive_definite, spd_solve, Cholesky, PIVOT_TOL};
pub use dense::Matrix;
pub use eigen::{eigen_sym, spectral_norm, Spectrum};
pub use sym::{SymMatrix, VecJson};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}
