use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{spectral_norm, Cholesky, Matrix, SymMatrix};
use crate::error::{Error, Result};

/// Layer partition of a parameter vector: consecutive blocks of the given sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Partition {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl Partition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidArgument("partition needs at least one layer".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Ok(Self { sizes, offsets })
    }

    /// One block covering `dim` parameters.
    pub fn single(dim: usize) -> Result<Self> {
        Self::new(vec![dim])
    }

    pub fn uniform(layers: usize, size: usize) -> Result<Self> {
        Self::new(vec![size; layers])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> usize {
        self.sizes.len()
    }

    pub fn dim(&self) -> usize {
        self.offsets[self.sizes.len()]
    }

    pub fn range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    /// Parameter indices covered by `layers`, in the order given.
    pub fn indices(&self, layers: &[usize]) -> Vec<usize> {
        layers.iter().flat_map(|&l| self.range(l)).collect()
    }

    /// Partition of the sub-vector selected by `layers`.
    pub fn restrict(&self, layers: &[usize]) -> Result<Partition> {
        Partition::new(layers.iter().map(|&l| self.sizes[l]).collect())
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::PartitionMismatch { partition: self.dim(), dim });
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range for {} layers",
                self.layers()
            )));
        }
        Ok(())
    }

    pub fn block_of<'a>(&self, v: &'a [f64], layer: usize) -> &'a [f64] {
        &v[self.range(layer)]
    }
}

impl TryFrom<Vec<usize>> for Partition {
    type Error = Error;
    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Partition::new(sizes)
    }
}

impl From<Partition> for Vec<usize> {
    fn from(p: Partition) -> Self {
        p.sizes
    }
}

/// Splits `H = D + E` into its block diagonal and off-diagonal parts.
pub fn block_split(h: &SymMatrix, p: &Partition) -> Result<(SymMatrix, SymMatrix)> {
    p.check_dim(h.dim())?;
    let layer_of = layer_lookup(p);
    let d = SymMatrix::from_fn(h.dim(), |i, j| if layer_of[i] == layer_of[j] { h.get(i, j) } else { 0.0 });
    let e = SymMatrix::from_fn(h.dim(), |i, j| if layer_of[i] == layer_of[j] { 0.0 } else { h.get(i, j) });
    Ok((d, e))
}

fn layer_lookup(p: &Partition) -> Vec<usize> {
    (0..p.layers()).flat_map(|l| std::iter::repeat_n(l, p.sizes()[l])).collect()
}

/// Cholesky factor of each diagonal block.
pub fn block_factors(a: &SymMatrix, p: &Partition) -> Result<Vec<Cholesky>> {
    p.check_dim(a.dim())?;
    (0..p.layers())
        .map(|l| {
            let idx: Vec<usize> = p.range(l).collect();
            Cholesky::factor(&a.principal(&idx))
        })
        .collect()
}

/// Block-whitened interaction `M = D^{-1/2} E D^{-1/2}`.
///
/// Uses the Cholesky factors of the diagonal blocks in place of symmetric
/// square roots; the result is orthogonally similar to the symmetric form,
/// so its spectrum and spectral norm are identical.
pub fn whitened_interaction(a: &SymMatrix, p: &Partition) -> Result<SymMatrix> {
    let factors = block_factors(a, p)?;
    let n = a.dim();
    let mut m = Matrix::zeros(n, n);
    for l in 0..p.layers() {
        for k in (l + 1)..p.layers() {
            let rl: Vec<usize> = p.range(l).collect();
            let rk: Vec<usize> = p.range(k).collect();
            // L_l⁻¹ A_lk L_k⁻ᵀ
            let x = factors[l].forward_matrix(&a.block(&rl, &rk));
            let y = factors[k].forward_matrix(&x.transpose());
            for (bi, &i) in rl.iter().enumerate() {
                for (bj, &j) in rk.iter().enumerate() {
                    let v = y.get(bj, bi);
                    m.set(i, j, v);
                    m.set(j, i, v);
                }
            }
        }
    }
    SymMatrix::from_matrix(&m)
}

/// Curvature-normalized coupling `‖D^{-1/2} E D^{-1/2}‖₂`.
pub fn block_coupling(a: &SymMatrix, p: &Partition) -> Result<f64> {
    if p.layers() == 1 {
        p.check_dim(a.dim())?;
        block_factors(a, p)?;
        return Ok(0.0);
    }
    spectral_norm(&whitened_interaction(a, p)?)
}

/// Eliminates parameters `elim` from the quadratic `gᵀθ + ½θᵀHθ` by exact
/// minimization, returning the reduced Hessian and gradient on `keep`.
pub fn schur_complement(
    h: &SymMatrix,
    g: &[f64],
    keep: &[usize],
    elim: &[usize],
) -> Result<(SymMatrix, Vec<f64>)> {
    let h_kk = h.principal(keep);
    let g_k: Vec<f64> = keep.iter().map(|&i| g[i]).collect();
    if elim.is_empty() {
        return Ok((h_kk, g_k));
    }
    let h_ee = Cholesky::factor(&h.principal(elim))?;
    let h_ek = h.block(elim, keep);
    let x = h_ee.solve_matrix(&h_ek); // H_ee⁻¹ H_ek
    let correction = h_ek.transpose().matmul(&x)?;
    let reduced = SymMatrix::from_fn(keep.len(), |i, j| h_kk.get(i, j) - correction.get(i, j));
    let g_e: Vec<f64> = elim.iter().map(|&i| g[i]).collect();
    let shift = x.matvec_t(&g_e);
    let g_red = g_k.iter().zip(&shift).map(|(a, b)| a - b).collect();
    Ok((reduced, g_red))
}

/// Conditional quadratic of `layer` after minimizing over every other layer:
/// `H_{ℓ|R} = H_ℓℓ − H_ℓR H_RR⁻¹ H_Rℓ`, `g̃_ℓ = g_ℓ − H_ℓR H_RR⁻¹ g_R`.
pub fn schur_reduce(
    h: &SymMatrix,
    g: &[f64],
    p: &Partition,
    layer: usize,
) -> Result<(SymMatrix, Vec<f64>)> {
    p.check_dim(h.dim())?;
    if g.len() != h.dim() {
        return Err(Error::DimensionMismatch(format!("gradient {} vs {}", g.len(), h.dim())));
    }
    p.check_layer(layer)?;
    Cholesky::factor(h)?;
    let keep: Vec<usize> = p.range(layer).collect();
    let elim: Vec<usize> = (0..h.dim()).filter(|i| !p.range(layer).contains(i)).collect();
    schur_complement(h, g, &keep, &elim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::is_positive_definite;
    use crate::rng::CounterRng;

    fn h2() -> SymMatrix {
        SymMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> SymMatrix {
        let mut rng = CounterRng::from_seed(seed);
        let g = Matrix::from_vec(n, n, rng.fill_normal(n * n)).unwrap();
        SymMatrix::from_matrix(&g.matmul(&g.transpose()).unwrap()).unwrap().shifted(0.5)
    }

    #[test]
    fn partition_basics() {
        let p = Partition::new(vec![2, 3]).unwrap();
        assert_eq!(p.dim(), 5);
        assert_eq!(p.range(1), 2..5);
        assert_eq!(p.indices(&[1, 0]), vec![2, 3, 4, 0, 1]);
        assert!(Partition::new(vec![]).is_err());
        assert!(Partition::new(vec![1, 0]).is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "[2,3]");
        assert!(serde_json::from_str::<Partition>("[0]").is_err());
    }

    #[test]
    fn split_two_by_two() {
        let (d, e) = block_split(&h2(), &Partition::new(vec![1, 1]).unwrap()).unwrap();
        assert_eq!(d.as_slice(), &[2.0, 0.0, 0.0, 2.0]);
        assert_eq!(e.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn split_single_block_has_no_coupling() {
        let h = random_spd(4, 1);
        let (d, e) = block_split(&h, &Partition::single(4).unwrap()).unwrap();
        assert_eq!(d, h);
        assert!(e.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn split_block_diagonal() {
        let h = SymMatrix::from_diag(&[1.0, 2.0, 3.0]);
        let (d, e) = block_split(&h, &Partition::new(vec![2, 1]).unwrap()).unwrap();
        assert_eq!(d, h);
        assert_eq!(e.max_abs(), 0.0);
    }

    #[test]
    fn split_reassembles_exactly() {
        let h = random_spd(7, 4);
        let (d, e) = block_split(&h, &Partition::new(vec![3, 1, 3]).unwrap()).unwrap();
        assert_eq!(d.add(&e).unwrap(), h);
    }

    #[test]
    fn split_mismatch() {
        let err = block_split(&h2(), &Partition::new(vec![3]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::PartitionMismatch { partition: 3, dim: 2 }));
    }

    #[test]
    fn schur_two_by_two() {
        let (hc, gc) = schur_reduce(&h2(), &[1.0, 1.0], &Partition::new(vec![1, 1]).unwrap(), 0).unwrap();
        assert!((hc.get(0, 0) - 1.5).abs() < 1e-15);
        assert!((gc[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn schur_block_diagonal_is_identity_map() {
        let h = SymMatrix::from_diag(&[2.0, 3.0, 5.0]);
        let g = [1.0, -2.0, 4.0];
        let p = Partition::new(vec![1, 2]).unwrap();
        let (hc, gc) = schur_reduce(&h, &g, &p, 1).unwrap();
        assert_eq!(hc.as_slice(), &[3.0, 0.0, 0.0, 5.0]);
        assert_eq!(gc, vec![-2.0, 4.0]);
    }

    #[test]
    fn schur_requires_spd() {
        let h = SymMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        let err = schur_reduce(&h, &[0.0, 0.0], &Partition::new(vec![1, 1]).unwrap(), 0).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    /// Nested-minimization oracle: for fixed θ_ℓ the minimizer over θ_R is
    /// `θ_R = −H_RR⁻¹(g_R + H_Rℓ θ_ℓ)`; evaluating the full quadratic there at
    /// the basis points 0, e_i, e_i + e_j recovers the induced quadratic.
    #[test]
    fn schur_matches_inner_minimization() {
        let h = random_spd(8, 11);
        let mut rng = CounterRng::from_seed(12);
        let g = rng.fill_normal(8);
        let p = Partition::new(vec![3, 5]).unwrap();
        let (hc, gc) = schur_reduce(&h, &g, &p, 0).unwrap();
        assert!(is_positive_definite(&hc));

        let r_idx: Vec<usize> = (3..8).collect();
        let h_rr = h.principal(&r_idx);
        let induced = |t: &[f64]| -> f64 {
            let mut rhs: Vec<f64> = r_idx.iter().map(|&i| g[i]).collect();
            for (a, &i) in r_idx.iter().enumerate() {
                for (b, &tb) in t.iter().enumerate() {
                    rhs[a] += h.get(i, b) * tb;
                }
            }
            let th_r: Vec<f64> = crate::linalg::spd_solve(&h_rr, &rhs).unwrap().iter().map(|v| -v).collect();
            let mut full = t.to_vec();
            full.extend(th_r);
            crate::linalg::dot(&g, &full) + 0.5 * h.quad_form(&full)
        };
        let q0 = induced(&[0.0; 3]);
        let e = |i: usize| {
            let mut v = [0.0; 3];
            v[i] = 1.0;
            v
        };
        for i in 0..3 {
            let qi = induced(&e(i));
            let qmi = induced(&e(i).map(|x| -x));
            // q(e_i) - q(-e_i) = 2 g_i ; q(e_i) + q(-e_i) - 2 q(0) = H_ii
            assert!(((qi - qmi) / 2.0 - gc[i]).abs() < 1e-9);
            assert!((qi + qmi - 2.0 * q0 - hc.get(i, i)).abs() < 1e-9);
            for j in (i + 1)..3 {
                let mut v = e(i);
                v[j] = 1.0;
                let qij = induced(&v);
                let qj = induced(&e(j));
                let hij = qij - qi - qj + q0;
                assert!((hij - hc.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn whitened_interaction_two_by_two() {
        let m = whitened_interaction(&h2(), &Partition::new(vec![1, 1]).unwrap()).unwrap();
        assert!((m.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((block_coupling(&h2(), &Partition::new(vec![1, 1]).unwrap()).unwrap() - 0.5).abs() < 1e-12);
    }
}
