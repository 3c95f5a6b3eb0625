use serde::{Deserialize, Serialize};

use super::stats::FeatureStats;
use crate::error::{Error, Result};
use crate::linalg::{eigen_sym, Cholesky, Partition, SymMatrix};

/// Eigenvalues below this fraction of `λ_max` count as exact zeros in the
/// effective rank.
const ERANK_ZERO_TOL: f64 = 1e-12;
/// Relative slack on the low-energy projector threshold `λ ≤ 2σ_ℓ`.
const PROJECTOR_TOL: f64 = 1e-12;

/// Spectral diagnostics of one layer's feature geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessReport {
    pub theta_star: Vec<f64>,
    pub resnorm: f64,
    pub noise_excess: f64,
    pub budget_floor: f64,
    pub erank: f64,
    /// Eigenvalues of `Σ` divided by their sum, descending.
    pub spectrum_normalized: Vec<f64>,
}

fn factor(fs: &FeatureStats) -> Result<Cholesky> {
    Cholesky::factor(&fs.sigma_mat)
}

/// `θ⋆ = Σ⁻¹c`, the least-squares adapter.
pub fn theta_star(fs: &FeatureStats) -> Result<Vec<f64>> {
    Ok(factor(fs)?.solve(&fs.c))
}

/// Squared projected-residual norm `cᵀΣ⁻¹c`, twice the loss drop of the
/// best linear intervention on these features.
pub fn projected_resnorm(fs: &FeatureStats) -> Result<f64> {
    Ok(factor(fs)?.inv_quad_form(&fs.c).max(0.0))
}

/// Excess risk `½ tr(ΓΣ⁻¹)` incurred by estimating `c` with noise covariance `Γ`.
pub fn noise_excess(fs: &FeatureStats, gamma: &SymMatrix) -> Result<f64> {
    if gamma.dim() != fs.d {
        return Err(Error::DimensionMismatch(format!("Γ dimension {} for features of dimension {}", gamma.dim(), fs.d)));
    }
    let chol = factor(fs)?;
    let solved = chol.solve_matrix(&gamma.to_matrix());
    let trace: f64 = (0..fs.d).map(|i| solved.get(i, i)).sum();
    Ok(0.5 * trace.max(0.0))
}

/// Lower bound `½(‖Σ^{-1/2}c‖ − √λ_max · B)₊²` on the excess risk of any
/// adapter with `‖θ‖ ≤ B`.
pub fn budget_floor(fs: &FeatureStats, budget: f64) -> Result<f64> {
    if !(budget >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget {budget} must be non-negative")));
    }
    let whitened = projected_resnorm(fs)?.sqrt();
    let lmax = eigen_sym(&fs.sigma_mat)?.max().max(0.0);
    let gap = (whitened - lmax.sqrt() * budget).max(0.0);
    Ok(0.5 * gap * gap)
}

/// Exact excess risk `min_{‖θ‖₂≤B} R(θ) − R(θ⋆)` of the budget-constrained
/// least-squares problem, the quantity [`budget_floor`] bounds from below.
/// Solved in the eigenbasis of `Σ`: `θ(μ) = (Σ + μI)⁻¹c` with the
/// multiplier `μ ≥ 0` found by bisection on `‖θ(μ)‖ = B`.
pub fn budget_oracle_gap(fs: &FeatureStats, budget: f64) -> Result<f64> {
    if !(budget >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget {budget} must be non-negative")));
    }
    Cholesky::factor(&fs.sigma_mat)?;
    let spec = eigen_sym(&fs.sigma_mat)?;
    let lam = spec.values();
    let b = spec.rotate(&fs.c);
    let norm_at = |mu: f64| b.iter().zip(lam).map(|(bi, li)| (bi / (li + mu)).powi(2)).sum::<f64>().sqrt();
    let excess = |mu: f64| {
        0.5 * b.iter().zip(lam).map(|(bi, li)| li * (bi / (li + mu) - bi / li).powi(2)).sum::<f64>()
    };
    if norm_at(0.0) <= budget {
        return Ok(0.0);
    }
    if budget == 0.0 {
        return Ok(excess(f64::INFINITY));
    }
    let (mut lo, mut hi) = (0.0, b.iter().map(|x| x * x).sum::<f64>().sqrt() / budget);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_at(mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(excess(hi))
}

/// Eigenvalues of `Σ` divided by their sum, descending, with numerical zeros clamped.
pub fn normalized_spectrum(fs: &FeatureStats) -> Result<Vec<f64>> {
    let spec = eigen_sym(&fs.sigma_mat)?;
    let lmax = spec.max();
    if !(lmax > 0.0) {
        return Err(Error::DegenerateActivation("feature covariance has zero trace".into()));
    }
    let cut = ERANK_ZERO_TOL * lmax;
    let vals: Vec<f64> = spec.values().iter().map(|&v| if v <= cut { 0.0 } else { v }).collect();
    let total: f64 = vals.iter().sum();
    Ok(vals.iter().map(|v| v / total).collect())
}

/// Entropy effective rank `exp(−Σ p_i log p_i)`, clamped to `[1, d]`.
pub fn effective_rank(fs: &FeatureStats) -> Result<f64> {
    let p = normalized_spectrum(fs)?;
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok(h.exp().clamp(1.0, fs.d as f64))
}

/// All spectral diagnostics for one layer. `gamma` is the noise covariance
/// used for the excess term.
pub fn hardness_report(fs: &FeatureStats, gamma: &SymMatrix, budget: f64) -> Result<HardnessReport> {
    Ok(HardnessReport {
        theta_star: theta_star(fs)?,
        resnorm: projected_resnorm(fs)?,
        noise_excess: noise_excess(fs, gamma)?,
        budget_floor: budget_floor(fs, budget)?,
        erank: effective_rank(fs)?,
        spectrum_normalized: normalized_spectrum(fs)?,
    })
}

/// `½(‖r⋆‖ − A(B)√(dσ))₊²`: no bounded nonlinear adapter on a layer of
/// energy `σ` can push the risk below this.
pub fn nonlinear_floor(r_star_norm: f64, a_b: f64, d: usize, sigma: f64) -> f64 {
    let reach = a_b * (d as f64 * sigma.max(0.0)).sqrt();
    let gap = (r_star_norm - reach).max(0.0);
    0.5 * gap * gap
}

/// `L·‖Δθ‖·√E‖x‖²·‖G_θ − r⋆‖ + ½L²‖Δθ‖²E‖x‖²`.
pub fn nonlinear_flatness_bound(l_b: f64, dtheta_norm: f64, e_xsq: f64, resid_norm: f64) -> f64 {
    let step = l_b * dtheta_norm;
    step * e_xsq.sqrt() * resid_norm + 0.5 * step * step * e_xsq
}

/// Lower bound on the whitened coupling of `Σ` built only from its
/// low-energy cross-covariances:
/// `(1/(4d) Σ_{ℓ≠k} ‖P_ℓ Σ_ℓk P_k‖_F² / (σ_ℓ σ_k))^{1/2}`, where `d` is the
/// total dimension and `P_ℓ` projects onto eigendirections of `Σ_ℓℓ` with
/// eigenvalue at most `2σ_ℓ`.
pub fn sigma_coupling_bound(sigma_full: &SymMatrix, p: &Partition) -> Result<f64> {
    p.check_dim(sigma_full.dim())?;
    let layers = p.layers();
    let mut projectors = Vec::with_capacity(layers);
    let mut energies = Vec::with_capacity(layers);
    for l in 0..layers {
        let idx: Vec<usize> = p.range(l).collect();
        let block = sigma_full.principal(&idx);
        Cholesky::factor(&block)?;
        let sigma = block.trace() / idx.len() as f64;
        let limit = 2.0 * sigma * (1.0 + PROJECTOR_TOL);
        projectors.push(eigen_sym(&block)?.map(|v| if v <= limit { 1.0 } else { 0.0 }).to_matrix());
        energies.push(sigma);
    }
    let mut total = 0.0;
    for l in 0..layers {
        let rows: Vec<usize> = p.range(l).collect();
        for k in (0..layers).filter(|&k| k != l) {
            let cols: Vec<usize> = p.range(k).collect();
            let cross = sigma_full.block(&rows, &cols);
            let projected = projectors[l].matmul(&cross)?.matmul(&projectors[k])?;
            let f = projected.frobenius_norm();
            total += f * f / (energies[l] * energies[k]);
        }
    }
    Ok((total / (4.0 * p.dim() as f64)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{block_coupling, Matrix};
    use crate::rng::CounterRng;

    fn stats(sigma: SymMatrix, c: Vec<f64>) -> FeatureStats {
        FeatureStats::from_parts(sigma, c, 1).unwrap()
    }

    fn random_spd(d: usize, seed: u64) -> SymMatrix {
        let mut rng = CounterRng::from_seed(seed);
        let g = Matrix::from_vec(d, d + 2, rng.fill_normal(d * (d + 2))).unwrap();
        let mut m = g.matmul(&g.transpose()).unwrap();
        m.scale(1.0 / d as f64);
        SymMatrix::from_matrix(&m).unwrap().shifted(0.05)
    }

    #[test]
    fn resnorm_examples() {
        assert_eq!(projected_resnorm(&stats(SymMatrix::identity(2), vec![3.0, 4.0])).unwrap(), 25.0);
        let fs = stats(SymMatrix::from_diag(&[1.0, 4.0]), vec![2.0, 2.0]);
        assert!((projected_resnorm(&fs).unwrap() - 5.0).abs() < 1e-14);
        assert_eq!(projected_resnorm(&stats(SymMatrix::identity(3), vec![0.0; 3])).unwrap(), 0.0);
    }

    #[test]
    fn singular_covariance_is_refused_unless_ridged() {
        let fs = stats(SymMatrix::from_diag(&[1.0, 0.0]), vec![1.0, 0.0]);
        assert!(matches!(projected_resnorm(&fs), Err(Error::NotPositiveDefinite { .. })));
        let r = projected_resnorm(&fs.ridged(1e-3).unwrap()).unwrap();
        assert!((r - 1.0 / 1.001).abs() < 1e-12);
    }

    #[test]
    fn noise_excess_examples() {
        let fs = stats(SymMatrix::identity(3), vec![0.0; 3]);
        assert!((noise_excess(&fs, &SymMatrix::identity(3).scaled(0.25)).unwrap() - 0.375).abs() < 1e-15);
        let fs = stats(SymMatrix::from_diag(&[1.0, 0.01]), vec![0.0; 2]);
        assert!((noise_excess(&fs, &SymMatrix::identity(2)).unwrap() - 50.5).abs() < 1e-10);
    }

    #[test]
    fn budget_floor_examples() {
        let fs = stats(SymMatrix::from_diag(&[1.0, 0.01]), vec![0.0, 0.1]);
        assert!((budget_floor(&fs, 0.5).unwrap() - 0.125).abs() < 1e-12);
        assert!((budget_floor(&fs, 0.0).unwrap() - 0.5 * projected_resnorm(&fs).unwrap()).abs() < 1e-15);
        assert_eq!(budget_floor(&fs, 10.0).unwrap(), 0.0);
        assert!(budget_floor(&fs, -1.0).is_err());
    }

    #[test]
    fn budget_oracle_examples() {
        let fs = stats(SymMatrix::from_diag(&[1.0, 0.01]), vec![0.0, 0.1]);
        // θ⋆ = (0, 10); with ‖θ‖ ≤ 0.5 the best point is (0, 0.5): ½·0.01·9.5².
        assert!((budget_oracle_gap(&fs, 0.5).unwrap() - 0.5 * 0.01 * 9.5 * 9.5).abs() < 1e-12);
        assert!((budget_oracle_gap(&fs, 0.0).unwrap() - 0.5 * projected_resnorm(&fs).unwrap()).abs() < 1e-15);
        assert_eq!(budget_oracle_gap(&fs, 10.0).unwrap(), 0.0);
        assert!(budget_oracle_gap(&fs, f64::NAN).is_err());
    }

    #[test]
    fn budget_oracle_beats_sampled_feasible_points() {
        let mut rng = CounterRng::from_seed(77);
        for seed in 0..20 {
            let d = 1 + seed as usize % 4;
            let sigma = random_spd(d, seed);
            let c = rng.fill_normal(d);
            let fs = stats(sigma.clone(), c.clone());
            let budget = 0.3 * rng.uniform();
            let best = budget_oracle_gap(&fs, budget).unwrap();
            assert!(budget_floor(&fs, budget).unwrap() <= best + 1e-12);
            let theta = theta_star(&fs).unwrap();
            for _ in 0..200 {
                let dir = rng.fill_normal(d);
                let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                let r = budget * rng.uniform();
                let diff: Vec<f64> = dir.iter().zip(&theta).map(|(u, t)| u / n * r - t).collect();
                let e = 0.5 * sigma.quad_form(&diff);
                assert!(best <= e + 1e-12);
            }
        }
    }

    #[test]
    fn effective_rank_examples() {
        let fs = stats(SymMatrix::identity(4), vec![0.0; 4]);
        assert!((effective_rank(&fs).unwrap() - 4.0).abs() < 1e-12);
        let fs = stats(SymMatrix::from_diag(&[1.0, 0.0]), vec![0.0; 2]);
        assert_eq!(effective_rank(&fs).unwrap(), 1.0);
        let fs = stats(SymMatrix::from_diag(&[0.7, 0.2, 0.1]), vec![0.0; 3]);
        let oracle = (-(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln())).exp();
        assert!((effective_rank(&fs).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 2.2).abs() < 0.05);
        let fs = stats(SymMatrix::zeros(2), vec![0.0; 2]);
        assert!(matches!(effective_rank(&fs), Err(Error::DegenerateActivation(_))));
    }

    #[test]
    fn diagonalized_identities() {
        for seed in 0..30 {
            let d = 2 + (seed as usize % 6);
            let sigma = random_spd(d, seed);
            let mut rng = CounterRng::from_seed(1000 + seed);
            let c = rng.fill_normal(d);
            let gamma = random_spd(d, 2000 + seed);
            let fs = stats(sigma.clone(), c.clone());
            let spec = eigen_sym(&sigma).unwrap();
            let ct = spec.rotate(&c);
            let direct: f64 = ct.iter().zip(spec.values()).map(|(x, l)| x * x / l).sum();
            assert!((projected_resnorm(&fs).unwrap() - direct).abs() <= 1e-8 * direct.max(1.0));
            let gt = spec.vectors().transpose().matmul(&gamma.to_matrix()).unwrap().matmul(spec.vectors()).unwrap();
            let ne: f64 = 0.5 * (0..d).map(|i| gt.get(i, i) / spec.values()[i]).sum::<f64>();
            assert!((noise_excess(&fs, &gamma).unwrap() - ne).abs() <= 1e-8 * ne.max(1.0));
        }
    }

    #[test]
    fn excess_risk_is_sigma_distance() {
        // R(θ) = ½θᵀΣθ − cᵀθ, so R(θ) − R(θ⋆) = ½‖θ − θ⋆‖²_Σ.
        for seed in 0..20 {
            let sigma = random_spd(5, seed);
            let mut rng = CounterRng::from_seed(seed + 77);
            let c = rng.fill_normal(5);
            let fs = stats(sigma.clone(), c.clone());
            let ts = theta_star(&fs).unwrap();
            let risk = |t: &[f64]| 0.5 * sigma.quad_form(t) - crate::linalg::dot(&c, t);
            let t = rng.fill_normal(5);
            let diff = crate::linalg::sub(&t, &ts);
            let lhs = risk(&t) - risk(&ts);
            let rhs = 0.5 * sigma.quad_form(&diff);
            assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1e-12), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn shrinking_an_eigenvalue_makes_things_harder() {
        let c = vec![0.3, -0.2, 0.5];
        let gamma = SymMatrix::identity(3).scaled(0.1);
        let mut prev_noise = 0.0;
        let mut prev_floor = 0.0;
        for &l in &[1.0, 0.5, 0.1, 0.01] {
            let fs = stats(SymMatrix::from_diag(&[2.0, 1.5, l]), c.clone());
            let ne = noise_excess(&fs, &gamma).unwrap();
            let bf = budget_floor(&fs, 0.2).unwrap();
            assert!(ne >= prev_noise && bf >= prev_floor);
            prev_noise = ne;
            prev_floor = bf;
        }
    }

    #[test]
    fn nonlinear_floor_examples() {
        assert_eq!(nonlinear_floor(2.0, 1.0, 3, 0.0), 2.0);
        assert_eq!(nonlinear_floor(1.0, 1.0, 4, 1.0), 0.0);
        let mut prev = f64::INFINITY;
        for s in [0.0, 0.01, 0.05, 0.1] {
            let v = nonlinear_floor(1.0, 1.0, 2, s);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn flatness_examples() {
        assert_eq!(nonlinear_flatness_bound(1.0, 0.0, 2.0, 3.0), 0.0);
        assert_eq!(nonlinear_flatness_bound(1.0, 0.5, 0.0, 3.0), 0.0);
        assert!((nonlinear_flatness_bound(2.0, 0.5, 4.0, 1.0) - (2.0 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn sigma_bound_examples() {
        let p = Partition::new(vec![1, 1]).unwrap();
        for a in [0.0, 0.3, -0.6] {
            let s = SymMatrix::from_rows(&[&[1.0, a], &[a, 1.0]]).unwrap();
            assert!((sigma_coupling_bound(&s, &p).unwrap() - a.abs() / 2.0).abs() < 1e-15);
        }
        let bd = SymMatrix::from_rows(&[&[2.0, 0.3, 0.0], &[0.3, 1.0, 0.0], &[0.0, 0.0, 4.0]]).unwrap();
        assert_eq!(sigma_coupling_bound(&bd, &Partition::new(vec![2, 1]).unwrap()).unwrap(), 0.0);
        let bad = SymMatrix::from_rows(&[&[0.0, 0.1], &[0.1, 1.0]]).unwrap();
        assert!(matches!(sigma_coupling_bound(&bad, &p), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn sigma_bound_below_whitened_coupling() {
        for seed in 0..500u64 {
            let sizes = vec![1 + (seed as usize % 3), 2, 1 + (seed as usize / 3 % 3)];
            let p = Partition::new(sizes).unwrap();
            let s = random_spd(p.dim(), seed);
            let bound = sigma_coupling_bound(&s, &p).unwrap();
            let rho = block_coupling(&s, &p).unwrap();
            assert!(bound <= rho + 1e-12, "seed {seed}: {bound} > {rho}");
        }
    }
}
