use serde::Serialize;

use super::model::QuadraticModel;
use super::oracles::{global_oracle, local_oracle};
use crate::error::{Error, Result};
use crate::linalg::{block_split, dot, Matrix, Partition, SymMatrix};
use crate::rng::CounterRng;

/// Quadratic residual map `r(x; θ) = J(x)ᵀθ + ½ θᵀK(x)θ` evaluated at a
/// fixed set of probe inputs. Row `i` of `jacobians` is `J(x_i)`.
#[derive(Debug, Clone)]
pub struct ResidualMap {
    jacobians: Matrix,
    curvatures: Vec<SymMatrix>,
}

impl ResidualMap {
    pub fn new(jacobians: Matrix, curvatures: Vec<SymMatrix>) -> Result<Self> {
        if curvatures.len() != jacobians.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} Jacobian rows but {} curvature matrices",
                jacobians.rows(),
                curvatures.len()
            )));
        }
        if let Some(k) = curvatures.iter().find(|k| k.dim() != jacobians.cols()) {
            return Err(Error::DimensionMismatch(format!(
                "curvature of dimension {} for {} parameters",
                k.dim(),
                jacobians.cols()
            )));
        }
        Ok(Self { jacobians, curvatures })
    }

    /// Gaussian Jacobians and symmetric Gaussian curvatures scaled by `curvature_scale`.
    pub fn random(params: usize, probes: usize, curvature_scale: f64, seed: u64) -> Self {
        let mut rng = CounterRng::from_seed(seed);
        let jacobians = Matrix::from_vec(probes, params, rng.fill_normal(probes * params)).expect("sized");
        let curvatures = (0..probes)
            .map(|_| {
                let raw = rng.fill_normal(params * params);
                SymMatrix::new(params, raw).expect("sized").scaled(curvature_scale)
            })
            .collect();
        Self { jacobians, curvatures }
    }

    pub fn probes(&self) -> usize {
        self.jacobians.rows()
    }

    pub fn params(&self) -> usize {
        self.jacobians.cols()
    }

    pub fn jacobian(&self, probe: usize) -> &[f64] {
        self.jacobians.row(probe)
    }

    pub fn curvature(&self, probe: usize) -> &SymMatrix {
        &self.curvatures[probe]
    }

    pub fn residual(&self, probe: usize, theta: &[f64]) -> f64 {
        dot(self.jacobian(probe), theta) + 0.5 * self.curvatures[probe].quad_form(theta)
    }
}

/// Split of `r_glob(x) − Σ_ℓ r_loc,ℓ(x)` into its four exact contributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualGap {
    /// Evaluated directly from the residual map.
    pub gap: f64,
    /// `Σ_ℓ J_ℓᵀ Δθ_ℓ`.
    pub jacobian: f64,
    /// `Σ_ℓ θ̃_ℓᵀ K_ℓℓ Δθ_ℓ`.
    pub cross: f64,
    /// `½ Σ_ℓ Δθ_ℓᵀ K_ℓℓ Δθ_ℓ`.
    pub diagonal: f64,
    /// `½ θ_globᵀ E_K θ_glob`.
    pub off_diagonal: f64,
}

impl ResidualGap {
    pub fn terms(&self) -> [f64; 4] {
        [self.jacobian, self.cross, self.diagonal, self.off_diagonal]
    }

    pub fn terms_sum(&self) -> f64 {
        self.terms().iter().sum()
    }

    /// `|gap − Σ terms| / (1 + |gap|)`.
    pub fn identity_error(&self) -> f64 {
        (self.gap - self.terms_sum()).abs() / (1.0 + self.gap.abs())
    }
}

pub fn residual_gap_terms(rm: &ResidualMap, m: &QuadraticModel, probe: usize) -> Result<ResidualGap> {
    if rm.params() != m.dim() {
        return Err(Error::DimensionMismatch(format!(
            "residual map over {} parameters, model over {}",
            rm.params(),
            m.dim()
        )));
    }
    if probe >= rm.probes() {
        return Err(Error::InvalidArgument(format!("probe {probe} out of range for {}", rm.probes())));
    }
    let p: &Partition = m.partition();
    let theta = global_oracle(m);
    let local = local_oracle(m)?;

    let mut direct = rm.residual(probe, &theta);
    for l in 0..p.layers() {
        let mut embedded = vec![0.0; m.dim()];
        for i in p.range(l) {
            embedded[i] = local[i];
        }
        direct -= rm.residual(probe, &embedded);
    }

    let k = rm.curvature(probe);
    let (_, e_k) = block_split(k, p)?;
    let j = rm.jacobian(probe);
    let delta: Vec<f64> = theta.iter().zip(&local).map(|(a, b)| a - b).collect();

    let mut jac = 0.0;
    let mut cross = 0.0;
    let mut diag = 0.0;
    for l in 0..p.layers() {
        let idx: Vec<usize> = p.range(l).collect();
        let k_ll = k.principal(&idx);
        let d_l: Vec<f64> = idx.iter().map(|&i| delta[i]).collect();
        let t_l: Vec<f64> = idx.iter().map(|&i| local[i]).collect();
        let j_l: Vec<f64> = idx.iter().map(|&i| j[i]).collect();
        let kd = k_ll.matvec(&d_l);
        jac += dot(&j_l, &d_l);
        cross += dot(&t_l, &kd);
        diag += 0.5 * dot(&d_l, &kd);
    }
    let off = 0.5 * e_k.quad_form(&theta);

    Ok(ResidualGap { gap: direct, jacobian: jac, cross, diagonal: diag, off_diagonal: off })
}
