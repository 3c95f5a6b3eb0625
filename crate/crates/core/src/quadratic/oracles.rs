use serde::Serialize;

use super::model::QuadraticModel;
use crate::error::{Error, Result};
use crate::linalg::{
    block_coupling, block_factors, eigen_sym, norm2, schur_reduce, sub, Cholesky, SymMatrix,
};

/// `ρ = ‖D^{-1/2} E D^{-1/2}‖₂` for the model's layer partition.
pub fn coupling_rho(m: &QuadraticModel) -> Result<f64> {
    block_coupling(m.h(), m.partition())
}

/// Joint minimizer `θ_glob = −H⁻¹g`.
pub fn global_oracle(m: &QuadraticModel) -> Vec<f64> {
    m.factor().solve(m.g()).into_iter().map(|x| -x).collect()
}

/// Blockwise minimizer `θ_loc = (−H_11⁻¹g_1, …, −H_LL⁻¹g_L)`.
pub fn local_oracle(m: &QuadraticModel) -> Result<Vec<f64>> {
    let factors = block_factors(m.h(), m.partition())?;
    let mut theta = Vec::with_capacity(m.dim());
    for (l, f) in factors.iter().enumerate() {
        theta.extend(f.solve(m.gradient_block(l)).into_iter().map(|x| -x));
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdditivityGap {
    /// `‖θ_glob − θ_loc‖₂`.
    pub gap: f64,
    /// `ρ/(1−ρ) · ‖D⁻¹‖₂ · ‖g‖₂`.
    pub bound: f64,
    pub rho: f64,
}

pub fn additivity_gap(m: &QuadraticModel) -> Result<AdditivityGap> {
    let rho = coupling_rho(m)?;
    if rho >= 1.0 {
        return Err(Error::CouplingTooStrong { rho });
    }
    let gap = norm2(&sub(&global_oracle(m), &local_oracle(m)?));
    // ‖D⁻¹‖₂ = 1 / min over blocks of λ_min(H_ℓℓ)
    let mut lambda_min = f64::INFINITY;
    for l in 0..m.layers() {
        lambda_min = lambda_min.min(eigen_sym(&m.hessian_block(l))?.min());
    }
    let bound = rho / (1.0 - rho) / lambda_min * norm2(m.g());
    Ok(AdditivityGap { gap, bound, rho })
}

/// `½ g_Sᵀ H_SS⁻¹ g_S` for an arbitrary (possibly empty) layer set.
pub(crate) fn restricted_gain(m: &QuadraticModel, layers: &[usize]) -> Result<f64> {
    if layers.is_empty() {
        return Ok(0.0);
    }
    let idx = m.partition().indices(layers);
    let h_ss = m.h().principal(&idx);
    let g_s: Vec<f64> = idx.iter().map(|&i| m.g()[i]).collect();
    Ok(0.5 * Cholesky::factor(&h_ss)?.inv_quad_form(&g_s))
}

/// Loss reduction `Δ(S) = ½ g_Sᵀ H_SS⁻¹ g_S` from adapting layers `S` only.
pub fn gain(m: &QuadraticModel, layers: &[usize]) -> Result<f64> {
    let s = m.layer_set(layers)?;
    if s.is_empty() {
        return Err(Error::EmptySelection);
    }
    restricted_gain(m, &s)
}

/// Decoupled proxy `Δ_add(S) = ½ Σ_{ℓ∈S} g_ℓᵀ H_ℓℓ⁻¹ g_ℓ`.
pub fn additive_proxy(m: &QuadraticModel, layers: &[usize]) -> Result<f64> {
    let s = m.layer_set(layers)?;
    if s.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut total = 0.0;
    for &l in &s {
        total += 0.5 * Cholesky::factor(&m.hessian_block(l))?.inv_quad_form(m.gradient_block(l));
    }
    Ok(total)
}

/// Set-level coupling `ρ_S` of the restricted Hessian `H_SS`.
pub fn set_coupling(m: &QuadraticModel, layers: &[usize]) -> Result<f64> {
    let s = m.layer_set(layers)?;
    if s.is_empty() {
        return Err(Error::EmptySelection);
    }
    let idx = m.partition().indices(&s);
    block_coupling(&m.h().principal(&idx), &m.partition().restrict(&s)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sandwich {
    pub delta: f64,
    pub delta_add: f64,
    pub rho_s: f64,
    /// `Δ_add / (1 + ρ_S)`, a guaranteed fraction of the additive proxy.
    pub lower: f64,
    /// `Δ_add / (1 − ρ_S)`.
    pub upper: f64,
}

impl Sandwich {
    pub fn holds(&self, tol: f64) -> bool {
        self.lower <= self.delta + tol && self.delta <= self.upper + tol
    }
}

pub fn sandwich_check(m: &QuadraticModel, layers: &[usize]) -> Result<Sandwich> {
    let rho_s = set_coupling(m, layers)?;
    if rho_s >= 1.0 {
        return Err(Error::CouplingTooStrong { rho: rho_s });
    }
    let delta = gain(m, layers)?;
    let delta_add = additive_proxy(m, layers)?;
    Ok(Sandwich {
        delta,
        delta_add,
        rho_s,
        lower: delta_add / (1.0 + rho_s),
        upper: delta_add / (1.0 - rho_s),
    })
}

/// `Q^{(−F)} = min Q(θ)` subject to `θ_F = 0`.
pub fn frozen_value(m: &QuadraticModel, frozen: &[usize]) -> Result<f64> {
    let f = m.layer_set(frozen)?;
    let free: Vec<usize> = (0..m.layers()).filter(|l| !f.contains(l)).collect();
    Ok(m.q0() - restricted_gain(m, &free)?)
}

/// Freeze-penalty quantities for a single layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreezeReport {
    /// Exact `Q^{(−ℓ)} − Q⋆`.
    pub penalty: f64,
    /// `½‖w_ℓ‖²`.
    pub lower: f64,
    /// `‖w_ℓ‖² / (2(1 − κ_ℓ))`.
    pub upper: f64,
    pub kappa: f64,
    pub w_norm_sq: f64,
    /// `max(‖u_ℓ‖ − C_ℓ, 0)`.
    pub s: f64,
    pub u_norm: f64,
    pub c: f64,
}

impl FreezeReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.lower <= self.penalty + tol
            && self.penalty <= self.upper + tol
            && 0.5 * self.s * self.s <= self.penalty + tol
    }
}

/// Loss increase from freezing `layer` while every other layer is adapted,
/// with the compensation bounds built from the conditional quadratic.
pub fn freeze_penalty(m: &QuadraticModel, layer: usize) -> Result<FreezeReport> {
    let p = m.partition();
    p.check_layer(layer)?;
    if p.layers() < 2 {
        return Err(Error::InvalidArgument("freeze penalty needs at least two layers".into()));
    }
    let rest: Vec<usize> = (0..p.layers()).filter(|&l| l != layer).collect();

    // exact value by restricted minimization over θ_R
    let q_star = m.optimum_value();
    let q_frozen = m.q0() - restricted_gain(m, &rest)?;
    let penalty = q_frozen - q_star;

    let (h_cond, g_tilde) = schur_reduce(m.h(), m.g(), p, layer)?;
    let h_ll = m.hessian_block(layer);
    let f_ll = Cholesky::factor(&h_ll)?;
    let w_norm_sq = f_ll.inv_quad_form(&g_tilde);

    // κ = ‖H_ℓℓ^{-1/2} H_ℓR H_RR^{-1/2}‖² = λ_max(L⁻¹ (H_ℓℓ − H_{ℓ|R}) L⁻ᵀ)
    let coupling_part = h_ll.sub(&h_cond)?;
    let x = f_ll.forward_matrix(&coupling_part.to_matrix());
    let whitened = SymMatrix::from_matrix(&f_ll.forward_matrix(&x.transpose()))?;
    let kappa = eigen_sym(&whitened)?.max().max(0.0);

    let u_norm = f_ll.inv_quad_form(m.gradient_block(layer)).sqrt();
    let idx_r = p.indices(&rest);
    let g_r: Vec<f64> = idx_r.iter().map(|&i| m.g()[i]).collect();
    let f_rr = Cholesky::factor(&m.h().principal(&idx_r))?;
    let c = kappa.sqrt() * f_rr.inv_quad_form(&g_r).sqrt();
    let s = (u_norm - c).max(0.0);

    Ok(FreezeReport {
        penalty,
        lower: 0.5 * w_norm_sq,
        upper: w_norm_sq / (2.0 * (1.0 - kappa)),
        kappa,
        w_norm_sq,
        s,
        u_norm,
        c,
    })
}

/// Freezing a superset `F ∋ ℓ` never costs less than freezing `ℓ` alone.
pub fn freeze_monotonicity(m: &QuadraticModel, frozen: &[usize], layer: usize) -> Result<bool> {
    let f = m.layer_set(frozen)?;
    if !f.contains(&layer) {
        return Err(Error::InvalidArgument(format!("layer {layer} is not in the frozen set")));
    }
    let q_star = m.optimum_value();
    let pen_f = frozen_value(m, &f)? - q_star;
    let pen_l = frozen_value(m, &[layer])? - q_star;
    Ok(pen_f >= pen_l - 1e-10)
}
