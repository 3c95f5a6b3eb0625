use serde::{Deserialize, Serialize};

use super::model::QuadraticModel;
use crate::error::{Error, Result};
use crate::linalg::{eigen_sym, Cholesky, Matrix, Partition, SymMatrix};
use crate::rng::{CounterRng, StreamTag};

/// Parameters of a synthetic depth-decaying coupled quadratic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledSpec {
    pub sizes: Vec<usize>,
    /// `γ ∈ (0, 1]`: whitened coupling between layers `ℓ, k` is `β γ^{|ℓ−k|}`.
    pub decay: f64,
    /// `β ≥ 0`.
    pub strength: f64,
    pub seed: u64,
}

const DIAG_STREAM: u32 = 1;
const CROSS_STREAM: u32 = 2;
const GRAD_STREAM: u32 = 3;
const MAX_SHIFT_DOUBLINGS: i32 = 80;

/// Builds a positive definite quadratic whose curvature-whitened block
/// `H_ℓℓ^{-1/2} H_ℓk H_kk^{-1/2}` has spectral norm `β γ^{|ℓ−k|}`.
///
/// Diagonal blocks are `G Gᵀ/d + ½ I` with Gaussian `G`. Each gradient block
/// is scaled to `g_ℓᵀ H_ℓℓ⁻¹ g_ℓ = 1`, so every layer carries the same
/// decoupled gain and set comparisons isolate the effect of coupling. If the
/// assembled matrix is not positive definite, the smallest shift `c I` with
/// `c ∈ {0} ∪ {2^k · 1e-6}` that makes Cholesky succeed is added.
pub fn gen_coupled_instance(spec: &CoupledSpec) -> Result<QuadraticModel> {
    if !(spec.decay > 0.0 && spec.decay <= 1.0) {
        return Err(Error::InvalidArgument(format!("decay {} outside (0, 1]", spec.decay)));
    }
    if !(spec.strength >= 0.0 && spec.strength.is_finite()) {
        return Err(Error::InvalidArgument(format!("strength {} must be non-negative", spec.strength)));
    }
    let p = Partition::new(spec.sizes.clone())?;
    let n = p.dim();
    let layers = p.layers();

    let mut diag_blocks = Vec::with_capacity(layers);
    let mut roots = Vec::with_capacity(layers);
    for l in 0..layers {
        let d = p.sizes()[l];
        let mut rng = CounterRng::new(spec.seed, StreamTag::new(DIAG_STREAM, l as u32));
        let g = Matrix::from_vec(d, d, rng.fill_normal(d * d))?;
        let mut gg = g.matmul(&g.transpose())?;
        gg.scale(1.0 / d as f64);
        let block = SymMatrix::from_matrix(&gg)?.shifted(0.5);
        roots.push(eigen_sym(&block)?.map(f64::sqrt).to_matrix());
        diag_blocks.push(block);
    }

    let mut h = Matrix::zeros(n, n);
    for l in 0..layers {
        for (bi, i) in p.range(l).enumerate() {
            for (bj, j) in p.range(l).enumerate() {
                h.set(i, j, diag_blocks[l].get(bi, bj));
            }
        }
    }
    if spec.strength > 0.0 {
        for l in 0..layers {
            for k in (l + 1)..layers {
                let (dl, dk) = (p.sizes()[l], p.sizes()[k]);
                let pair = (l * layers + k) as u32;
                let mut rng = CounterRng::new(spec.seed, StreamTag::new(CROSS_STREAM, pair));
                let mut nrm = Matrix::from_vec(dl, dk, rng.fill_normal(dl * dk))?;
                let gram = SymMatrix::from_matrix(&nrm.matmul(&nrm.transpose())?)?;
                let top = eigen_sym(&gram)?.max().sqrt();
                if top > 0.0 {
                    nrm.scale(1.0 / top);
                }
                let weight = spec.strength * spec.decay.powi((k - l) as i32);
                let mut blk = roots[l].matmul(&nrm)?.matmul(&roots[k])?;
                blk.scale(weight);
                for (bi, i) in p.range(l).enumerate() {
                    for (bj, j) in p.range(k).enumerate() {
                        h.set(i, j, blk.get(bi, bj));
                        h.set(j, i, blk.get(bi, bj));
                    }
                }
            }
        }
    }
    let mut hs = SymMatrix::from_matrix(&h)?;
    if Cholesky::factor(&hs).is_err() {
        let base = hs.clone();
        let mut k = 0;
        loop {
            let c = 2f64.powi(k) * 1e-6;
            hs = base.shifted(c);
            if Cholesky::factor(&hs).is_ok() {
                break;
            }
            k += 1;
            if k > MAX_SHIFT_DOUBLINGS {
                return Err(Error::InvalidArgument("could not make the coupled Hessian positive definite".into()));
            }
        }
    }

    let mut g = Vec::with_capacity(n);
    for (l, block) in diag_blocks.iter().enumerate() {
        let d = p.sizes()[l];
        let mut rng = CounterRng::new(spec.seed, StreamTag::new(GRAD_STREAM, l as u32));
        let mut v = rng.fill_normal(d);
        let whitened = Cholesky::factor(block)?.inv_quad_form(&v).sqrt();
        if whitened > 0.0 {
            v.iter_mut().for_each(|x| *x /= whitened);
        }
        g.extend(v);
    }
    QuadraticModel::new(g, hs, p)
}
