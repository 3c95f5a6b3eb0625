//! Randomized audit of every bound and identity the library relies on.
//! Each instance seed yields one row per entry of [`CHECKS`]; a row records
//! the exact quantity, the bound it is compared against, and whether the
//! inequality (or identity) held.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{
    block_coupling, block_split, eigen_sym, spectral_norm, whitened_interaction, Matrix, Partition, SymMatrix,
};
use crate::quadratic::{
    additivity_gap, freeze_penalty, frozen_value, residual_gap_terms, sandwich_check, QuadraticModel, ResidualMap,
};
use crate::residual::{budget_floor, budget_oracle_gap, projected_resnorm, sigma_coupling_bound, FeatureStats};
use crate::rng::{CounterRng, StreamTag};

const VERIFY_STREAM: u32 = 8;
/// Slack for inequalities: relative to the magnitudes compared.
const INEQ_TOL: f64 = 1e-9;
/// Relative tolerance of the resnorm/least-squares identity.
const RESNORM_TOL: f64 = 1e-8;
/// Tolerance of the residual-gap identity, relative to `1 + |gap|`.
const GAP_TOL: f64 = 1e-10;

pub const CHECKS: [&str; 13] = [
    "additivity_gap",
    "sandwich_lower",
    "sandwich_upper",
    "freeze_lower",
    "freeze_upper",
    "freeze_half_s_sq",
    "freeze_monotone",
    "interaction_lower",
    "interaction_upper",
    "sigma_coupling",
    "resnorm_identity",
    "budget_floor",
    "residual_gap_identity",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub seed: u64,
    pub check: &'static str,
    pub exact: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub rows: Vec<CheckRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn violations(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    /// CSV with columns `seed,check,exact,bound,pass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,check,exact,bound,pass\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.seed, r.check, fmt_f64(r.exact), fmt_f64(r.bound), r.pass));
        }
        out
    }
}

/// Audits instances `seed, seed+1, …, seed+instances−1`.
pub fn run_verify(instances: usize, seed: u64) -> Result<VerifyReport> {
    if instances == 0 {
        return Err(Error::InvalidArgument("instances must be at least 1".into()));
    }
    let rows = (0..instances as u64)
        .into_par_iter()
        .map(|i| check_instance(seed.wrapping_add(i)))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(VerifyReport { rows })
}

/// All checks for one instance seed. A check whose computation fails is
/// reported as a failing row with NaN values rather than aborting the run.
pub fn check_instance(seed: u64) -> Vec<CheckRow> {
    let mut rng = CounterRng::new(seed, StreamTag::new(VERIFY_STREAM, 0));
    let inst = Instance::draw(&mut rng);
    let outcomes: [Result<(f64, f64, bool)>; 13] = [
        inst.additivity(),
        inst.sandwich(true),
        inst.sandwich(false),
        inst.freeze(0),
        inst.freeze(1),
        inst.freeze(2),
        inst.monotone(),
        inst.interaction(true),
        inst.interaction(false),
        inst.sigma_coupling(),
        inst.resnorm_identity(),
        inst.budget(),
        inst.residual_gap(seed),
    ];
    CHECKS
        .iter()
        .zip(outcomes)
        .map(|(&check, o)| {
            let (exact, bound, pass) = o.unwrap_or((f64::NAN, f64::NAN, false));
            CheckRow { seed, check, exact, bound, pass }
        })
        .collect()
}

/// `a ≤ b` up to a tolerance scaled by the magnitudes involved.
fn le(a: f64, b: f64) -> bool {
    a <= b + INEQ_TOL * (1.0 + a.abs() + b.abs())
}

struct Instance {
    model: QuadraticModel,
    /// Layer set for the sandwich check.
    set: Vec<usize>,
    frozen_layer: usize,
    frozen_set: Vec<usize>,
    sigma: SymMatrix,
    ls_features: Matrix,
    ls_targets: Vec<f64>,
    budget: f64,
}

fn random_spd(rng: &mut CounterRng, d: usize) -> SymMatrix {
    let g = Matrix::from_vec(d, d + 2, rng.fill_normal(d * (d + 2))).expect("shape");
    let scale = (rng.normal() * 0.5).exp();
    SymMatrix::from_fn(d, |i, j| {
        scale * (0..d + 2).map(|k| g.get(i, k) * g.get(j, k)).sum::<f64>() / (d + 2) as f64
    })
    .shifted(0.05 * scale)
}

impl Instance {
    fn draw(rng: &mut CounterRng) -> Self {
        let layers = rng.int_between(2, 5);
        let sizes: Vec<usize> = (0..layers).map(|_| rng.int_between(1, 8)).collect();
        let p = Partition::new(sizes).expect("positive sizes");
        let d = p.dim();

        // H = R (I + M) R with R the block-diagonal symmetric square root of
        // SPD blocks and M off-diagonal with ‖M‖₂ = ρ < 1, so the whitened
        // coupling is exactly ρ.
        let mut root = Matrix::zeros(d, d);
        let mut owner = Vec::with_capacity(d);
        for l in 0..layers {
            let r = p.range(l);
            let sqrt = eigen_sym(&random_spd(rng, r.len())).expect("finite").map(f64::sqrt);
            for i in 0..r.len() {
                owner.push(l);
                for j in 0..r.len() {
                    root.set(r.start + i, r.start + j, sqrt.get(i, j));
                }
            }
        }
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..i {
                if owner[i] != owner[j] {
                    let v = rng.normal();
                    m.set(i, j, v);
                    m.set(j, i, v);
                }
            }
        }
        let rho = 0.05 + 0.85 * rng.uniform();
        let m_sym = SymMatrix::from_matrix(&m).expect("symmetric");
        let norm = spectral_norm(&m_sym).expect("finite");
        let core = SymMatrix::identity(d).add(&m_sym.scaled(rho / norm)).expect("same dim");
        let h = SymMatrix::from_matrix(&root.matmul(&core.to_matrix()).unwrap().matmul(&root.transpose()).unwrap())
            .expect("symmetric");
        let g = rng.fill_normal(d);
        let model = QuadraticModel::new(g, h, p.clone()).expect("SPD by construction");

        let mut set: Vec<usize> = (0..layers).filter(|_| rng.uniform() < 0.6).collect();
        if set.is_empty() {
            set.push(rng.int_between(0, layers - 1));
        }
        let frozen_layer = rng.int_between(0, layers - 1);
        let frozen_set: Vec<usize> = (0..layers).filter(|&l| l == frozen_layer || rng.uniform() < 0.4).collect();

        let sigma = random_spd(rng, d);
        let k = rng.int_between(1, 20);
        let n = k + 5 + rng.int_between(0, 20);
        let ls_features = Matrix::from_vec(n, k, rng.fill_normal(n * k)).expect("shape");
        let ls_targets = rng.fill_normal(n);
        let budget = 0.5 * rng.uniform();
        Self { model, set, frozen_layer, frozen_set, sigma, ls_features, ls_targets, budget }
    }

    fn additivity(&self) -> Result<(f64, f64, bool)> {
        let a = additivity_gap(&self.model)?;
        Ok((a.gap, a.bound, le(a.gap, a.bound)))
    }

    fn sandwich(&self, lower: bool) -> Result<(f64, f64, bool)> {
        let s = sandwich_check(&self.model, &self.set)?;
        Ok(if lower {
            (s.delta, s.lower, le(s.lower, s.delta))
        } else {
            (s.delta, s.upper, le(s.delta, s.upper))
        })
    }

    fn freeze(&self, which: usize) -> Result<(f64, f64, bool)> {
        let f = freeze_penalty(&self.model, self.frozen_layer)?;
        Ok(match which {
            0 => (f.penalty, f.lower, le(f.lower, f.penalty)),
            1 => (f.penalty, f.upper, le(f.penalty, f.upper)),
            _ => {
                let half = 0.5 * f.s * f.s;
                (f.penalty, half, le(half, f.penalty))
            }
        })
    }

    fn monotone(&self) -> Result<(f64, f64, bool)> {
        let q = self.model.optimum_value();
        let pen_set = frozen_value(&self.model, &self.frozen_set)? - q;
        let pen_one = frozen_value(&self.model, &[self.frozen_layer])? - q;
        Ok((pen_set, pen_one, pen_set >= pen_one - 1e-10))
    }

    /// `λ_min(D)·‖M‖₂ ≤ ‖E‖₂ ≤ ‖D‖₂·‖M‖₂`.
    fn interaction(&self, lower: bool) -> Result<(f64, f64, bool)> {
        let (diag, off) = block_split(self.model.h(), self.model.partition())?;
        let e = spectral_norm(&off)?;
        let spec = eigen_sym(&diag)?;
        let m = spectral_norm(&whitened_interaction(self.model.h(), self.model.partition())?)?;
        Ok(if lower {
            let b = spec.min() * m;
            (e, b, le(b, e))
        } else {
            let b = spec.max() * m;
            (e, b, le(e, b))
        })
    }

    /// The σ-built lower bound never exceeds the whitened coupling of `H = Σ`.
    fn sigma_coupling(&self) -> Result<(f64, f64, bool)> {
        let p = self.model.partition();
        let exact = block_coupling(&self.sigma, p)?;
        let bound = sigma_coupling_bound(&self.sigma, p)?;
        Ok((exact, bound, le(bound, exact)))
    }

    fn stats(&self) -> Result<FeatureStats> {
        let x = &self.ls_features;
        let samples: Vec<(&[f64], f64)> = (0..x.rows()).map(|i| (x.row(i), self.ls_targets[i])).collect();
        crate::residual::accumulate_stats(samples)
    }

    /// `cᵀΣ⁻¹c = 2(R(0) − min R)` with the minimum found through the
    /// eigendecomposition of `Σ` and `R` evaluated sample by sample.
    fn resnorm_identity(&self) -> Result<(f64, f64, bool)> {
        let fs = self.stats()?;
        let exact = projected_resnorm(&fs)?;
        let spec = eigen_sym(&fs.sigma_mat)?;
        let b = spec.rotate(&fs.c);
        let coef: Vec<f64> = b.iter().zip(spec.values()).map(|(bi, li)| bi / li).collect();
        let theta = spec.vectors().matvec(&coef);
        let risk = |t: Option<&[f64]>| {
            let x = &self.ls_features;
            (0..x.rows())
                .map(|i| {
                    let pred = t.map_or(0.0, |t| x.row(i).iter().zip(t).map(|(a, b)| a * b).sum::<f64>());
                    0.5 * (self.ls_targets[i] - pred).powi(2)
                })
                .sum::<f64>()
                / x.rows() as f64
        };
        let bound = 2.0 * (risk(None) - risk(Some(&theta)));
        let pass = (exact - bound).abs() <= RESNORM_TOL * exact.abs().max(bound.abs()).max(f64::MIN_POSITIVE);
        Ok((exact, bound, pass))
    }

    fn budget(&self) -> Result<(f64, f64, bool)> {
        let fs = self.stats()?;
        let exact = budget_oracle_gap(&fs, self.budget)?;
        let bound = budget_floor(&fs, self.budget)?;
        Ok((exact, bound, le(bound, exact)))
    }

    fn residual_gap(&self, seed: u64) -> Result<(f64, f64, bool)> {
        let rm = ResidualMap::random(self.model.dim(), 1, 0.7, seed);
        let r = residual_gap_terms(&rm, &self.model, 0)?;
        Ok((r.gap, r.terms_sum(), r.identity_error() <= GAP_TOL))
    }
}
