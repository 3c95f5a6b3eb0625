//! Projected-residual and activation-energy diagnostics: feature second
//! moments, resnorm and its gradient proxy, spectral hardness measures and
//! the nonlinear and coupling bounds built from them.

mod hardness;
mod stats;

pub use hardness::{
    budget_floor, budget_oracle_gap, effective_rank, hardness_report, noise_excess, normalized_spectrum, nonlinear_flatness_bound, nonlinear_floor,
    projected_resnorm, sigma_coupling_bound, theta_star, HardnessReport,
};
pub use stats::{
    accumulate_stats, resnorm_proxy, resnorm_proxy_with, sqnorm, EnergyNormalization, FeatureStats,
    StatsAccumulator,
};
pub(crate) use stats::mean;
