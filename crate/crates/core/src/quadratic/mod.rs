//! Quadratic surrogate of the fine-tuning loss around the frozen model:
//! global and blockwise oracles, coupling measures, restricted gains and
//! freeze penalties, plus the exact residual-gap split for quadratic
//! residual maps.

mod generator;
mod model;
mod oracles;
mod residual_map;

pub use generator::{gen_coupled_instance, CoupledSpec};
pub use model::QuadraticModel;
pub use oracles::{
    additive_proxy, additivity_gap, coupling_rho, freeze_monotonicity, freeze_penalty, frozen_value, gain,
    global_oracle, local_oracle, sandwich_check, set_coupling, AdditivityGap, FreezeReport, Sandwich,
};
pub use residual_map::{residual_gap_terms, ResidualGap, ResidualMap};
