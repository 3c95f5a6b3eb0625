//! Layer cards: resnorm stratification, placement strategies, card
//! construction from a profiled model, and similarity-gated transfer.

mod layer_card;
mod rank;
mod transfer;

pub use layer_card::{
    build_card, build_card_from_profiles, measure_costs, model_id, CardConfig, CostSource, LayerCard,
    ReferenceProfile, Regime, CARD_SCHEMA,
};
pub use rank::{descending_ranks, spearman, strategy_layers, stratify, uniform_layers, Strategy, Stratum};
pub use transfer::{transfer_select, Objective, RegimeSummary, TransferDecision, Weighting, DEFAULT_TAU};
