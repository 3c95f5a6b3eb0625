use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layer_card::LayerCard;
use super::rank::{spearman, uniform_layers};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MaxPerformance,
    MinCost,
    Balanced,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_performance" => Ok(Self::MaxPerformance),
            "min_cost" => Ok(Self::MinCost),
            "balanced" => Ok(Self::Balanced),
            other => Err(Error::InvalidArgument(format!(
                "unknown objective {other:?} (expected max_performance, min_cost or balanced)"
            ))),
        }
    }
}

/// How accepted references are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Unweighted,
    /// Weight each reference by its similarity `s_j`.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime_id: usize,
    pub mean_gain: f64,
    pub mean_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDecision {
    /// One entry per reference profile, cards in order.
    pub similarities: Vec<f64>,
    /// Indices into `similarities` with `s_j ≥ τ`.
    pub accepted_refs: Vec<usize>,
    pub chosen_regime: Option<usize>,
    pub selected_layers: Vec<usize>,
    pub objective: Objective,
    pub tau: f64,
    pub regime_summary: Vec<RegimeSummary>,
}

/// Picks a regime for a target task from reference cards whose resnorm
/// ranking agrees with the target's (`spearman ≥ τ`). The chosen regime's
/// layers come from the most similar accepted reference; with no accepted
/// reference the decision falls back to uniform depth spread.
pub fn transfer_select(
    cards: &[LayerCard],
    target_resnorm: &[f64],
    tau: f64,
    objective: Objective,
    weighting: Weighting,
) -> Result<TransferDecision> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} must lie in (0, 1)")));
    }
    let first = cards.first().ok_or_else(|| Error::InvalidArgument("no reference cards".into()))?;
    let (n_regimes, k_per) = (first.regimes.len(), first.regimes[0].layer_set.len());
    for c in cards {
        c.validate()?;
        if c.layers != target_resnorm.len() {
            return Err(Error::DimensionMismatch(format!(
                "card covers {} layers, target profile {}",
                c.layers,
                target_resnorm.len()
            )));
        }
        if c.regimes.len() != n_regimes || c.regimes.iter().enumerate().any(|(i, r)| r.regime_id != i) {
            return Err(Error::InvalidArgument("cards must share the regime layout 0..K".into()));
        }
    }

    let mut refs = Vec::new();
    for (ci, c) in cards.iter().enumerate() {
        for p in &c.reference_profiles {
            refs.push((ci, spearman(target_resnorm, &p.resnorm)?));
        }
    }
    let similarities: Vec<f64> = refs.iter().map(|r| r.1).collect();
    let accepted: Vec<usize> = (0..refs.len()).filter(|&j| similarities[j] >= tau).collect();

    let fallback = |summary| TransferDecision {
        similarities: similarities.clone(),
        accepted_refs: accepted.clone(),
        chosen_regime: None,
        selected_layers: uniform_layers(target_resnorm.len(), k_per),
        objective,
        tau,
        regime_summary: summary,
    };
    if accepted.is_empty() {
        return Ok(fallback(Vec::new()));
    }

    let weight = |j: usize| match weighting {
        Weighting::Unweighted => 1.0,
        Weighting::Similarity => similarities[j],
    };
    let total: f64 = accepted.iter().map(|&j| weight(j)).sum();
    let summary: Vec<RegimeSummary> = (0..n_regimes)
        .map(|k| {
            let (mut g, mut c) = (0.0, 0.0);
            for &j in &accepted {
                let r = &cards[refs[j].0].regimes[k];
                g += weight(j) * r.gain;
                c += weight(j) * r.cost;
            }
            RegimeSummary { regime_id: k, mean_gain: g / total, mean_cost: c / total }
        })
        .collect();

    let score = |s: &RegimeSummary| -> Option<f64> {
        match objective {
            Objective::MaxPerformance => Some(s.mean_gain),
            Objective::MinCost => (s.mean_gain >= 0.0).then_some(-s.mean_cost),
            Objective::Balanced => Some(if s.mean_cost > 0.0 {
                s.mean_gain / s.mean_cost
            } else if s.mean_gain > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }),
        }
    };
    // First maximum wins, so ties go to the higher-resnorm regime.
    let mut chosen: Option<(usize, f64)> = None;
    for s in &summary {
        if let Some(v) = score(s) {
            if chosen.is_none_or(|(_, best)| v > best) {
                chosen = Some((s.regime_id, v));
            }
        }
    }
    let Some((regime, _)) = chosen else {
        return Ok(fallback(summary));
    };
    let best_ref = *accepted
        .iter()
        .max_by(|&&a, &&b| similarities[a].total_cmp(&similarities[b]).then(b.cmp(&a)))
        .expect("accepted is nonempty");
    Ok(TransferDecision {
        selected_layers: cards[refs[best_ref].0].regimes[regime].layer_set.clone(),
        chosen_regime: Some(regime),
        similarities,
        accepted_refs: accepted,
        objective,
        tau,
        regime_summary: summary,
    })
}
