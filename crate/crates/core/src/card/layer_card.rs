use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::rank::stratify;
use crate::costmodel::{calibrate, estimate, CostCoeffs, CostEstimate, Measurement};
use crate::error::{Error, Result};
use crate::io::{canonical_json, content_hash};
use crate::toynet::{
    finetune, layer_costs, profile_layers_with, step_work, Batch, FinetuneConfig, LayerProfile, ProfileConfig,
    ToyModel,
};

pub const CARD_SCHEMA: &str = "layercard/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub regime_id: usize,
    pub layer_set: Vec<usize>,
    pub resnorm_range: (f64, f64),
    /// σ̂ of each layer in `layer_set`, in the same order.
    pub sigma_profile: Vec<f64>,
    /// Loss reduction from fine-tuning this regime on the evaluation batch.
    pub gain: f64,
    /// `C_k`: the time units of the cost estimate.
    pub cost: f64,
    pub cost_detail: CostEstimate,
}

/// Per-layer resnorm vector of one reference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub name: String,
    pub resnorm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCard {
    pub schema: String,
    pub model_id: String,
    pub layers: usize,
    pub regimes: Vec<Regime>,
    pub reference_profiles: Vec<ReferenceProfile>,
    pub cost_coeffs: CostCoeffs,
    /// RFC 3339 build time; the only field that varies between identical runs.
    pub created: String,
}

/// Where regime costs come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostSource {
    Fixed(CostCoeffs),
    /// Fit to the work of one gradient step on singleton and paired sets.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardConfig {
    pub regimes: usize,
    pub k_per: usize,
    pub finetune: FinetuneConfig,
    pub profile: ProfileConfig,
    pub cost: CostSource,
    pub reference_name: String,
}

impl Default for CardConfig {
    fn default() -> Self {
        Self {
            regimes: 3,
            k_per: 4,
            finetune: FinetuneConfig::default(),
            profile: ProfileConfig::default(),
            cost: CostSource::Calibrated,
            reference_name: "probe".into(),
        }
    }
}

/// Hex SHA-256 of the model's canonical JSON.
pub fn model_id(model: &ToyModel) -> String {
    content_hash(&model.to_json_value())
}

/// Measured step work for every singleton `{ℓ}` and every pair
/// `{ℓ, L−1}`: varying both the earliest layer and the adapter count keeps
/// the calibration design full rank.
pub fn measure_costs(model: &ToyModel, batch: &Batch, rank: usize) -> Result<Vec<Measurement>> {
    let last = model.layers() - 1;
    let mut sets: Vec<Vec<usize>> = (0..=last).map(|l| vec![l]).collect();
    sets.extend((0..last).map(|l| vec![l, last]));
    sets.into_iter()
        .map(|s| {
            let w = step_work(model, &s, batch, rank)?;
            Ok(Measurement { layers: s, time: w.flops as f64, memory: w.peak_floats as f64 })
        })
        .collect()
}

/// Profiles the model on `probe`, stratifies by resnorm, fine-tunes each
/// regime on `eval` and prices it with the cost model.
pub fn build_card(model: &ToyModel, probe: &Batch, eval: &Batch, cfg: &CardConfig) -> Result<LayerCard> {
    let profiles = profile_layers_with(model, probe, &cfg.profile)?;
    build_card_from_profiles(model, &profiles, probe, eval, cfg)
}

pub fn build_card_from_profiles(
    model: &ToyModel,
    profiles: &[LayerProfile],
    probe: &Batch,
    eval: &Batch,
    cfg: &CardConfig,
) -> Result<LayerCard> {
    let strata = stratify(profiles, cfg.regimes, cfg.k_per)?;
    let (flops, act) = layer_costs(model);
    let coeffs = match cfg.cost {
        CostSource::Fixed(c) => c,
        CostSource::Calibrated => {
            calibrate(&measure_costs(model, probe, cfg.finetune.rank)?, model.layers(), &flops, &act)?.coeffs
        }
    };
    let regimes = strata
        .par_iter()
        .map(|s| {
            let out = finetune(model, &s.layers, eval, &cfg.finetune)?;
            let detail = estimate(&s.layers, model.layers(), &flops, &act, &coeffs)?;
            Ok(Regime {
                regime_id: s.regime_id,
                layer_set: s.layers.clone(),
                resnorm_range: s.resnorm_range,
                sigma_profile: s.layers.iter().map(|&l| profiles[l].sigma_hat).collect(),
                gain: out.gain,
                cost: detail.time_units,
                cost_detail: detail,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerCard {
        schema: CARD_SCHEMA.into(),
        model_id: model_id(model),
        layers: model.layers(),
        regimes,
        reference_profiles: vec![ReferenceProfile {
            name: cfg.reference_name.clone(),
            resnorm: profiles.iter().map(|p| p.resnorm).collect(),
        }],
        cost_coeffs: coeffs,
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    })
}

impl LayerCard {
    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self).expect("cards serialize")
    }

    /// Canonical JSON text.
    pub fn to_canonical(&self) -> String {
        canonical_json(&self.to_json_value())
    }

    /// Parses a card, rejecting any schema other than [`CARD_SCHEMA`].
    pub fn from_json_value(v: Value) -> Result<Self> {
        let found = v.get("schema").and_then(Value::as_str).unwrap_or("<missing>");
        if found != CARD_SCHEMA {
            return Err(Error::SchemaMismatch { expected: CARD_SCHEMA.into(), found: found.into() });
        }
        let card: Self = serde_json::from_value(v)?;
        card.validate()?;
        Ok(card)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::InvalidArgument("card has no regimes".into()));
        }
        let mut seen = vec![false; self.layers];
        for r in &self.regimes {
            for &l in &r.layer_set {
                if l >= self.layers || std::mem::replace(&mut seen[l], true) {
                    return Err(Error::InvalidArgument(format!("regime {} has invalid or repeated layer {l}", r.regime_id)));
                }
            }
            if !(r.gain >= -1e-12) || !r.cost.is_finite() {
                return Err(Error::InvalidArgument(format!("regime {} has gain {} and cost {}", r.regime_id, r.gain, r.cost)));
            }
        }
        if self.reference_profiles.iter().any(|p| p.resnorm.len() != self.layers) {
            return Err(Error::DimensionMismatch("reference profile length differs from layer count".into()));
        }
        Ok(())
    }

    /// Plain-text summary, one row per regime.
    pub fn to_table(&self) -> String {
        let mut out = format!("model {}  layers {}\n", &self.model_id[..self.model_id.len().min(12)], self.layers);
        out.push_str(&format!("{:>6}  {:<20}  {:>21}  {:>11}  {:>11}\n", "regime", "layers", "resnorm range", "gain", "cost"));
        for r in &self.regimes {
            let set = r.layer_set.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            out.push_str(&format!(
                "{:>6}  {:<20}  {:>10.3e}..{:<9.3e}  {:>11.4e}  {:>11.4e}\n",
                r.regime_id, set, r.resnorm_range.0, r.resnorm_range.1, r.gain, r.cost
            ));
        }
        out
    }
}
