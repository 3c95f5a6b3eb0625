use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::model::ToyModel;
use super::net::{loss_and_grads, Adapters, Work};
use crate::error::{Error, Result};
use crate::linalg::dot;

/// Training stops with an error once the loss exceeds this multiple of its start.
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub rank: usize,
    pub steps: usize,
    /// Fixed step; `None` selects a backtracking line search.
    pub step_size: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { rank: 4, steps: 300, step_size: None }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// `L_before − L_after`.
    pub gain: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_size: f64,
    pub work: Work,
    /// Adapter state at the lowest loss reached.
    pub adapters: Adapters,
}

/// Sufficient-decrease constant of the backtracking line search.
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Full-batch gradient descent on fresh LoRA adapters for `layers` only.
/// Frozen weights are never written; the best iterate is returned.
///
/// With an explicit `step_size` every step uses it unchanged. Without one,
/// each step starts from twice the last accepted step (initially
/// `0.1 / σ̂_max`) and halves it until the Armijo condition holds.
pub fn finetune(model: &ToyModel, layers: &[usize], train: &Batch, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    let mut set = layers.to_vec();
    set.sort_unstable();
    set.dedup();
    if set.is_empty() {
        return Err(Error::EmptySelection);
    }
    if cfg.rank == 0 || cfg.steps == 0 {
        return Err(Error::InvalidArgument("rank and steps must be at least 1".into()));
    }
    train.check(model)?;
    let mut adapters = Adapters::lora_init(model, &set, cfg.rank)?;
    let fixed = match cfg.step_size {
        Some(s) if s > 0.0 && s.is_finite() => Some(s),
        Some(s) => return Err(Error::InvalidArgument(format!("step size {s} must be positive"))),
        None => None,
    };
    let mut step = fixed.unwrap_or(0.1 / max_energy(model, train, &set)?);

    let mut work = Work::default();
    let (mut loss, mut grads) = loss_and_grads(model, &adapters, train, &set, &mut work)?;
    let initial = loss;
    let mut best = adapters.clone();
    let mut best_loss = loss;
    for _ in 0..cfg.steps {
        let gsq: f64 = grads.iter().map(|g| g.norm().powi(2)).sum();
        if gsq == 0.0 {
            break;
        }
        let mut trial = adapters.clone();
        let apply = |trial: &mut Adapters, eta: f64| {
            for g in &grads {
                let slot = trial.slot_mut(g.layer).expect("adapter on every trained layer");
                slot.a.axpy(-eta, &g.a);
                slot.b.axpy(-eta, &g.b);
            }
        };
        match fixed {
            Some(eta) => apply(&mut trial, eta),
            None => {
                step *= 2.0;
                let mut accepted = false;
                for _ in 0..MAX_HALVINGS {
                    trial.clone_from(&adapters);
                    apply(&mut trial, step);
                    let l = super::net::loss_counted(model, &trial, train, &mut work)?;
                    if l <= loss - ARMIJO * step * gsq {
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
        }
        adapters = trial;
        (loss, grads) = loss_and_grads(model, &adapters, train, &set, &mut work)?;
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::DivergedTraining { loss, initial });
        }
        if loss < best_loss {
            best_loss = loss;
            best.clone_from(&adapters);
        }
    }
    Ok(FinetuneOutcome {
        gain: initial - best_loss,
        initial_loss: initial,
        final_loss: best_loss,
        step_size: step,
        work,
        adapters: best,
    })
}

/// Work of one full-batch gradient evaluation for rank-`rank` adapters on
/// `layers`: the deterministic stand-in for a measured training step.
pub fn step_work(model: &ToyModel, layers: &[usize], batch: &Batch, rank: usize) -> Result<Work> {
    if layers.is_empty() {
        return Err(Error::EmptySelection);
    }
    let adapters = Adapters::lora_init(model, layers, rank)?;
    let mut work = Work::default();
    loss_and_grads(model, &adapters, batch, layers, &mut work)?;
    Ok(work)
}

/// `max_ℓ mean‖h_{ℓ−1}‖²/width` over the given layers.
fn max_energy(model: &ToyModel, batch: &Batch, layers: &[usize]) -> Result<f64> {
    let cap = super::net::forward_capture(model, None, &batch.inputs)?;
    let w = model.width() as f64;
    let mut best = 0.0f64;
    for &l in layers {
        let act = &cap.activations[l];
        let e = (0..act.rows()).map(|i| dot(act.row(i), act.row(i))).sum::<f64>() / (act.rows() as f64 * w);
        best = best.max(e);
    }
    if !(best > 1e-15) {
        return Err(Error::DegenerateActivation("adapted layers receive zero input".into()));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::model::{generate, Nonlinearity, ToyModelSpec};
    use crate::toynet::profile::layer_feature_stats;

    fn spec(act: Nonlinearity, teacher: Vec<usize>, scale: f64) -> ToyModelSpec {
        ToyModelSpec {
            layers: 4,
            width: 6,
            nonlinearity: act,
            head_dim: 1,
            teacher_layers: teacher,
            teacher_scale: scale,
            seed: 21,
        }
    }

    #[test]
    fn nothing_to_learn() {
        let m = generate(&spec(Nonlinearity::Tanh, vec![1], 0.0)).unwrap();
        let b = Batch::sample(&m, 32, 0).unwrap();
        let out = finetune(&m, &[1, 2], &b, &FinetuneConfig { steps: 20, ..Default::default() }).unwrap();
        assert!(out.gain.abs() <= 1e-10);
    }

    #[test]
    fn frozen_weights_untouched() {
        let m = generate(&spec(Nonlinearity::Tanh, vec![1], 1.0)).unwrap();
        let before = m.clone();
        let b = Batch::sample(&m, 32, 0).unwrap();
        let out = finetune(&m, &[1], &b, &FinetuneConfig { steps: 10, ..Default::default() }).unwrap();
        assert_eq!(m, before);
        assert!(out.gain >= -1e-12);
        assert!(out.final_loss <= out.initial_loss);
    }

    #[test]
    fn contract_errors() {
        let m = generate(&spec(Nonlinearity::Tanh, vec![1], 1.0)).unwrap();
        let b = Batch::sample(&m, 8, 0).unwrap();
        assert!(matches!(finetune(&m, &[], &b, &FinetuneConfig::default()), Err(Error::EmptySelection)));
        assert!(finetune(&m, &[0], &b, &FinetuneConfig { rank: 0, ..Default::default() }).is_err());
        assert!(finetune(&m, &[0], &b, &FinetuneConfig { steps: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn huge_steps_diverge() {
        let m = generate(&spec(Nonlinearity::Identity, vec![1], 1.0)).unwrap();
        let b = Batch::sample(&m, 16, 0).unwrap();
        let cfg = FinetuneConfig { rank: 2, steps: 200, step_size: Some(1e3) };
        assert!(matches!(finetune(&m, &[0], &b, &cfg), Err(Error::DivergedTraining { .. })));
    }

    #[test]
    fn realizable_teacher_is_recovered() {
        let m = generate(&spec(Nonlinearity::Identity, vec![2], 1.0)).unwrap();
        let b = Batch::sample(&m, 64, 1).unwrap();
        let out = finetune(&m, &[2], &b, &FinetuneConfig { rank: 2, steps: 2000, step_size: None }).unwrap();
        assert!(out.final_loss <= 1e-6 * out.initial_loss, "{} vs {}", out.final_loss, out.initial_loss);
    }

    #[test]
    fn converged_gain_matches_closed_form() {
        let m = generate(&spec(Nonlinearity::Identity, vec![0], 1.0)).unwrap();
        let b = Batch::sample(&m, 64, 2).unwrap();
        for layer in [1, 3] {
            let fs = layer_feature_stats(&m, &b, layer).unwrap();
            let closed = 0.5 * crate::residual::projected_resnorm(&fs).unwrap();
            let out = finetune(&m, &[layer], &b, &FinetuneConfig { rank: 1, steps: 2000, step_size: None }).unwrap();
            assert!((out.gain - closed).abs() <= 1e-4 * closed, "layer {layer}: {} vs {closed}", out.gain);
        }
    }
}
