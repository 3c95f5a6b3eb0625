use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::model::ToyModel;
use super::net::{Adapters, Layers, Work};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::residual::{effective_rank, resnorm_proxy_with, EnergyNormalization, FeatureStats, StatsAccumulator};

/// One layer's diagnostics at zero adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub grad_norm: f64,
    pub sigma_hat: f64,
    pub resnorm: f64,
    pub erank: f64,
    pub spectrum_head: Vec<f64>,
}

/// How per-sample adapter gradients are reduced to one norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradAggregation {
    /// `mean_i ‖∇ℓ_i‖`.
    #[default]
    PerSampleNorm,
    /// `‖mean_i ∇ℓ_i‖`.
    NormOfMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    /// Rank of the probe adapter whose `B` gradient is measured.
    pub rank: usize,
    pub aggregation: GradAggregation,
    pub normalization: EnergyNormalization,
    /// Number of leading normalized eigenvalues to report.
    pub spectrum_head: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            aggregation: GradAggregation::PerSampleNorm,
            normalization: EnergyNormalization::PerDimension,
            spectrum_head: 3,
        }
    }
}

pub fn profile_layers(model: &ToyModel, probe: &Batch) -> Result<Vec<LayerProfile>> {
    profile_layers_with(model, probe, &ProfileConfig::default())
}

/// Per layer: gradient norm of a freshly initialized LoRA probe (`B = 0`),
/// activation energy of the block input, their ratio, and the spectrum of the
/// block-input covariance.
pub fn profile_layers_with(model: &ToyModel, probe: &Batch, cfg: &ProfileConfig) -> Result<Vec<LayerProfile>> {
    probe.check(model)?;
    let (layers, w) = (model.layers(), model.width());
    let all: Vec<usize> = (0..layers).collect();
    let probes = Adapters::lora_init(model, &all, cfg.rank)?;
    let net = Layers::student(model, None, &mut Work::default())?;
    let n = probe.len();

    let mut norms = vec![Vec::with_capacity(n); layers];
    let mut sqnorms = vec![Vec::with_capacity(n); layers];
    let mut mean_grad = vec![Matrix::zeros(cfg.rank, w); layers];
    let mut acc: Vec<StatsAccumulator> = (0..layers).map(|_| StatsAccumulator::new(w)).collect();
    let mut work = Work::default();
    for i in 0..n {
        let trace = net.run(probe.inputs.row(i), &mut work);
        let dy: Vec<f64> = trace.y.iter().zip(probe.targets.row(i)).map(|(y, t)| y - t).collect();
        let gus = net.preactivation_grads(&trace, &dy);
        for l in 0..layers {
            let a = &probes.slot(l).expect("probe on every layer").a;
            let atg = a.matvec_t(&gus[l]);
            let h = &trace.h[l];
            let hh = dot(h, h);
            norms[l].push((dot(&atg, &atg) * hh).sqrt());
            sqnorms[l].push(hh);
            if cfg.aggregation == GradAggregation::NormOfMean {
                for (k, &g) in atg.iter().enumerate() {
                    for (m, &hj) in mean_grad[l].row_mut(k).iter_mut().zip(h) {
                        *m += g * hj;
                    }
                }
            }
            acc[l].push(h, 0.0)?;
        }
    }

    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let grad_norm = match cfg.aggregation {
            GradAggregation::PerSampleNorm => crate::residual::mean(&norms[l]),
            GradAggregation::NormOfMean => mean_grad[l].frobenius_norm() / n as f64,
        };
        let sigma_hat = cfg.normalization.energy(crate::residual::mean(&sqnorms[l]), w);
        let per_sample = vec![grad_norm];
        let resnorm = resnorm_proxy_with(&per_sample, &sqnorms[l], w, cfg.normalization)
            .map_err(|e| match e {
                Error::DegenerateActivation(msg) => Error::DegenerateActivation(format!("layer {l}: {msg}")),
                other => other,
            })?;
        let stats = acc[l].finish()?;
        let erank = effective_rank(&stats)?;
        let spectrum_head = crate::residual::normalized_spectrum(&stats)?.into_iter().take(cfg.spectrum_head).collect();
        out.push(LayerProfile { layer: l, grad_norm, sigma_hat, resnorm, erank, spectrum_head });
    }
    Ok(out)
}

/// Feature statistics of block `layer`'s input against the scalar teacher
/// residual `r⋆ = t − F(x)` at zero adapters. Requires `head_dim = 1`.
pub fn layer_feature_stats(model: &ToyModel, batch: &Batch, layer: usize) -> Result<FeatureStats> {
    batch.check(model)?;
    if model.head_dim() != 1 {
        return Err(Error::InvalidArgument("scalar residual statistics need head_dim = 1".into()));
    }
    if layer >= model.layers() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range for {} layers", model.layers())));
    }
    let net = Layers::student(model, None, &mut Work::default())?;
    let mut acc = StatsAccumulator::new(model.width());
    let mut work = Work::default();
    for i in 0..batch.len() {
        let trace = net.run(batch.inputs.row(i), &mut work);
        acc.push(&trace.h[layer], batch.targets.get(i, 0) - trace.y[0])?;
    }
    acc.finish()
}

/// CSV with columns `layer,grad_norm,sigma_hat,resnorm,erank`.
pub fn profiles_to_csv(profiles: &[LayerProfile]) -> String {
    use crate::io::fmt_f64;
    let mut out = String::from("layer,grad_norm,sigma_hat,resnorm,erank\n");
    for p in profiles {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.layer,
            fmt_f64(p.grad_norm),
            fmt_f64(p.sigma_hat),
            fmt_f64(p.resnorm),
            fmt_f64(p.erank)
        ));
    }
    out
}

/// Parses the output of [`profiles_to_csv`]; `spectrum_head` is left empty.
pub fn profiles_from_csv(text: &str) -> Result<Vec<LayerProfile>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty profile file".into()))?;
    if header.trim() != "layer,grad_norm,sigma_hat,resnorm,erank" {
        return Err(Error::Parse(format!("unexpected profile header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |e: String| Error::Parse(format!("profile row {}: {e}", i + 1));
        if f.len() != 5 {
            return Err(bad(format!("{} fields, expected 5", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        let layer = f[0].parse::<usize>().map_err(|e| bad(e.to_string()))?;
        if layer != i {
            return Err(bad(format!("layer {layer} out of order")));
        }
        out.push(LayerProfile {
            layer,
            grad_norm: num(f[1])?,
            sigma_hat: num(f[2])?,
            resnorm: num(f[3])?,
            erank: num(f[4])?,
            spectrum_head: Vec::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::model::{generate, Nonlinearity, ToyModelSpec};

    fn spec() -> ToyModelSpec {
        ToyModelSpec {
            layers: 6,
            width: 6,
            nonlinearity: Nonlinearity::Tanh,
            head_dim: 2,
            teacher_layers: vec![2],
            teacher_scale: 1.0,
            seed: 12,
        }
    }

    #[test]
    fn resnorm_is_ratio() {
        let m = generate(&spec()).unwrap();
        let b = Batch::sample(&m, 64, 0).unwrap();
        let p = profile_layers(&m, &b).unwrap();
        assert_eq!(p.len(), 6);
        for row in &p {
            assert!((row.resnorm - row.grad_norm / row.sigma_hat.sqrt()).abs() <= 1e-12 * row.resnorm.max(1.0));
            assert!(row.erank >= 1.0 && row.erank <= 6.0);
            assert_eq!(row.spectrum_head.len(), 3);
        }
    }

    #[test]
    fn null_teacher_has_zero_resnorm() {
        let m = generate(&ToyModelSpec { teacher_scale: 0.0, ..spec() }).unwrap();
        let b = Batch::sample(&m, 16, 0).unwrap();
        for agg in [GradAggregation::PerSampleNorm, GradAggregation::NormOfMean] {
            let cfg = ProfileConfig { aggregation: agg, ..Default::default() };
            assert!(profile_layers_with(&m, &b, &cfg).unwrap().iter().all(|r| r.resnorm == 0.0));
        }
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let m = generate(&spec()).unwrap();
        let b = Batch::sample(&m, 40, 1).unwrap();
        let p = profile_layers(&m, &b).unwrap();
        assert_eq!(p, profile_layers(&m, &b).unwrap());
        let order: Vec<usize> = (0..40).rev().collect();
        let q = profile_layers(&m, &b.permuted(&order).unwrap()).unwrap();
        for (x, y) in p.iter().zip(&q) {
            for (a, b) in [(x.grad_norm, y.grad_norm), (x.sigma_hat, y.sigma_hat), (x.resnorm, y.resnorm), (x.erank, y.erank)] {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_inputs_are_degenerate() {
        let m = generate(&spec()).unwrap();
        let b = Batch::new(Matrix::zeros(3, 6), Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap()).unwrap();
        assert!(matches!(profile_layers(&m, &b), Err(Error::DegenerateActivation(_))));
    }

    // A single probe draw is noisy, so the planted layer is compared on the
    // seed-averaged, sum-normalized profile.
    #[test]
    fn early_teacher_stands_out_under_identity() {
        let mut avg = [0.0; 8];
        for seed in 0..20 {
            let m = generate(&ToyModelSpec {
                nonlinearity: Nonlinearity::Identity,
                teacher_layers: vec![0],
                head_dim: 8,
                layers: 8,
                width: 8,
                seed,
                ..spec()
            })
            .unwrap();
            let p = profile_layers(&m, &Batch::sample(&m, 256, 3).unwrap()).unwrap();
            let total: f64 = p.iter().map(|r| r.resnorm).sum();
            for (a, r) in avg.iter_mut().zip(&p) {
                *a += r.resnorm / total;
            }
        }
        for (l, deep) in avg.iter().enumerate().skip(4) {
            assert!(avg[0] > *deep, "{} vs layer {l} {deep}", avg[0]);
        }
    }

    #[test]
    fn csv_has_one_row_per_layer() {
        let m = generate(&spec()).unwrap();
        let b = Batch::sample(&m, 8, 0).unwrap();
        let csv = profiles_to_csv(&profile_layers(&m, &b).unwrap());
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("layer,grad_norm,sigma_hat,resnorm,erank\n"));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let m = generate(&spec()).unwrap();
        let b = Batch::sample(&m, 8, 0).unwrap();
        let ps = profile_layers(&m, &b).unwrap();
        let back = profiles_from_csv(&profiles_to_csv(&ps)).unwrap();
        for (p, q) in ps.iter().zip(&back) {
            assert_eq!((p.layer, p.grad_norm, p.sigma_hat, p.resnorm, p.erank), (q.layer, q.grad_norm, q.sigma_hat, q.resnorm, q.erank));
        }
        assert!(profiles_from_csv("layer,x
0,1
").is_err());
        assert!(profiles_from_csv("layer,grad_norm,sigma_hat,resnorm,erank
1,1,1,1,1
").is_err());
    }
}
