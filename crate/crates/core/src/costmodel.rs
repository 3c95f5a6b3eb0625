//! Depth-dependent fine-tuning cost: reverse mode has to reach the earliest
//! adapted layer, so both compute and retained activations scale with the
//! portion of the network at or above `min(S)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigen_sym, spd_solve, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoeffs {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub m0: f64,
    pub m1: f64,
}

impl Default for CostCoeffs {
    /// Pure path-length model: time counts backward flops, memory counts
    /// retained activations.
    fn default() -> Self {
        Self { t0: 0.0, t1: 1.0, t2: 0.0, m0: 0.0, m1: 1.0 }
    }
}

impl CostCoeffs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.t0, self.t1, self.t2, self.m0, self.m1];
        if all.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidArgument(format!("cost coefficients must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub time_units: f64,
    pub memory_units: f64,
    pub backprop_depth: usize,
    pub retained_layers: usize,
    /// `|S|`, the number of adapters carried at inference.
    pub adapters: usize,
}

fn check_set(set: &[usize], layers: usize, layer_flops: &[f64], layer_act: &[f64]) -> Result<usize> {
    if layer_flops.len() != layers || layer_act.len() != layers {
        return Err(Error::DimensionMismatch(format!(
            "{} flops and {} activation entries for {layers} layers",
            layer_flops.len(),
            layer_act.len()
        )));
    }
    if layer_flops.iter().chain(layer_act).any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidArgument("per-layer costs must be finite and nonnegative".into()));
    }
    let first = *set.iter().min().ok_or(Error::EmptySelection)?;
    if let Some(&bad) = set.iter().find(|&&l| l >= layers) {
        return Err(Error::InvalidArgument(format!("layer {bad} out of range for {layers} layers")));
    }
    Ok(first)
}

fn distinct(set: &[usize]) -> usize {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    s.len()
}

/// `time = t0 + t1·Σ_{ℓ≥min S} flops_ℓ + t2·|S|`, `memory = m0 + m1·Σ_{ℓ≥min S} act_ℓ`.
pub fn estimate(
    set: &[usize],
    layers: usize,
    layer_flops: &[f64],
    layer_act: &[f64],
    coeffs: &CostCoeffs,
) -> Result<CostEstimate> {
    coeffs.validate()?;
    let first = check_set(set, layers, layer_flops, layer_act)?;
    let flops: f64 = layer_flops[first..].iter().sum();
    let act: f64 = layer_act[first..].iter().sum();
    let n = distinct(set);
    Ok(CostEstimate {
        time_units: coeffs.t0 + coeffs.t1 * flops + coeffs.t2 * n as f64,
        memory_units: coeffs.m0 + coeffs.m1 * act,
        backprop_depth: layers - first,
        retained_layers: layers - first,
        adapters: n,
    })
}

/// One observed run: the adapted set and its measured time and memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub layers: Vec<usize>,
    pub time: f64,
    pub memory: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub coeffs: CostCoeffs,
    /// Root-mean-square misfit of the time model.
    pub time_residual: f64,
    pub memory_residual: f64,
}

/// Nonnegative least-squares fit of both cost models to measurements.
pub fn calibrate(measured: &[Measurement], layers: usize, layer_flops: &[f64], layer_act: &[f64]) -> Result<Calibration> {
    let mut firsts = Vec::with_capacity(measured.len());
    let (mut tx, mut mx) = (Vec::new(), Vec::new());
    let (mut ty, mut my) = (Vec::new(), Vec::new());
    for m in measured {
        let first = check_set(&m.layers, layers, layer_flops, layer_act)?;
        if !m.time.is_finite() || !m.memory.is_finite() {
            return Err(Error::InvalidArgument("measurements must be finite".into()));
        }
        firsts.push(first);
        let flops: f64 = layer_flops[first..].iter().sum();
        let act: f64 = layer_act[first..].iter().sum();
        tx.push(vec![1.0, flops, distinct(&m.layers) as f64]);
        mx.push(vec![1.0, act]);
        ty.push(m.time);
        my.push(m.memory);
    }
    firsts.sort_unstable();
    firsts.dedup();
    if firsts.len() < 3 {
        return Err(Error::CalibrationUnderdetermined(format!(
            "need at least 3 distinct earliest layers, got {}",
            firsts.len()
        )));
    }
    let (t, t_res) = nnls(&tx, &ty).map_err(|e| tag(e, "time"))?;
    let (m, m_res) = nnls(&mx, &my).map_err(|e| tag(e, "memory"))?;
    Ok(Calibration {
        coeffs: CostCoeffs { t0: t[0], t1: t[1], t2: t[2], m0: m[0], m1: m[1] },
        time_residual: t_res,
        memory_residual: m_res,
    })
}

fn tag(e: Error, what: &str) -> Error {
    match e {
        Error::CalibrationUnderdetermined(msg) => Error::CalibrationUnderdetermined(format!("{what} model: {msg}")),
        other => other,
    }
}

/// Relative eigenvalue floor of the column-normalized Gram matrix below
/// which the design counts as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Exact NNLS for a handful of unknowns: the optimum is the unconstrained
/// fit on its passive set, so every subset is tried and the best feasible
/// fit kept. Returns the coefficients and the RMS residual.
fn nnls(x: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let p = x[0].len();
    let scale: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt()).collect();
    if scale.contains(&0.0) {
        return Err(Error::CalibrationUnderdetermined("a design column is identically zero".into()));
    }
    let gram = SymMatrix::from_fn(p, |i, j| x.iter().map(|r| r[i] * r[j]).sum::<f64>() / (scale[i] * scale[j]));
    let spec = eigen_sym(&gram)?;
    if spec.min() <= RANK_TOL * spec.max() {
        return Err(Error::CalibrationUnderdetermined(format!(
            "design condition {:e} (columns are collinear)",
            spec.max() / spec.min().max(f64::MIN_POSITIVE)
        )));
    }
    let rhs: Vec<f64> = (0..p).map(|j| x.iter().zip(y).map(|(r, v)| r[j] * v).sum::<f64>() / scale[j]).collect();
    let sse = |beta: &[f64]| -> f64 {
        x.iter().zip(y).map(|(r, v)| (r.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() - v).powi(2)).sum()
    };

    let mut best = (vec![0.0; p], sse(&vec![0.0; p]));
    for mask in 1u32..(1 << p) {
        let idx: Vec<usize> = (0..p).filter(|j| mask & (1 << j) != 0).collect();
        let sub = gram.principal(&idx);
        let b: Vec<f64> = idx.iter().map(|&j| rhs[j]).collect();
        let z = spd_solve(&sub, &b)?;
        if z.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut beta = vec![0.0; p];
        for (&j, v) in idx.iter().zip(&z) {
            beta[j] = v / scale[j];
        }
        let e = sse(&beta);
        if e < best.1 {
            best = (beta, e);
        }
    }
    Ok((best.0, (best.1 / y.len() as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(coeffs: &CostCoeffs, sets: &[Vec<usize>], flops: &[f64], act: &[f64]) -> Vec<Measurement> {
        sets.iter()
            .map(|s| {
                let e = estimate(s, flops.len(), flops, act, coeffs).unwrap();
                Measurement { layers: s.clone(), time: e.time_units, memory: e.memory_units }
            })
            .collect()
    }

    #[test]
    fn deepest_singleton_is_cheapest() {
        let (f, a) = (vec![3.0, 1.0, 2.0, 5.0, 1.0], vec![1.0, 2.0, 1.0, 1.0, 4.0]);
        let c = CostCoeffs { t0: 1.0, t1: 0.5, t2: 0.1, m0: 2.0, m1: 1.0 };
        let last = estimate(&[4], 5, &f, &a, &c).unwrap();
        for l in 0..4 {
            let e = estimate(&[l], 5, &f, &a, &c).unwrap();
            assert!(last.time_units <= e.time_units && last.memory_units <= e.memory_units);
        }
        assert_eq!((last.backprop_depth, last.retained_layers), (1, 1));
    }

    #[test]
    fn time_ratio_is_depth_ratio() {
        let ones = vec![1.0; 10];
        let c = CostCoeffs { t0: 0.0, t1: 1.0, t2: 0.0, m0: 0.0, m1: 1.0 };
        let first = estimate(&[0], 10, &ones, &ones, &c).unwrap();
        let last = estimate(&[9], 10, &ones, &ones, &c).unwrap();
        assert_eq!(first.time_units / last.time_units, 10.0);
        assert_eq!(first.backprop_depth, 10);
    }

    #[test]
    fn deep_mid_shallow_ordering() {
        let ones = vec![1.0; 24];
        let c = CostCoeffs { t0: 5.0, t1: 1.0, t2: 0.5, m0: 1.0, m1: 2.0 };
        let cost = |s: &[usize]| estimate(s, 24, &ones, &ones, &c).unwrap();
        let (bottom, mid, top) = (cost(&[20, 21, 22, 23]), cost(&[10, 11, 12, 13]), cost(&[0, 1, 2, 3]));
        assert!(bottom.time_units < mid.time_units && mid.time_units < top.time_units);
        assert!(bottom.memory_units < mid.memory_units && mid.memory_units < top.memory_units);
    }

    #[test]
    fn deeper_additions_only_add_adapter_cost() {
        let f = vec![2.0, 4.0, 1.0, 3.0];
        let c = CostCoeffs { t0: 1.0, t1: 1.0, t2: 0.25, m0: 0.0, m1: 1.0 };
        let a = estimate(&[1], 4, &f, &f, &c).unwrap();
        let b = estimate(&[1, 3], 4, &f, &f, &c).unwrap();
        assert_eq!(b.time_units - a.time_units, 0.25);
        assert_eq!(a.memory_units, b.memory_units);
    }

    #[test]
    fn moving_earlier_never_cheaper() {
        let f = vec![0.5, 2.0, 1.0, 3.0, 0.0, 1.0];
        let c = CostCoeffs { t0: 0.3, t1: 1.2, t2: 0.7, m0: 0.1, m1: 0.9 };
        for first in 1..6 {
            let later = estimate(&[first, 5], 6, &f, &f, &c).unwrap();
            let earlier = estimate(&[first - 1, 5], 6, &f, &f, &c).unwrap();
            assert!(earlier.time_units >= later.time_units && earlier.memory_units >= later.memory_units);
        }
    }

    #[test]
    fn estimate_contract() {
        let f = vec![1.0; 3];
        let c = CostCoeffs::default();
        assert!(matches!(estimate(&[], 3, &f, &f, &c), Err(Error::EmptySelection)));
        assert!(estimate(&[3], 3, &f, &f, &c).is_err());
        assert!(estimate(&[0], 4, &f, &f, &c).is_err());
        assert!(estimate(&[0], 3, &f, &f, &CostCoeffs { t1: -1.0, ..c }).is_err());
        assert_eq!(estimate(&[1, 1, 2], 3, &f, &f, &c).unwrap().adapters, 2);
    }

    #[test]
    fn calibration_round_trip() {
        let f: Vec<f64> = (0..8).map(|l| 10.0 + l as f64).collect();
        let a: Vec<f64> = (0..8).map(|l| 4.0 + (l % 3) as f64).collect();
        let truth = CostCoeffs { t0: 3.5, t1: 0.75, t2: 2.25, m0: 11.0, m1: 0.5 };
        let sets = vec![vec![0], vec![2, 5], vec![4], vec![6, 7], vec![1, 3, 5, 7], vec![7]];
        let cal = calibrate(&synth(&truth, &sets, &f, &a), 8, &f, &a).unwrap();
        let got = [cal.coeffs.t0, cal.coeffs.t1, cal.coeffs.t2, cal.coeffs.m0, cal.coeffs.m1];
        let want = [truth.t0, truth.t1, truth.t2, truth.m0, truth.m1];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-6, "{got:?} vs {want:?}");
        }
        assert!(cal.time_residual <= 1e-9 && cal.memory_residual <= 1e-9);
    }

    #[test]
    fn constant_first_layer_is_underdetermined() {
        let f = vec![1.0; 6];
        let m: Vec<Measurement> =
            (0..5).map(|_| Measurement { layers: vec![2, 4], time: 1.0, memory: 1.0 }).collect();
        assert!(matches!(calibrate(&m, 6, &f, &f), Err(Error::CalibrationUnderdetermined(_))));
    }

    #[test]
    fn collinear_design_is_underdetermined() {
        // Uniform per-layer flops and |S| tied to depth make the columns dependent.
        let f = vec![1.0; 6];
        let m: Vec<Measurement> = (0..6)
            .map(|l| Measurement { layers: (l..6).collect(), time: 1.0 + l as f64, memory: 2.0 })
            .collect();
        assert!(matches!(calibrate(&m, 6, &f, &f), Err(Error::CalibrationUnderdetermined(_))));
    }

    #[test]
    fn fit_stays_nonnegative() {
        let f = vec![1.0; 6];
        // Time decreasing with path length would need t1 < 0.
        let m: Vec<Measurement> = (0..6)
            .map(|l| Measurement {
                layers: if l % 2 == 0 { vec![l] } else { vec![l, 5] },
                time: 10.0 - l as f64 * 0.5,
                memory: 1.0 + l as f64,
            })
            .collect();
        let cal = calibrate(&m, 6, &f, &f).unwrap();
        let c = cal.coeffs;
        assert!([c.t0, c.t1, c.t2, c.m0, c.m1].iter().all(|&v| v >= 0.0));
        assert!(cal.time_residual > 0.0);
    }

    #[test]
    fn coeffs_json_keys() {
        let v = serde_json::to_value(CostCoeffs::default()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["m0", "m1", "t0", "t1", "t2"]);
    }
}
