use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, eigen_sym, SymMatrix};

/// Second-moment statistics of layer features `φ` against the target residual `r⋆`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub d: usize,
    pub n: u64,
    /// Activation energy `tr(Σ)/d`.
    pub sigma: f64,
    #[serde(rename = "Sigma")]
    pub sigma_mat: SymMatrix,
    pub c: Vec<f64>,
}

impl FeatureStats {
    /// Validates dimensions, finiteness and positive semidefiniteness of `Σ`.
    pub fn from_parts(sigma_mat: SymMatrix, c: Vec<f64>, n: u64) -> Result<Self> {
        let d = sigma_mat.dim();
        if c.len() != d {
            return Err(Error::DimensionMismatch(format!("c has {} entries, Σ dimension {d}", c.len())));
        }
        if !sigma_mat.is_finite() || c.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature statistics".into()));
        }
        let spec = eigen_sym(&sigma_mat)?;
        if spec.min() < -1e-10 * spec.max().abs().max(1.0) {
            return Err(Error::InvalidMatrix(format!("Σ has negative eigenvalue {:e}", spec.min())));
        }
        let sigma = sigma_mat.trace() / d as f64;
        Ok(Self { d, n, sigma, sigma_mat, c })
    }

    /// Adds `ε I` to `Σ` (explicit ridge; never applied implicitly).
    pub fn ridged(&self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge {eps} must be a non-negative number")));
        }
        let m = self.sigma_mat.shifted(eps);
        let sigma = m.trace() / self.d as f64;
        Ok(Self { sigma_mat: m, sigma, ..self.clone() })
    }
}

/// Streaming, mergeable accumulator of `Σφφᵀ`, `Σφr⋆` and `Σ r⋆² φφᵀ`.
///
/// Merging partial accumulators equals accumulating serially up to rounding,
/// so batches can be reduced in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    d: usize,
    n: u64,
    outer: Vec<f64>,
    cross: Vec<f64>,
    weighted_outer: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(d: usize) -> Self {
        Self { d, n: 0, outer: vec![0.0; d * d], cross: vec![0.0; d], weighted_outer: vec![0.0; d * d] }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn push(&mut self, phi: &[f64], r_star: f64) -> Result<()> {
        if phi.len() != self.d {
            return Err(Error::DimensionMismatch(format!("feature of length {} for dimension {}", phi.len(), self.d)));
        }
        let r2 = r_star * r_star;
        for i in 0..self.d {
            self.cross[i] += phi[i] * r_star;
            let row = i * self.d;
            for j in i..self.d {
                let p = phi[i] * phi[j];
                self.outer[row + j] += p;
                self.weighted_outer[row + j] += r2 * p;
            }
        }
        self.n += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.d != self.d {
            return Err(Error::DimensionMismatch(format!("merging dimension {} into {}", other.d, self.d)));
        }
        self.n += other.n;
        self.outer.iter_mut().zip(&other.outer).for_each(|(a, b)| *a += b);
        self.cross.iter_mut().zip(&other.cross).for_each(|(a, b)| *a += b);
        self.weighted_outer.iter_mut().zip(&other.weighted_outer).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn mean_upper(&self, sums: &[f64]) -> SymMatrix {
        let inv = 1.0 / self.n as f64;
        SymMatrix::from_fn(self.d, |i, j| sums[i * self.d + j] * inv)
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("no samples accumulated".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidArgument("zero-dimensional features".into()));
        }
        let inv = 1.0 / self.n as f64;
        let sigma_mat = self.mean_upper(&self.outer);
        let sigma = sigma_mat.trace() / self.d as f64;
        Ok(FeatureStats { d: self.d, n: self.n, sigma, sigma_mat, c: self.cross.iter().map(|x| x * inv).collect() })
    }

    /// Sampling covariance of the empirical cross-moment `ĉ`:
    /// `Γ̂ = (E[r⋆² φφᵀ] − ccᵀ) / n`.
    pub fn cross_moment_noise(&self) -> Result<SymMatrix> {
        let fs = self.finish()?;
        let second = self.mean_upper(&self.weighted_outer);
        let n = self.n as f64;
        Ok(SymMatrix::from_fn(self.d, |i, j| (second.get(i, j) - fs.c[i] * fs.c[j]) / n))
    }
}

/// Population-normalized (`1/n`) feature covariance and cross-moment.
pub fn accumulate_stats<'a, I>(samples: I) -> Result<FeatureStats>
where
    I: IntoIterator<Item = (&'a [f64], f64)>,
{
    let mut it = samples.into_iter().peekable();
    let d = match it.peek() {
        Some((phi, _)) => phi.len(),
        None => return Err(Error::InvalidArgument("no samples".into())),
    };
    let mut acc = StatsAccumulator::new(d);
    for (phi, r) in it {
        acc.push(phi, r)?;
    }
    acc.finish()
}

/// `σ̂ = E‖φ‖²/d` by default; the unnormalized variant drops the `1/d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyNormalization {
    #[default]
    PerDimension,
    Total,
}

impl EnergyNormalization {
    pub fn energy(self, mean_sqnorm: f64, d: usize) -> f64 {
        match self {
            Self::PerDimension => mean_sqnorm / d as f64,
            Self::Total => mean_sqnorm,
        }
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Gradient-based resnorm estimate `mean(‖∇L‖) / √σ̂`.
pub fn resnorm_proxy(grad_norms: &[f64], phi_sqnorms: &[f64], d: usize) -> Result<f64> {
    resnorm_proxy_with(grad_norms, phi_sqnorms, d, EnergyNormalization::PerDimension)
}

pub fn resnorm_proxy_with(
    grad_norms: &[f64],
    phi_sqnorms: &[f64],
    d: usize,
    norm: EnergyNormalization,
) -> Result<f64> {
    if grad_norms.is_empty() || phi_sqnorms.is_empty() {
        return Err(Error::InvalidArgument("empty gradient or activation sample".into()));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("feature dimension must be positive".into()));
    }
    let denom = norm.energy(mean(phi_sqnorms), d).sqrt();
    if !(denom >= 1e-15) {
        return Err(Error::DegenerateActivation(format!("activation energy {:e} is numerically zero", denom * denom)));
    }
    Ok(mean(grad_norms) / denom)
}

/// Squared norm helper used by callers that capture activations.
pub fn sqnorm(v: &[f64]) -> f64 {
    dot(v, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn samples(seed: u64, n: usize, d: usize) -> Vec<(Vec<f64>, f64)> {
        let mut rng = CounterRng::from_seed(seed);
        (0..n).map(|_| (rng.fill_normal(d), rng.normal())).collect()
    }

    fn view(s: &[(Vec<f64>, f64)]) -> impl Iterator<Item = (&[f64], f64)> {
        s.iter().map(|(p, r)| (p.as_slice(), *r))
    }

    #[test]
    fn single_sample() {
        let s = vec![(vec![1.0, 0.0], 2.0)];
        let fs = accumulate_stats(view(&s)).unwrap();
        assert_eq!(fs.sigma_mat, SymMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
        assert_eq!(fs.c, vec![2.0, 0.0]);
        assert_eq!(fs.sigma, 0.5);
    }

    #[test]
    fn two_sample_average() {
        let s = vec![(vec![1.0, 1.0], 1.0), (vec![-1.0, 1.0], -1.0)];
        let fs = accumulate_stats(view(&s)).unwrap();
        assert_eq!(fs.sigma_mat, SymMatrix::identity(2));
        assert_eq!(fs.c, vec![1.0, 0.0]);
    }

    #[test]
    fn matches_two_pass_recomputation() {
        let s = samples(3, 200, 4);
        let fs = accumulate_stats(view(&s)).unwrap();
        let n = s.len() as f64;
        for i in 0..4 {
            let ci: f64 = s.iter().map(|(p, r)| p[i] * r).sum::<f64>() / n;
            assert!((fs.c[i] - ci).abs() < 1e-14);
            for j in 0..4 {
                let sij: f64 = s.iter().map(|(p, _)| p[i] * p[j]).sum::<f64>() / n;
                assert!((fs.sigma_mat.get(i, j) - sij).abs() < 1e-14);
            }
        }
        assert!((fs.sigma - fs.sigma_mat.trace() / 4.0).abs() < 1e-10);
    }

    #[test]
    fn merge_equals_serial() {
        let s = samples(9, 301, 3);
        let serial = accumulate_stats(view(&s)).unwrap();
        let mut parts: Vec<StatsAccumulator> = s
            .chunks(37)
            .map(|chunk| {
                let mut a = StatsAccumulator::new(3);
                chunk.iter().for_each(|(p, r)| a.push(p, *r).unwrap());
                a
            })
            .collect();
        let mut total = parts.remove(0);
        parts.iter().for_each(|p| total.merge(p).unwrap());
        let merged = total.finish().unwrap();
        assert_eq!(merged.n, serial.n);
        for (a, b) in merged.sigma_mat.as_slice().iter().zip(serial.sigma_mat.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in merged.c.iter().zip(&serial.c) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn errors() {
        let empty: Vec<(Vec<f64>, f64)> = vec![];
        assert!(accumulate_stats(view(&empty)).is_err());
        let bad = vec![(vec![1.0, 0.0], 1.0), (vec![1.0], 1.0)];
        assert!(matches!(accumulate_stats(view(&bad)), Err(Error::DimensionMismatch(_))));
        assert!(StatsAccumulator::new(2).merge(&StatsAccumulator::new(3)).is_err());
    }

    #[test]
    fn json_shape() {
        let s = vec![(vec![1.0, 0.0], 2.0)];
        let fs = accumulate_stats(view(&s)).unwrap();
        let v = serde_json::to_value(&fs).unwrap();
        for key in ["d", "n", "sigma", "Sigma", "c"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: FeatureStats = serde_json::from_value(v).unwrap();
        assert_eq!(back, fs);
    }

    #[test]
    fn proxy_examples() {
        assert_eq!(resnorm_proxy(&[2.0, 2.0], &[4.0, 4.0], 1).unwrap(), 1.0);
        assert_eq!(resnorm_proxy(&[0.0], &[4.0], 3).unwrap(), 0.0);
        assert!(matches!(resnorm_proxy(&[1.0], &[0.0], 3), Err(Error::DegenerateActivation(_))));
        assert!(resnorm_proxy(&[], &[1.0], 1).is_err());
        let per_dim = resnorm_proxy(&[1.0], &[8.0], 2).unwrap();
        let total = resnorm_proxy_with(&[1.0], &[8.0], 2, EnergyNormalization::Total).unwrap();
        assert!((per_dim / total - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn proxy_invariant_under_feature_rescaling() {
        // Linear adapter on features φ: per-sample gradient of ½(θᵀφ − r)² at θ = 0 is −rφ.
        let s = samples(4, 50, 3);
        let eval = |alpha: f64| {
            let g: Vec<f64> = s.iter().map(|(p, r)| (r * alpha).abs() * p.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            let e: Vec<f64> = s.iter().map(|(p, _)| alpha * alpha * p.iter().map(|x| x * x).sum::<f64>()).collect();
            resnorm_proxy(&g, &e, 3).unwrap()
        };
        assert!((eval(1.0) - eval(7.5)).abs() < 1e-12 * eval(1.0));
    }

    #[test]
    fn cross_moment_noise_is_psd() {
        let s = samples(11, 100, 3);
        let mut acc = StatsAccumulator::new(3);
        s.iter().for_each(|(p, r)| acc.push(p, *r).unwrap());
        let g = acc.cross_moment_noise().unwrap();
        assert!(eigen_sym(&g).unwrap().min() >= -1e-14);
    }
}
