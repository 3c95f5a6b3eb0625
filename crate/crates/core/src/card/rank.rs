use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, StreamTag};
use crate::toynet::LayerProfile;

const RANDOM_STREAM: u32 = 7;

/// 1-based ranks with the largest value ranked first; tied values share the
/// mean of the positions they occupy.
pub fn descending_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of descending average-tie ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("spearman on {} and {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} observations", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman inputs must be finite".into()));
    }
    let (rx, ry) = (descending_ranks(x), descending_ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input has no ranking".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One resnorm stratum; `regime_id` 0 holds the highest-resnorm layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub regime_id: usize,
    /// Ascending layer indices.
    pub layers: Vec<usize>,
    pub resnorm_range: (f64, f64),
}

/// Layer indices by resnorm, largest first, ties to the shallower layer.
fn resnorm_order(profiles: &[LayerProfile]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by(|&a, &b| {
        profiles[b].resnorm.total_cmp(&profiles[a].resnorm).then(profiles[a].layer.cmp(&profiles[b].layer))
    });
    order.into_iter().map(|i| profiles[i].layer).collect()
}

/// Start positions of `count` disjoint windows of `width` in a ranking of
/// `len`: the first at the top, the last at the bottom, the rest centred on
/// evenly spaced quantiles and pushed apart only as far as needed.
fn window_starts(len: usize, count: usize, width: usize) -> Vec<usize> {
    if count == 1 {
        return vec![0];
    }
    let mut starts = Vec::with_capacity(count);
    let mut floor = 0;
    for j in 0..count {
        let start = if j == 0 {
            0
        } else if j + 1 == count {
            len - width
        } else {
            let centre = (len - 1) as f64 * j as f64 / (count - 1) as f64;
            let ideal = (centre - (width - 1) as f64 / 2.0).round().max(0.0) as usize;
            ideal.clamp(floor, len - (count - j) * width)
        };
        starts.push(start);
        floor = start + width;
    }
    starts
}

/// Groups layers into `k` resnorm regimes of `k_per` layers each.
pub fn stratify(profiles: &[LayerProfile], k: usize, k_per: usize) -> Result<Vec<Stratum>> {
    let len = profiles.len();
    if k == 0 || k_per == 0 {
        return Err(Error::InvalidArgument("regime count and size must be at least 1".into()));
    }
    if k * k_per > len {
        return Err(Error::InvalidArgument(format!("{k} regimes of {k_per} layers exceed {len} layers")));
    }
    if profiles.iter().any(|p| !p.resnorm.is_finite()) {
        return Err(Error::InvalidArgument("resnorm must be finite".into()));
    }
    let order = resnorm_order(profiles);
    let by_layer = |l: usize| profiles.iter().find(|p| p.layer == l).map(|p| p.resnorm).unwrap_or(f64::NAN);
    Ok(window_starts(len, k, k_per)
        .into_iter()
        .enumerate()
        .map(|(regime_id, s)| {
            let mut layers = order[s..s + k_per].to_vec();
            let lo = by_layer(order[s + k_per - 1]);
            let hi = by_layer(order[s]);
            layers.sort_unstable();
            Stratum { regime_id, layers, resnorm_range: (lo, hi) }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Uniform,
    Bottom,
    Mid,
    Top,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "uniform" => Ok(Self::Uniform),
            "bottom" => Ok(Self::Bottom),
            "mid" => Ok(Self::Mid),
            "top" => Ok(Self::Top),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Depth-spread layers `round((i+½)·L/k)` (1-based), shifted to 0-based;
/// a collision moves to the nearest free index, the shallower one on ties.
pub fn uniform_layers(layers: usize, k: usize) -> Vec<usize> {
    let mut taken = vec![false; layers];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let one_based = ((i as f64 + 0.5) * layers as f64 / k as f64).round() as usize;
        let want = one_based.clamp(1, layers) - 1;
        let pick = (0..layers)
            .flat_map(|d| [want.checked_sub(d), Some(want + d)])
            .flatten()
            .find(|&c| c < layers && !taken[c])
            .expect("k ≤ L leaves a free index");
        taken[pick] = true;
        out.push(pick);
    }
    out.sort_unstable();
    out
}

/// `k` layers chosen by `strategy`. Resnorm strategies use the profiles'
/// ranking when given and raw depth (shallow = top) otherwise.
pub fn strategy_layers(
    strategy: Strategy,
    k: usize,
    layers: usize,
    profiles: Option<&[LayerProfile]>,
    seed: u64,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("budget k must be at least 1".into()));
    }
    if k > layers {
        return Err(Error::InvalidArgument(format!("budget {k} exceeds {layers} layers")));
    }
    if let Some(p) = profiles {
        if p.len() != layers {
            return Err(Error::DimensionMismatch(format!("{} profiles for {layers} layers", p.len())));
        }
    }
    let order = match profiles {
        Some(p) => resnorm_order(p),
        None => (0..layers).collect(),
    };
    let mut out = match strategy {
        Strategy::Uniform => return Ok(uniform_layers(layers, k)),
        Strategy::Random => {
            let mut rng = CounterRng::new(seed, StreamTag::new(RANDOM_STREAM, 0));
            let mut pool: Vec<usize> = (0..layers).collect();
            for i in 0..k {
                let j = i + rng.below((layers - i) as u64) as usize;
                pool.swap(i, j);
            }
            pool.truncate(k);
            pool
        }
        Strategy::Top => order[..k].to_vec(),
        Strategy::Bottom => order[layers - k..].to_vec(),
        Strategy::Mid => {
            // Same window as the middle stratum when three strata fit.
            let s = if 3 * k <= layers {
                window_starts(layers, 3, k)[1]
            } else {
                ((layers - k) as f64 / 2.0).round() as usize
            };
            order[s..s + k].to_vec()
        }
    };
    out.sort_unstable();
    Ok(out)
}
