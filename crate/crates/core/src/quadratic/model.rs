use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Partition, SymMatrix};

/// Local quadratic surrogate `Q(θ) = Q0 + gᵀθ + ½ θᵀHθ` over layer-partitioned
/// parameters, with `H` positive definite.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    g: Vec<f64>,
    h: SymMatrix,
    partition: Partition,
    q0: f64,
    factor: Cholesky,
}

#[derive(Serialize, Deserialize)]
struct QuadraticModelJson {
    g: Vec<f64>,
    #[serde(rename = "H")]
    h: SymMatrix,
    sizes: Partition,
    #[serde(rename = "Q0", default)]
    q0: f64,
}

impl QuadraticModel {
    pub fn new(g: Vec<f64>, h: SymMatrix, partition: Partition) -> Result<Self> {
        partition.check_dim(h.dim())?;
        if g.len() != h.dim() {
            return Err(Error::DimensionMismatch(format!(
                "gradient has {} entries, Hessian dimension {}",
                g.len(),
                h.dim()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("gradient has non-finite entries".into()));
        }
        let factor = Cholesky::factor(&h)?;
        Ok(Self { g, h, partition, q0: 0.0, factor })
    }

    pub fn with_q0(mut self, q0: f64) -> Self {
        self.q0 = q0;
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: QuadraticModelJson = serde_json::from_str(s)?;
        Ok(Self::new(raw.g, raw.h, raw.sizes)?.with_q0(raw.q0))
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(QuadraticModelJson {
            g: self.g.clone(),
            h: self.h.clone(),
            sizes: self.partition.clone(),
            q0: self.q0,
        })
        .expect("plain data serializes")
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn h(&self) -> &SymMatrix {
        &self.h
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn q0(&self) -> f64 {
        self.q0
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn layers(&self) -> usize {
        self.partition.layers()
    }

    pub(crate) fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.q0 + dot(&self.g, theta) + 0.5 * self.h.quad_form(theta)
    }

    pub fn gradient_block(&self, layer: usize) -> &[f64] {
        self.partition.block_of(&self.g, layer)
    }

    pub fn hessian_block(&self, layer: usize) -> SymMatrix {
        let idx: Vec<usize> = self.partition.range(layer).collect();
        self.h.principal(&idx)
    }

    /// `min_θ Q(θ) = Q0 − ½ gᵀH⁻¹g`.
    pub fn optimum_value(&self) -> f64 {
        self.q0 - 0.5 * self.factor.inv_quad_form(&self.g)
    }

    /// Sorts, deduplicates and range-checks a layer selection.
    pub fn layer_set(&self, layers: &[usize]) -> Result<Vec<usize>> {
        normalize_layers(self.layers(), layers)
    }
}

pub(crate) fn normalize_layers(total: usize, layers: &[usize]) -> Result<Vec<usize>> {
    let mut s = layers.to_vec();
    s.sort_unstable();
    s.dedup();
    if let Some(&bad) = s.iter().find(|&&l| l >= total) {
        return Err(Error::InvalidArgument(format!("layer {bad} out of range for {total} layers")));
    }
    Ok(s)
}
