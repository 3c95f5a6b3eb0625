use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{CounterRng, StreamTag};

pub(crate) const W_STREAM: u32 = 1;
pub(crate) const V_STREAM: u32 = 2;
pub(crate) const HEAD_STREAM: u32 = 3;
pub(crate) const TEACHER_STREAM: u32 = 4;
pub(crate) const ADAPTER_STREAM: u32 = 5;
pub(crate) const BATCH_STREAM: u32 = 6;

const FORMAT: &str = "toynet/v1";
/// Rank of the planted teacher perturbation (capped by the width).
pub const TEACHER_RANK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    #[default]
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Self::Identity => u,
            Self::Tanh => u.tanh(),
        }
    }

    /// Derivative expressed through the activation value `a = act(u)`.
    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown nonlinearity {other:?}"))),
        }
    }
}

/// Shape and seed of a layered residual toy network. Layer indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub layers: usize,
    pub width: usize,
    pub nonlinearity: Nonlinearity,
    pub head_dim: usize,
    pub teacher_layers: Vec<usize>,
    pub teacher_scale: f64,
    pub seed: u64,
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 layers, got {}", self.layers)));
        }
        if self.width < 2 {
            return Err(Error::InvalidArgument(format!("width must be at least 2, got {}", self.width)));
        }
        if self.head_dim < 1 {
            return Err(Error::InvalidArgument("head_dim must be positive".into()));
        }
        if let Some(&l) = self.teacher_layers.iter().find(|&&l| l >= self.layers) {
            return Err(Error::InvalidArgument(format!("teacher layer {l} out of range for {} layers", self.layers)));
        }
        if !self.teacher_scale.is_finite() {
            return Err(Error::InvalidArgument("teacher_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Frozen residual network `h_ℓ = h_{ℓ−1} + V_ℓ·act((W_ℓ + A_ℓB_ℓ) h_{ℓ−1})`,
/// `F(x) = head·h_L`, plus a teacher whose `W_ℓ` are perturbed on the
/// teacher layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub(crate) spec: ToyModelSpec,
    pub(crate) w: Vec<Matrix>,
    pub(crate) v: Vec<Matrix>,
    pub(crate) head: Matrix,
    /// Teacher copy of `W_ℓ` for each entry of `spec.teacher_layers`.
    pub(crate) teacher_w: Vec<Matrix>,
}

fn uniform_matrix(rows: usize, cols: usize, a: f64, rng: &mut CounterRng) -> Matrix {
    Matrix::from_vec(rows, cols, rng.fill_symmetric(rows * cols, a)).expect("sized")
}

/// Builds the frozen weights and the teacher from the spec; deterministic in the seed.
pub fn generate(spec: &ToyModelSpec) -> Result<ToyModel> {
    spec.validate()?;
    let mut spec = spec.clone();
    spec.teacher_layers.sort_unstable();
    spec.teacher_layers.dedup();
    let (n, a) = (spec.width, 1.0 / (spec.width as f64).sqrt());
    let stream = |kind, idx: usize| CounterRng::new(spec.seed, StreamTag::new(kind, idx as u32));
    let w: Vec<Matrix> = (0..spec.layers).map(|l| uniform_matrix(n, n, a, &mut stream(W_STREAM, l))).collect();
    let v: Vec<Matrix> = (0..spec.layers).map(|l| uniform_matrix(n, n, a, &mut stream(V_STREAM, l))).collect();
    let head = uniform_matrix(spec.head_dim, n, a, &mut stream(HEAD_STREAM, 0));
    let rank = TEACHER_RANK.min(n);
    let teacher_w = spec
        .teacher_layers
        .iter()
        .map(|&l| {
            let mut rng = stream(TEACHER_STREAM, l);
            let left = Matrix::from_vec(n, rank, rng.fill_normal(n * rank)).expect("sized");
            let right = Matrix::from_vec(rank, n, rng.fill_normal(rank * n)).expect("sized");
            let mut delta = left.matmul(&right).expect("conformable");
            delta.scale(spec.teacher_scale / n as f64);
            let mut t = w[l].clone();
            t.axpy(1.0, &delta);
            t
        })
        .collect();
    Ok(ToyModel { spec, w, v, head, teacher_w })
}

#[derive(Serialize, Deserialize)]
struct WeightsJson {
    #[serde(rename = "W")]
    w: Vec<String>,
    #[serde(rename = "V")]
    v: Vec<String>,
    head: String,
    teacher_w: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    format: String,
    spec: ToyModelSpec,
    weights: WeightsJson,
}

fn encode(m: &Matrix) -> String {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(s: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = B64.decode(s).map_err(|e| Error::Parse(format!("bad base64 weights: {e}")))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Parse(format!("weight blob has {} bytes, expected {}", bytes.len(), rows * cols * 8)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Matrix::from_vec(rows, cols, data)
}

impl ToyModel {
    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> usize {
        self.spec.layers
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn head_dim(&self) -> usize {
        self.spec.head_dim
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.w[layer]
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(ModelJson {
            format: FORMAT.into(),
            spec: self.spec.clone(),
            weights: WeightsJson {
                w: self.w.iter().map(encode).collect(),
                v: self.v.iter().map(encode).collect(),
                head: encode(&self.head),
                teacher_w: self.teacher_w.iter().map(encode).collect(),
            },
        })
        .expect("plain data serializes")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let raw: ModelJson = serde_json::from_value(value)?;
        if raw.format != FORMAT {
            return Err(Error::SchemaMismatch { expected: FORMAT.into(), found: raw.format });
        }
        let spec = raw.spec;
        spec.validate()?;
        let mut sorted = spec.teacher_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != spec.teacher_layers {
            return Err(Error::Parse("teacher_layers must be sorted and distinct".into()));
        }
        let (n, l) = (spec.width, spec.layers);
        let wts = raw.weights;
        if wts.w.len() != l || wts.v.len() != l || wts.teacher_w.len() != spec.teacher_layers.len() {
            return Err(Error::Parse("weight lists do not match the spec".into()));
        }
        let all = |blobs: &[String]| blobs.iter().map(|s| decode(s, n, n)).collect::<Result<Vec<_>>>();
        let model = ToyModel {
            w: all(&wts.w)?,
            v: all(&wts.v)?,
            head: decode(&wts.head, spec.head_dim, n)?,
            teacher_w: all(&wts.teacher_w)?,
            spec,
        };
        let finite = |m: &Matrix| m.as_slice().iter().all(|x| x.is_finite());
        if !(model.w.iter().all(finite) && model.v.iter().all(finite) && finite(&model.head) && model.teacher_w.iter().all(finite)) {
            return Err(Error::Parse("non-finite weights".into()));
        }
        Ok(model)
    }
}
