use super::model::{ToyModel, BATCH_STREAM};
use super::net::teacher_forward;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::Matrix;
use crate::rng::{CounterRng, StreamTag};

/// Inputs (`n × width`) and teacher targets (`n × head_dim`), one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("batch must contain at least one sample".into()));
        }
        if inputs.rows() != targets.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    /// Standard normal inputs labelled by the model's teacher.
    pub fn sample(model: &ToyModel, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("batch must contain at least one sample".into()));
        }
        let w = model.width();
        let mut rng = CounterRng::new(seed, StreamTag::new(BATCH_STREAM, 0));
        let inputs = Matrix::from_vec(n, w, rng.fill_normal(n * w))?;
        let targets = teacher_forward(model, &inputs)?;
        Self::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, model: &ToyModel) -> Result<()> {
        if self.inputs.cols() != model.width() || self.targets.cols() != model.head_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch is {}→{}, model is {}→{}",
                self.inputs.cols(),
                self.targets.cols(),
                model.width(),
                model.head_dim()
            )));
        }
        Ok(())
    }

    /// Same samples in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument("not a permutation of the batch".into()));
        }
        let pick = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(order[i], j));
        Self::new(pick(&self.inputs), pick(&self.targets))
    }

    /// Header `x0..x{w−1},t0..t{h−1}`, one row per sample.
    pub fn to_csv(&self) -> String {
        let (w, h) = (self.inputs.cols(), self.targets.cols());
        let mut header: Vec<String> = (0..w).map(|j| format!("x{j}")).collect();
        header.extend((0..h).map(|j| format!("t{j}")));
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            let row: Vec<String> =
                self.inputs.row(i).iter().chain(self.targets.row(i)).map(|&x| fmt_f64(x)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty batch file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let w = cols.iter().take_while(|c| c.starts_with('x')).count();
        let h = cols.len() - w;
        if w == 0 || h == 0 || !cols[w..].iter().all(|c| c.starts_with('t')) {
            return Err(Error::Parse(format!("unexpected batch header {header:?}")));
        }
        let (mut xs, mut ts) = (Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 1))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != w + h {
                return Err(Error::Parse(format!("row {} has {} fields, expected {}", lineno + 1, vals.len(), w + h)));
            }
            xs.extend_from_slice(&vals[..w]);
            ts.extend_from_slice(&vals[w..]);
        }
        let n = xs.len() / w;
        Self::new(Matrix::from_vec(n, w, xs)?, Matrix::from_vec(n, h, ts)?)
    }
}
