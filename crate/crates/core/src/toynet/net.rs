use std::borrow::Cow;

use super::batch::Batch;
use super::model::{ToyModel, ADAPTER_STREAM};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{CounterRng, StreamTag};

/// LoRA-style pair: the layer's weight becomes `W + A·B` with `A: width×r`, `B: r×width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    fn product(&self) -> Matrix {
        self.a.matmul(&self.b).expect("conformable adapter factors")
    }
}

/// Optional adapter per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    slots: Vec<Option<LowRank>>,
}

impl Adapters {
    pub fn none(model: &ToyModel) -> Self {
        Self { slots: vec![None; model.layers()] }
    }

    /// Both factors zero on the given layers.
    pub fn zeros(model: &ToyModel, layers: &[usize], rank: usize) -> Result<Self> {
        Self::build(model, layers, rank, |_, w, r| Matrix::zeros(w, r))
    }

    /// Standard LoRA start: seeded `A` with entries uniform in `±1/√width`, `B = 0`,
    /// so `A·B = 0`. Column `j` of `A` does not depend on the rank, so lower-rank
    /// initializations are prefixes of higher-rank ones.
    pub fn lora_init(model: &ToyModel, layers: &[usize], rank: usize) -> Result<Self> {
        let seed = model.spec().seed;
        Self::build(model, layers, rank, |l, w, r| {
            let mut rng = CounterRng::new(seed, StreamTag::new(ADAPTER_STREAM, l as u32));
            let cols = rng.fill_symmetric(w * r, 1.0 / (w as f64).sqrt());
            Matrix::from_fn(w, r, |i, j| cols[j * w + i])
        })
    }

    fn build(
        model: &ToyModel,
        layers: &[usize],
        rank: usize,
        a_init: impl Fn(usize, usize, usize) -> Matrix,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
        }
        let mut out = Self::none(model);
        let w = model.width();
        for &l in layers {
            if l >= model.layers() {
                return Err(Error::InvalidArgument(format!("layer {l} out of range for {} layers", model.layers())));
            }
            out.slots[l] = Some(LowRank { a: a_init(l, w, rank), b: Matrix::zeros(rank, w) });
        }
        Ok(out)
    }

    pub fn slot(&self, layer: usize) -> Option<&LowRank> {
        self.slots.get(layer).and_then(Option::as_ref)
    }

    pub fn slot_mut(&mut self, layer: usize) -> Option<&mut LowRank> {
        self.slots.get_mut(layer).and_then(Option::as_mut)
    }

    /// Layers that carry an adapter, ascending.
    pub fn adapted(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&l| self.slots[l].is_some()).collect()
    }

    /// Parameters of all adapted layers in layer order, each as `A` then `B`, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slots.iter().flatten().flat_map(|s| s.a.as_slice().iter().chain(s.b.as_slice()).copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.slots.iter().flatten().map(|s| s.a.as_slice().len() + s.b.as_slice().len()).sum();
        if flat.len() != total {
            return Err(Error::DimensionMismatch(format!("{} values for {total} adapter parameters", flat.len())));
        }
        let mut off = 0;
        for s in self.slots.iter_mut().flatten() {
            for m in [&mut s.a, &mut s.b] {
                let n = m.as_slice().len();
                m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }
}

/// Multiply-add and retained-float counts of a pass, used as deterministic
/// cost measurements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Work {
    pub flops: u64,
    pub peak_floats: u64,
}

impl Work {
    pub fn add(&mut self, other: Work) {
        self.flops += other.flops;
        self.peak_floats = self.peak_floats.max(other.peak_floats);
    }
}

/// Outputs and per-layer adapter inputs `φ_ℓ = h_{ℓ−1}` (`n × width` each).
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub outputs: Matrix,
    pub activations: Vec<Matrix>,
}

/// Gradient of the mean squared loss with respect to one adapter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub layer: usize,
    pub a: Matrix,
    pub b: Matrix,
}

impl AdapterGrad {
    pub fn norm(&self) -> f64 {
        let (a, b) = (self.a.frobenius_norm(), self.b.frobenius_norm());
        (a * a + b * b).sqrt()
    }
}

pub(crate) struct Layers<'a> {
    model: &'a ToyModel,
    eff: Vec<Cow<'a, Matrix>>,
}

impl<'a> Layers<'a> {
    pub(crate) fn student(model: &'a ToyModel, adapters: Option<&Adapters>, work: &mut Work) -> Result<Self> {
        if let Some(ad) = adapters {
            if ad.slots.len() != model.layers() {
                return Err(Error::DimensionMismatch(format!(
                    "{} adapter slots for {} layers",
                    ad.slots.len(),
                    model.layers()
                )));
            }
        }
        let w = model.width();
        let mut eff = Vec::with_capacity(model.layers());
        for l in 0..model.layers() {
            match adapters.and_then(|a| a.slot(l)) {
                Some(s) => {
                    if s.a.rows() != w || s.b.cols() != w || s.b.rows() != s.a.cols() {
                        return Err(Error::DimensionMismatch(format!("adapter on layer {l} does not fit width {w}")));
                    }
                    let mut m = model.w[l].clone();
                    m.axpy(1.0, &s.product());
                    work.flops += (w * w * s.rank()) as u64;
                    eff.push(Cow::Owned(m));
                }
                None => eff.push(Cow::Borrowed(&model.w[l])),
            }
        }
        Ok(Self { model, eff })
    }

    pub(crate) fn teacher(model: &'a ToyModel) -> Self {
        let mut eff: Vec<Cow<'a, Matrix>> = model.w.iter().map(Cow::Borrowed).collect();
        for (&l, t) in model.spec.teacher_layers.iter().zip(&model.teacher_w) {
            eff[l] = Cow::Borrowed(t);
        }
        Self { model, eff }
    }
}

/// Per-sample forward state kept for the backward pass.
pub(crate) struct Trace {
    /// `h[ℓ]` is the input of block `ℓ`; `h[L]` feeds the head.
    pub h: Vec<Vec<f64>>,
    /// Post-activation `act(u_ℓ)`.
    pub a: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

fn matvec_into(m: &Matrix, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = m.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn matvec_t_add(m: &Matrix, x: &[f64], out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += mij * xi;
        }
    }
}

impl Layers<'_> {
    pub(crate) fn run(&self, x: &[f64], work: &mut Work) -> Trace {
        let m = self.model;
        let (w, act) = (m.width(), m.spec.nonlinearity);
        let mut h = Vec::with_capacity(m.layers() + 1);
        let mut a = Vec::with_capacity(m.layers());
        h.push(x.to_vec());
        let mut u = vec![0.0; w];
        let mut va = vec![0.0; w];
        for l in 0..m.layers() {
            matvec_into(&self.eff[l], &h[l], &mut u);
            let al: Vec<f64> = u.iter().map(|&z| act.apply(z)).collect();
            matvec_into(&m.v[l], &al, &mut va);
            let next: Vec<f64> = h[l].iter().zip(&va).map(|(p, q)| p + q).collect();
            h.push(next);
            a.push(al);
        }
        let mut y = vec![0.0; m.head_dim()];
        matvec_into(&m.head, &h[m.layers()], &mut y);
        work.flops += (m.layers() * (2 * w * w + 2 * w) + m.head_dim() * w) as u64;
        Trace { h, a, y }
    }

    /// Accumulates adapter gradients for one sample given `∂ℓ/∂y`; stops at `stop`.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        dy: &[f64],
        stop: usize,
        adapters: &Adapters,
        grads: &mut [Option<(Matrix, Matrix)>],
        work: &mut Work,
    ) {
        let m = self.model;
        let (w, act) = (m.width(), m.spec.nonlinearity);
        let mut gh = vec![0.0; w];
        matvec_t_add(&m.head, dy, &mut gh);
        let mut gu = vec![0.0; w];
        for l in (stop..m.layers()).rev() {
            gu.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_add(&m.v[l], &gh, &mut gu);
            for (g, &al) in gu.iter_mut().zip(&trace.a[l]) {
                *g *= act.derivative(al);
            }
            work.flops += (w * w + w) as u64;
            if let (Some(slot), Some((ga, gb))) = (adapters.slot(l), grads[l].as_mut()) {
                let r = slot.rank();
                let hin = &trace.h[l];
                let atg = slot.a.matvec_t(&gu);
                let bh = slot.b.matvec(hin);
                for k in 0..r {
                    for (gbk, &hj) in gb.row_mut(k).iter_mut().zip(hin) {
                        *gbk += atg[k] * hj;
                    }
                }
                for i in 0..w {
                    for (gai, &bk) in ga.row_mut(i).iter_mut().zip(&bh) {
                        *gai += gu[i] * bk;
                    }
                }
                work.flops += (4 * w * r) as u64;
            }
            if l > stop {
                matvec_t_add(&self.eff[l], &gu, &mut gh);
                work.flops += (w * w) as u64;
            }
        }
    }
}

impl Layers<'_> {
    /// `∂ℓ_i/∂u_ℓ` for every layer, given `∂ℓ_i/∂y`, without adapter bookkeeping.
    pub(crate) fn preactivation_grads(&self, trace: &Trace, dy: &[f64]) -> Vec<Vec<f64>> {
        let m = self.model;
        let (w, act) = (m.width(), m.spec.nonlinearity);
        let mut gh = vec![0.0; w];
        matvec_t_add(&m.head, dy, &mut gh);
        let mut out = vec![Vec::new(); m.layers()];
        for l in (0..m.layers()).rev() {
            let mut gu = vec![0.0; w];
            matvec_t_add(&m.v[l], &gh, &mut gu);
            for (g, &al) in gu.iter_mut().zip(&trace.a[l]) {
                *g *= act.derivative(al);
            }
            if l > 0 {
                matvec_t_add(&self.eff[l], &gu, &mut gh);
            }
            out[l] = gu;
        }
        out
    }
}

fn check_inputs(model: &ToyModel, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != model.width() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} features, model width is {}",
            inputs.cols(),
            model.width()
        )));
    }
    Ok(())
}

/// Student outputs (`n × head_dim`).
pub fn forward(model: &ToyModel, adapters: Option<&Adapters>, inputs: &Matrix) -> Result<Matrix> {
    Ok(forward_capture(model, adapters, inputs)?.outputs)
}

pub fn forward_capture(model: &ToyModel, adapters: Option<&Adapters>, inputs: &Matrix) -> Result<Capture> {
    check_inputs(model, inputs)?;
    let mut work = Work::default();
    let layers = Layers::student(model, adapters, &mut work)?;
    let (n, w) = (inputs.rows(), model.width());
    let mut outputs = Matrix::zeros(n, model.head_dim());
    let mut activations = vec![Matrix::zeros(n, w); model.layers()];
    for i in 0..n {
        let t = layers.run(inputs.row(i), &mut work);
        outputs.row_mut(i).copy_from_slice(&t.y);
        for (l, act) in activations.iter_mut().enumerate() {
            act.row_mut(i).copy_from_slice(&t.h[l]);
        }
    }
    Ok(Capture { outputs, activations })
}

pub fn teacher_forward(model: &ToyModel, inputs: &Matrix) -> Result<Matrix> {
    check_inputs(model, inputs)?;
    let layers = Layers::teacher(model);
    let mut work = Work::default();
    let mut outputs = Matrix::zeros(inputs.rows(), model.head_dim());
    for i in 0..inputs.rows() {
        let t = layers.run(inputs.row(i), &mut work);
        outputs.row_mut(i).copy_from_slice(&t.y);
    }
    Ok(outputs)
}

/// `½ · mean_i ‖F(x_i) − t_i‖²`.
pub fn loss(model: &ToyModel, adapters: Option<&Adapters>, batch: &Batch) -> Result<f64> {
    batch.check(model)?;
    let y = forward(model, adapters, &batch.inputs)?;
    Ok(half_mean_sq(&y, &batch.targets))
}

pub(crate) fn half_mean_sq(y: &Matrix, t: &Matrix) -> f64 {
    let s: f64 = y.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * s / y.rows() as f64
}

/// Loss and exact reverse-mode gradients for the adapters on `layers`,
/// truncating backpropagation at the earliest of them.
pub(crate) fn loss_and_grads(
    model: &ToyModel,
    adapters: &Adapters,
    batch: &Batch,
    layers: &[usize],
    work: &mut Work,
) -> Result<(f64, Vec<AdapterGrad>)> {
    batch.check(model)?;
    let Some(&stop) = layers.iter().min() else {
        return Err(Error::EmptySelection);
    };
    let mut grads: Vec<Option<(Matrix, Matrix)>> = vec![None; model.layers()];
    for &l in layers {
        let slot = adapters
            .slot(l)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {l} has no adapter")))?;
        grads[l] = Some((Matrix::zeros(slot.a.rows(), slot.a.cols()), Matrix::zeros(slot.b.rows(), slot.b.cols())));
    }
    let net = Layers::student(model, Some(adapters), work)?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let trace = net.run(batch.inputs.row(i), work);
        let dy: Vec<f64> = trace.y.iter().zip(batch.targets.row(i)).map(|(y, t)| (y - t) * inv_n).collect();
        total += trace.y.iter().zip(batch.targets.row(i)).map(|(y, t)| (y - t) * (y - t)).sum::<f64>();
        net.backward(&trace, &dy, stop, adapters, &mut grads, work);
    }
    let retained = (model.layers() - stop) * 2 * model.width() + model.head_dim();
    work.peak_floats = work.peak_floats.max((n * retained) as u64);
    let out = grads
        .into_iter()
        .enumerate()
        .filter_map(|(layer, g)| g.map(|(a, b)| AdapterGrad { layer, a, b }))
        .collect();
    Ok((0.5 * total * inv_n, out))
}

pub(crate) fn loss_counted(model: &ToyModel, adapters: &Adapters, batch: &Batch, work: &mut Work) -> Result<f64> {
    let net = Layers::student(model, Some(adapters), work)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let t = net.run(batch.inputs.row(i), work);
        total += t.y.iter().zip(batch.targets.row(i)).map(|(y, t)| (y - t) * (y - t)).sum::<f64>();
    }
    Ok(0.5 * total / batch.len() as f64)
}

/// Exact gradients of the mean squared loss with respect to the adapters on `layers`.
pub fn grad_adapters(model: &ToyModel, adapters: &Adapters, batch: &Batch, layers: &[usize]) -> Result<Vec<AdapterGrad>> {
    let mut work = Work::default();
    Ok(loss_and_grads(model, adapters, batch, layers, &mut work)?.1)
}

/// Per-layer backward work and retained activations per sample, the inputs
/// of the depth-dependent cost model.
pub fn layer_costs(model: &ToyModel) -> (Vec<f64>, Vec<f64>) {
    let w = model.width() as f64;
    let flops = vec![2.0 * w * w + w; model.layers()];
    let act = vec![2.0 * w; model.layers()];
    (flops, act)
}
