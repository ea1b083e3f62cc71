//! Stacks of spiking layers with a time-averaged linear readout, their
//! parameters, batch gradients and optimizers.

use crate::bptt::{backward_layer, forward_layer, BackwardFlags, LayerTrace};
use crate::error::{Error, Result};
use crate::neuron::{Firing, NeuronConfig};
use crate::numeric::{matvec, matvec_transposed, softmax_xent, Matrix, Rng, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer {
    pub width: usize,
    pub cfg: NeuronConfig,
}

/// Shape of a sequential classifier: spiking hidden layers followed by a
/// non-spiking linear readout averaged over time.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub hidden: Vec<HiddenLayer>,
    pub classes: usize,
    pub timesteps: usize,
}

impl NetworkSpec {
    pub fn new(
        input_width: usize,
        hidden: Vec<HiddenLayer>,
        classes: usize,
        timesteps: usize,
    ) -> Self {
        NetworkSpec {
            input_width,
            hidden,
            classes,
            timesteps,
        }
    }

    /// Same neuron settings on every hidden layer.
    pub fn uniform(
        input_width: usize,
        widths: &[usize],
        cfg: &NeuronConfig,
        classes: usize,
        timesteps: usize,
    ) -> Self {
        let hidden = widths
            .iter()
            .map(|&width| HiddenLayer {
                width,
                cfg: cfg.clone(),
            })
            .collect();
        NetworkSpec {
            input_width,
            hidden,
            classes,
            timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config(
                "network needs at least one hidden spiking layer".into(),
            ));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timestep count must be at least 1".into()));
        }
        if self.input_width == 0 || self.classes == 0 || self.hidden.iter().any(|h| h.width == 0) {
            return Err(Error::Config("all widths must be at least 1".into()));
        }
        for (l, h) in self.hidden.iter().enumerate() {
            h.cfg
                .validate()
                .map_err(|e| Error::Config(format!("layer {l}: {e}")))?;
        }
        Ok(())
    }

    pub fn last_width(&self) -> usize {
        self.hidden.last().map_or(self.input_width, |h| h.width)
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_width
        } else {
            self.hidden[layer - 1].width
        }
    }

    /// Layer settings with the trained time constants substituted in.
    pub fn layer_config(&self, params: &ParamSet, layer: usize) -> NeuronConfig {
        let mut cfg = self.hidden[layer].cfg.clone();
        cfg.raw_tau = params.layers[layer].raw_tau;
        cfg.raw_tau_p = params.layers[layer].raw_tau_p;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w: Matrix,
    pub b: Vector,
    pub raw_tau: f64,
    pub raw_tau_p: f64,
}

/// All trainable values of a network. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
    pub w_out: Matrix,
    pub b_out: Vector,
}

pub type GradSet = ParamSet;

impl ParamSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .hidden
            .iter()
            .enumerate()
            .map(|(l, h)| LayerParams {
                w: Matrix::zeros(h.width, spec.fan_in(l)),
                b: Vector::zeros(h.width),
                raw_tau: 0.0,
                raw_tau_p: 0.0,
            })
            .collect();
        ParamSet {
            layers,
            w_out: Matrix::zeros(spec.classes, spec.last_width()),
            b_out: Vector::zeros(spec.classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    w: Matrix::zeros(p.w.rows(), p.w.cols()),
                    b: Vector::zeros(p.b.len()),
                    raw_tau: 0.0,
                    raw_tau_p: 0.0,
                })
                .collect(),
            w_out: Matrix::zeros(self.w_out.rows(), self.w_out.cols()),
            b_out: Vector::zeros(self.b_out.len()),
        }
    }

    /// Every parameter tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 2);
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("W.{l}"), p.w.as_slice()));
            out.push((format!("b.{l}"), p.b.as_slice()));
            out.push((format!("raw_tau.{l}"), std::slice::from_ref(&p.raw_tau)));
            out.push((format!("raw_tau_p.{l}"), std::slice::from_ref(&p.raw_tau_p)));
        }
        out.push(("W_out".into(), self.w_out.as_slice()));
        out.push(("b_out".into(), self.b_out.as_slice()));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 2);
        for (l, p) in self.layers.iter_mut().enumerate() {
            out.push((format!("W.{l}"), p.w.as_mut_slice()));
            out.push((format!("b.{l}"), p.b.as_mut_slice()));
            out.push((format!("raw_tau.{l}"), std::slice::from_mut(&mut p.raw_tau)));
            out.push((
                format!("raw_tau_p.{l}"),
                std::slice::from_mut(&mut p.raw_tau_p),
            ));
        }
        out.push(("W_out".into(), self.w_out.as_mut_slice()));
        out.push(("b_out".into(), self.b_out.as_mut_slice()));
        out
    }

    /// Tensor `index` in [`ParamSet::named`] order.
    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let per_layer = 4;
        if index < self.layers.len() * per_layer {
            let p = &mut self.layers[index / per_layer];
            return match index % per_layer {
                0 => p.w.as_mut_slice(),
                1 => p.b.as_mut_slice(),
                2 => std::slice::from_mut(&mut p.raw_tau),
                _ => std::slice::from_mut(&mut p.raw_tau_p),
            };
        }
        match index - self.layers.len() * per_layer {
            0 => self.w_out.as_mut_slice(),
            1 => self.b_out.as_mut_slice(),
            _ => panic!("tensor index {index} out of range"),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, s)| s.len()).sum()
    }

    /// Flat copy in [`ParamSet::named`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named()
            .into_iter()
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for ((_, dst), (_, src)) in self.named_mut().into_iter().zip(other.named()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, dst) in self.named_mut() {
            for d in dst.iter_mut() {
                *d *= factor;
            }
        }
    }

    /// Confirms tensor shapes agree with `spec`.
    pub fn check_shapes(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = ParamSet::zeros(spec);
        if self.layers.len() != expected.layers.len() {
            return Err(Error::Shape(format!(
                "{} hidden layers in parameters, spec has {}",
                self.layers.len(),
                expected.layers.len()
            )));
        }
        for (l, (got, want)) in self.layers.iter().zip(&expected.layers).enumerate() {
            if got.w.shape() != want.w.shape() || got.b.len() != want.b.len() {
                return Err(Error::Shape(format!(
                    "layer {l}: parameters are {:?}, spec needs {:?}",
                    got.w.shape(),
                    want.w.shape()
                )));
            }
        }
        if self.w_out.shape() != expected.w_out.shape() || self.b_out.len() != expected.b_out.len()
        {
            return Err(Error::Shape(format!(
                "readout: parameters are {:?}, spec needs {:?}",
                self.w_out.shape(),
                expected.w_out.shape()
            )));
        }
        Ok(())
    }
}

fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| loop {
            let v = rng.uniform(-a, a);
            if v != -a {
                break v;
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Glorot-uniform weights, zero biases, and time constants taken from
/// each layer's configuration.
pub fn init_params(spec: &NetworkSpec, rng: &mut Rng) -> ParamSet {
    let layers = spec
        .hidden
        .iter()
        .enumerate()
        .map(|(l, h)| LayerParams {
            w: glorot(rng, h.width, spec.fan_in(l)),
            b: Vector::zeros(h.width),
            raw_tau: h.cfg.raw_tau,
            raw_tau_p: h.cfg.raw_tau_p,
        })
        .collect();
    ParamSet {
        layers,
        w_out: glorot(rng, spec.classes, spec.last_width()),
        b_out: Vector::zeros(spec.classes),
    }
}

fn check_sample(spec: &NetworkSpec, sample: &[Vector]) -> Result<()> {
    if sample.len() != spec.timesteps {
        return Err(Error::Shape(format!(
            "sample has {} frames, network expects {}",
            sample.len(),
            spec.timesteps
        )));
    }
    if let Some(bad) = sample.iter().find(|f| f.len() != spec.input_width) {
        return Err(Error::Shape(format!(
            "frame of width {}, network expects {}",
            bad.len(),
            spec.input_width
        )));
    }
    Ok(())
}

/// Runs the network on one sample; `logits = (1/T)·Σ_t (W_out·s_last[t] + b_out)`.
///
/// `frozen` holds nominal traces for the relaxed twin, see [`crate::bptt`].
pub fn forward_network(
    spec: &NetworkSpec,
    params: &ParamSet,
    sample: &[Vector],
    firing: Firing,
    frozen: Option<&[LayerTrace]>,
) -> Result<(Vector, Vec<LayerTrace>)> {
    check_sample(spec, sample)?;
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(spec.hidden.len());
    for (l, p) in params.layers.iter().enumerate() {
        let cfg = spec.layer_config(params, l);
        let inputs: &[Vector] = if l == 0 { sample } else { &traces[l - 1].s };
        let trace = forward_layer(&cfg, &p.w, &p.b, inputs, firing, frozen.map(|f| &f[l]));
        traces.push(trace);
    }
    let last = traces.last().expect("validated spec has a hidden layer");
    let mut acc = Vector::zeros(spec.classes);
    for s in &last.s {
        acc = acc.add(&matvec(&params.w_out, s).add(&params.b_out));
    }
    let t = spec.timesteps as f64;
    Ok((acc.map(|z| z / t), traces))
}

/// Loss and gradients for one sample, with backward pathways chosen per layer.
pub fn sample_loss_and_grads_with(
    spec: &NetworkSpec,
    params: &ParamSet,
    sample: &[Vector],
    label: usize,
    firing: Firing,
    flags_for: impl Fn(&NeuronConfig) -> BackwardFlags,
) -> Result<(f64, GradSet)> {
    if label >= spec.classes {
        return Err(Error::Label {
            label,
            classes: spec.classes,
        });
    }
    let (logits, traces) = forward_network(spec, params, sample, firing, None)?;
    let (loss, dlogits) = softmax_xent(&logits, label);

    let mut grads = params.zeros_like();
    let t = spec.timesteps as f64;
    let dlogits_t = dlogits.map(|g| g / t);
    let last = traces.last().expect("validated spec has a hidden layer");
    for s in &last.s {
        grads.w_out.add_outer(&dlogits_t, s);
    }
    grads.b_out = dlogits;

    let ext_top = matvec_transposed(&params.w_out, &dlogits_t);
    let mut ext = vec![ext_top; spec.timesteps];
    for l in (0..params.layers.len()).rev() {
        let cfg = spec.layer_config(params, l);
        let lg = backward_layer(&cfg, &params.layers[l].w, &traces[l], &ext, flags_for(&cfg));
        let g = &mut grads.layers[l];
        g.w = lg.dw;
        g.b = lg.db;
        g.raw_tau = lg.d_raw_tau;
        g.raw_tau_p = lg.d_raw_tau_p;
        ext = lg.d_input;
    }
    Ok((loss, grads))
}

pub fn sample_loss_and_grads(
    spec: &NetworkSpec,
    params: &ParamSet,
    sample: &[Vector],
    label: usize,
    firing: Firing,
) -> Result<(f64, GradSet)> {
    sample_loss_and_grads_with(spec, params, sample, label, firing, |cfg| {
        BackwardFlags::from_config(cfg, firing)
    })
}

/// Runs `f` over `0..n`, on up to `threads` workers, returning results in index order.
pub fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(n))
                        .map(f)
                        .collect::<Vec<T>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Mean cross-entropy and mean gradient over a batch.
///
/// Per-sample work may run on several threads; the reduction is always in
/// sample order so the result does not depend on the thread count.
pub fn loss_and_grads(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &[(&[Vector], usize)],
    firing: Firing,
    threads: usize,
) -> Result<(f64, GradSet)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let per_sample = par_map(batch.len(), threads, |i| {
        sample_loss_and_grads(spec, params, batch[i].0, batch[i].1, firing)
    });
    let mut total_loss = 0.0;
    let mut total = params.zeros_like();
    for r in per_sample {
        let (loss, g) = r?;
        total_loss += loss;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    for (_, dst) in total.named_mut() {
        for d in dst.iter_mut() {
            *d /= n;
        }
    }
    Ok((total_loss / n, total))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Sgd,
    Adam,
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Algorithm::Sgd),
            "adam" => Ok(Algorithm::Adam),
            other => Err(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Option<ParamSet>,
    second: Option<ParamSet>,
}

impl OptimState {
    pub fn sgd(lr: f64) -> Self {
        OptimState {
            algorithm: Algorithm::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: None,
            second: None,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimState {
            algorithm: Algorithm::Adam,
            ..OptimState::sgd(lr)
        }
    }

    pub fn new(algorithm: Algorithm, lr: f64) -> Self {
        match algorithm {
            Algorithm::Sgd => OptimState::sgd(lr),
            Algorithm::Adam => OptimState::adam(lr),
        }
    }
}

/// Applies one update in place. Nothing is modified if any gradient entry
/// is non-finite.
pub fn optimizer_step(opt: &mut OptimState, params: &mut ParamSet, grads: &GradSet) -> Result<()> {
    for (name, g) in grads.named() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            let param = if g.len() == 1 {
                name
            } else {
                format!("{name}[{i}]")
            };
            return Err(Error::NonFiniteGradient { param });
        }
    }
    opt.step += 1;
    match opt.algorithm {
        Algorithm::Sgd => {
            for ((_, p), (_, g)) in params.named_mut().into_iter().zip(grads.named()) {
                for (p, g) in p.iter_mut().zip(g) {
                    *p -= opt.lr * g;
                }
            }
        }
        Algorithm::Adam => {
            let first = opt.first.get_or_insert_with(|| params.zeros_like());
            let second = opt.second.get_or_insert_with(|| params.zeros_like());
            let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
            let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
            let tensors = params
                .named_mut()
                .into_iter()
                .zip(grads.named())
                .zip(first.named_mut())
                .zip(second.named_mut());
            for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
                for i in 0..p.len() {
                    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
                    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
                }
            }
        }
    }
    Ok(())
}

/// Predicted class and cross-entropy of one sample, spiking forward.
pub fn predict(
    spec: &NetworkSpec,
    params: &ParamSet,
    sample: &[Vector],
    label: usize,
) -> Result<(usize, f64)> {
    if label >= spec.classes {
        return Err(Error::Label {
            label,
            classes: spec.classes,
        });
    }
    let (logits, _) = forward_network(spec, params, sample, Firing::Spiking, None)?;
    Ok((logits.argmax(), softmax_xent(&logits, label).0))
}
