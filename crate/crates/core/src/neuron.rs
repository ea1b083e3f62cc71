//! Single-timestep neuron dynamics: charge, fire, reset, and the
//! self-prediction current.
//!
//! A step runs in a fixed order: the input current `I = x + m_p[t-1]` is
//! formed (enhanced neurons only), the membrane charges to `m`, the neuron
//! fires when `m >= theta`, the membrane resets to `v`, and finally the
//! prediction current is updated from the error `x - s/tau`. The current
//! produced at step `t` is consumed at step `t + 1`.

use std::fmt;
use std::str::FromStr;

use crate::numeric::{sigmoid, sigmoid_grad, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeuronKind {
    /// Integrate-and-fire: no leak, `tau` fixed at 1.
    If,
    /// Leaky integrate-and-fire with a fixed time constant.
    Lif,
    /// LIF whose time constant is trained.
    Plif,
    /// LIF without input decay, with a complementary potential that scales
    /// the reset.
    Clif,
}

impl NeuronKind {
    pub const ALL: [NeuronKind; 4] = [
        NeuronKind::If,
        NeuronKind::Lif,
        NeuronKind::Plif,
        NeuronKind::Clif,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NeuronKind::If => "if",
            NeuronKind::Lif => "lif",
            NeuronKind::Plif => "plif",
            NeuronKind::Clif => "clif",
        }
    }
}

impl fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeuronKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "if" => Ok(NeuronKind::If),
            "lif" => Ok(NeuronKind::Lif),
            "plif" => Ok(NeuronKind::Plif),
            "clif" => Ok(NeuronKind::Clif),
            other => Err(format!(
                "unknown neuron kind `{other}` (expected if, lif, plif or clif)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResetMode {
    /// Clamp to `v_reset` after a spike.
    Hard,
    /// Subtract `theta` after a spike.
    Soft,
}

impl ResetMode {
    pub const ALL: [ResetMode; 2] = [ResetMode::Hard, ResetMode::Soft];

    pub fn name(self) -> &'static str {
        match self {
            ResetMode::Hard => "hard",
            ResetMode::Soft => "soft",
        }
    }
}

impl fmt::Display for ResetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(ResetMode::Hard),
            "soft" => Ok(ResetMode::Soft),
            other => Err(format!(
                "unknown reset mode `{other}` (expected hard or soft)"
            )),
        }
    }
}

/// How spikes are produced in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Firing {
    /// Heaviside step, binary spikes.
    Spiking,
    /// Sigmoid surrogate in place of the step, giving a differentiable twin
    /// of the network.
    Relaxed,
}

/// Per-layer neuron settings.
///
/// `raw_tau` and `raw_tau_p` are unconstrained: `1/tau = sigmoid(raw_tau)`
/// and `tau_p = sigmoid(raw_tau_p)`, so a raw value of zero means `tau = 2`
/// and `tau_p = 0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronConfig {
    pub kind: NeuronKind,
    pub raw_tau: f64,
    pub theta: f64,
    pub v_reset: f64,
    /// Ignored by CLIF, which always uses its own adaptive soft reset.
    pub reset_mode: ResetMode,
    pub surrogate_k: f64,
    pub enhanced: bool,
    pub raw_tau_p: f64,
    /// Stop the gradient from the prediction current to the spike.
    pub detach_pred_spike: bool,
    /// Force `tau_p = 0` exactly. Only useful to check that an enhanced
    /// neuron degenerates to the stock one.
    pub zero_tau_p: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            kind: NeuronKind::Lif,
            raw_tau: 0.0,
            theta: 1.0,
            v_reset: 0.0,
            reset_mode: ResetMode::Hard,
            surrogate_k: 4.0,
            enhanced: false,
            raw_tau_p: 0.0,
            detach_pred_spike: false,
            zero_tau_p: false,
        }
    }
}

impl NeuronConfig {
    pub fn new(kind: NeuronKind) -> Self {
        NeuronConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn enhanced(mut self, on: bool) -> Self {
        self.enhanced = on;
        self
    }

    pub fn reset(mut self, mode: ResetMode) -> Self {
        self.reset_mode = mode;
        self
    }

    /// Sets the raw parameter so that the time constant equals `tau` (> 1).
    pub fn with_tau(mut self, tau: f64) -> Self {
        assert!(tau > 1.0, "time constant must exceed 1, got {tau}");
        self.raw_tau = logit(1.0 / tau);
        self
    }

    /// Sets the raw parameter so that `tau_p` equals the given rate in (0, 1).
    pub fn with_tau_p(mut self, tau_p: f64) -> Self {
        assert!(
            tau_p > 0.0 && tau_p < 1.0,
            "tau_p must lie in (0, 1), got {tau_p}"
        );
        self.raw_tau_p = logit(tau_p);
        self
    }

    /// `1/tau`; exactly 1 for IF.
    pub fn inv_tau(&self) -> f64 {
        match self.kind {
            NeuronKind::If => 1.0,
            _ => sigmoid(self.raw_tau),
        }
    }

    /// `d(1/tau)/d raw_tau`.
    pub fn inv_tau_grad(&self) -> f64 {
        match self.kind {
            NeuronKind::If => 0.0,
            _ => sigmoid_grad(self.raw_tau),
        }
    }

    /// Prediction-current update rate; zero when the neuron is not enhanced.
    pub fn tau_p(&self) -> f64 {
        if !self.enhanced || self.zero_tau_p {
            0.0
        } else {
            sigmoid(self.raw_tau_p)
        }
    }

    pub fn tau_p_grad(&self) -> f64 {
        if !self.enhanced || self.zero_tau_p {
            0.0
        } else {
            sigmoid_grad(self.raw_tau_p)
        }
    }

    pub fn tau_is_trainable(&self) -> bool {
        self.kind == NeuronKind::Plif
    }

    pub fn tau_p_is_trainable(&self) -> bool {
        self.enhanced && !self.zero_tau_p
    }

    /// Coefficients `(leak, gain)` of `m = leak·v_prev + gain·I`.
    pub fn charge_coefficients(&self) -> (f64, f64) {
        let a = self.inv_tau();
        match self.kind {
            NeuronKind::If => (1.0, 1.0),
            NeuronKind::Lif | NeuronKind::Plif => (1.0 - a, a),
            NeuronKind::Clif => (1.0 - a, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.surrogate_k > 0.0 && self.surrogate_k.is_finite()) {
            return Err(format!(
                "surrogate steepness must be positive, got {}",
                self.surrogate_k
            ));
        }
        for (name, v) in [
            ("theta", self.theta),
            ("v_reset", self.v_reset),
            ("raw_tau", self.raw_tau),
            ("raw_tau_p", self.raw_tau_p),
        ] {
            if !v.is_finite() {
                return Err(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    /// Post-reset membrane potential.
    pub v: Vector,
    /// Prediction current.
    pub m_p: Vector,
    /// CLIF complementary potential.
    pub m_c: Option<Vector>,
}

impl NeuronState {
    /// All-zero initial state.
    pub fn zeros(kind: NeuronKind, width: usize) -> Self {
        NeuronState {
            v: Vector::zeros(width),
            m_p: Vector::zeros(width),
            m_c: (kind == NeuronKind::Clif).then(|| Vector::zeros(width)),
        }
    }

    pub fn width(&self) -> usize {
        self.v.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub s: Vector,
    /// Pre-reset membrane potential.
    pub m: Vector,
    /// Effective input current.
    pub i: Vector,
    /// Prediction error `x - s/tau`; zeros when not enhanced.
    pub err: Vector,
}

/// `1` where `m >= theta`, else `0`.
pub fn heaviside(m: &Vector, theta: f64) -> Vector {
    m.map(|v| if v >= theta { 1.0 } else { 0.0 })
}

/// Smooth spike `1 / (1 + e^{-k(m - theta)})`.
pub fn relaxed_spike(m: &Vector, theta: f64, k: f64) -> Vector {
    m.map(|v| sigmoid(k * (v - theta)))
}

/// Derivative of [`relaxed_spike`] with respect to `m`.
pub fn surrogate_grad(m: &Vector, theta: f64, k: f64) -> Vector {
    assert!(k > 0.0, "surrogate steepness must be positive");
    m.map(|v| k * sigmoid_grad(k * (v - theta)))
}

pub fn charge(kind: NeuronKind, v_prev: &Vector, input: &Vector, inv_tau: f64) -> Vector {
    match kind {
        NeuronKind::If => v_prev.zip_map(input, |v, i| v + i),
        NeuronKind::Lif | NeuronKind::Plif => {
            v_prev.zip_map(input, |v, i| (1.0 - inv_tau) * v + inv_tau * i)
        }
        NeuronKind::Clif => v_prev.zip_map(input, |v, i| (1.0 - inv_tau) * v + i),
    }
}

pub fn reset(m: &Vector, s: &Vector, mode: ResetMode, theta: f64, v_reset: f64) -> Vector {
    match mode {
        // (1 - s)·m + s·v_reset equals m - s·(m - v_reset) and lands exactly on
        // v_reset for a binary spike
        ResetMode::Hard => m.zip_map(s, |m, s| (1.0 - s) * m + s * v_reset),
        ResetMode::Soft => m.zip_map(s, |m, s| m - theta * s),
    }
}

/// CLIF complementary-potential update and adaptive reset.
///
/// Returns `(m_c, v)` with `m_c = m_c_prev·σ(m/tau) + s` and
/// `v = m - s·(theta + σ(m_c))`.
pub fn clif_aux_update(
    m_c_prev: &Vector,
    m: &Vector,
    s: &Vector,
    inv_tau: f64,
    theta: f64,
) -> (Vector, Vector) {
    assert!(
        m_c_prev.len() == m.len() && m.len() == s.len(),
        "clif_aux_update: length mismatch"
    );
    let gate = m.map(|v| sigmoid(inv_tau * v));
    let m_c = m_c_prev.zip_map(&gate, |c, g| c * g).add(s);
    let mut v = m.clone();
    for j in 0..v.len() {
        v[j] -= s[j] * (theta + sigmoid(m_c[j]));
    }
    (m_c, v)
}

/// `x - s·(1/tau)`.
pub fn prediction_error(x: &Vector, s: &Vector, inv_tau: f64) -> Vector {
    x.zip_map(s, |x, s| x - s * inv_tau)
}

/// Moving average `(1 - tau_p)·m_p_prev + tau_p·err`.
pub fn update_prediction(m_p_prev: &Vector, err: &Vector, tau_p: f64) -> Vector {
    assert!(
        (0.0..1.0).contains(&tau_p),
        "tau_p must lie in [0, 1), got {tau_p}"
    );
    m_p_prev.zip_map(err, |p, e| (1.0 - tau_p) * p + tau_p * e)
}

/// One spiking step of a layer of neurons.
pub fn neuron_step(
    cfg: &NeuronConfig,
    state: &NeuronState,
    x: &Vector,
) -> (StepOutput, NeuronState) {
    step(cfg, state, x, Firing::Spiking, None)
}

/// One step with a choice of firing function.
///
/// `frozen_s` supplies the spike values seen by the paths that are cut from
/// the gradient (reset, CLIF's spike accumulation, and the prediction error
/// when `detach_pred_spike` is set). When `None` the live spikes are used,
/// which is always the case outside gradient verification.
pub fn step(
    cfg: &NeuronConfig,
    state: &NeuronState,
    x: &Vector,
    firing: Firing,
    frozen_s: Option<&Vector>,
) -> (StepOutput, NeuronState) {
    let width = state.width();
    assert_eq!(
        x.len(),
        width,
        "neuron_step: input width {} against layer width {width}",
        x.len()
    );
    let inv_tau = cfg.inv_tau();

    let input = if cfg.enhanced {
        x.add(&state.m_p)
    } else {
        x.clone()
    };
    let m = charge(cfg.kind, &state.v, &input, inv_tau);
    let s = match firing {
        Firing::Spiking => heaviside(&m, cfg.theta),
        Firing::Relaxed => relaxed_spike(&m, cfg.theta, cfg.surrogate_k),
    };
    let s_cut = frozen_s.unwrap_or(&s);

    let (v, m_c) = match cfg.kind {
        NeuronKind::Clif => {
            let prev = state
                .m_c
                .as_ref()
                .expect("CLIF state carries a complementary potential");
            let (m_c, v) = clif_aux_update(prev, &m, s_cut, inv_tau, cfg.theta);
            (v, Some(m_c))
        }
        _ => (
            reset(&m, s_cut, cfg.reset_mode, cfg.theta, cfg.v_reset),
            None,
        ),
    };

    let (err, m_p) = if cfg.enhanced {
        let s_pred = if cfg.detach_pred_spike { s_cut } else { &s };
        let err = prediction_error(x, s_pred, inv_tau);
        let m_p = update_prediction(&state.m_p, &err, cfg.tau_p());
        (err, m_p)
    } else {
        (Vector::zeros(width), Vector::zeros(width))
    };

    (
        StepOutput {
            s,
            m,
            i: input,
            err,
        },
        NeuronState { v, m_p, m_c },
    )
}
