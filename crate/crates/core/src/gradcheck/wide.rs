//! Double-double arithmetic and a straight-line relaxed forward pass built
//! on it.
//!
//! Central differences at `h = 1e-5` in plain `f64` lose about eleven digits
//! to cancellation, which leaves gradients below `1e-7` unresolvable. The
//! relaxed loss evaluated here carries about 32 significant digits, so the
//! difference quotient is limited by truncation alone.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

use crate::model::{NetworkSpec, ParamSet};
use crate::neuron::{NeuronKind, ResetMode};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Wide {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Wide = Wide {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const EXP_TERMS: usize = 10;

/// `1/n!` for `n = 0..=EXP_TERMS`.
fn inverse_factorials() -> &'static [Wide; EXP_TERMS + 1] {
    static TABLE: OnceLock<[Wide; EXP_TERMS + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [Wide::ONE; EXP_TERMS + 1];
        for n in 1..=EXP_TERMS {
            t[n] = t[n - 1] / Wide::from(n as f64);
        }
        t
    })
}

impl Wide {
    pub const ZERO: Wide = Wide { hi: 0.0, lo: 0.0 };
    pub const ONE: Wide = Wide { hi: 1.0, lo: 0.0 };

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale_pow2(self, e: i32) -> Wide {
        let f = 2f64.powi(e);
        Wide {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn exp(self) -> Wide {
        if self.hi > 709.0 {
            return Wide {
                hi: f64::INFINITY,
                lo: 0.0,
            };
        }
        if self.hi < -745.0 {
            return Wide::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Wide::from(k)).scale_pow2(-10);
        let coeffs = inverse_factorials();
        let mut p = coeffs[EXP_TERMS];
        for c in coeffs[..EXP_TERMS].iter().rev() {
            p = *c + p * r;
        }
        for _ in 0..10 {
            p = p * p;
        }
        p.scale_pow2(k as i32)
    }

    pub fn ln(self) -> Wide {
        assert!(self.hi > 0.0, "logarithm of non-positive value");
        let mut y = Wide::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Wide::ONE;
        }
        y
    }

    pub fn sigmoid(self) -> Wide {
        Wide::ONE / (Wide::ONE + (-self).exp())
    }
}

impl From<f64> for Wide {
    fn from(hi: f64) -> Self {
        Wide { hi, lo: 0.0 }
    }
}

impl Neg for Wide {
    type Output = Wide;
    fn neg(self) -> Wide {
        Wide {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Wide {
    type Output = Wide;
    fn add(self, o: Wide) -> Wide {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Wide { hi, lo }
    }
}

impl Sub for Wide {
    type Output = Wide;
    fn sub(self, o: Wide) -> Wide {
        self + (-o)
    }
}

impl Mul for Wide {
    type Output = Wide;
    fn mul(self, o: Wide) -> Wide {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Wide { hi, lo }
    }
}

impl Div for Wide {
    type Output = Wide;
    fn div(self, o: Wide) -> Wide {
        let q1 = self.hi / o.hi;
        let r = self - o * Wide::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Wide::from(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Wide { hi, lo } + Wide::from(q3)
    }
}

/// Relaxed-mode cross-entropy of one sample, evaluated in double-double.
///
/// `values` holds every parameter tensor in [`ParamSet::named`] order.
/// `frozen[l][t]` are the nominal spikes of layer `l` at step `t`, used on
/// the paths that are cut from the gradient: the reset, CLIF's spike
/// accumulation, and the prediction error when it is detached.
///
/// `inputs` are the inputs to layer `start`, so a perturbation confined to
/// later layers can reuse the activations below it.
pub(crate) fn relaxed_loss(
    spec: &NetworkSpec,
    values: &[Vec<Wide>],
    start: usize,
    inputs: &[Vec<Wide>],
    label: usize,
    frozen: &[Vec<Vec<f64>>],
) -> Wide {
    let mut acts = inputs.to_vec();
    for (l, frozen_l) in frozen
        .iter()
        .enumerate()
        .take(spec.hidden.len())
        .skip(start)
    {
        acts = layer_outputs(spec, l, values, &acts, frozen_l);
    }
    readout_loss(spec, values, &acts, label)
}

/// Relaxed spikes of hidden layer `l` for every step.
pub(crate) fn layer_outputs(
    spec: &NetworkSpec,
    l: usize,
    values: &[Vec<Wide>],
    inputs: &[Vec<Wide>],
    frozen: &[Vec<f64>],
) -> Vec<Vec<Wide>> {
    let layer = &spec.hidden[l];
    let cfg = &layer.cfg;
    let (w, b) = (&values[4 * l], &values[4 * l + 1]);
    let inv_tau = if cfg.kind == NeuronKind::If {
        Wide::ONE
    } else {
        values[4 * l + 2][0].sigmoid()
    };
    let tau_p = if cfg.enhanced && !cfg.zero_tau_p {
        values[4 * l + 3][0].sigmoid()
    } else {
        Wide::ZERO
    };
    let (theta, k, v_reset) = (
        Wide::from(cfg.theta),
        Wide::from(cfg.surrogate_k),
        Wide::from(cfg.v_reset),
    );
    let width = layer.width;
    let fan_in = inputs[0].len();

    let mut v = vec![Wide::ZERO; width];
    let mut m_p = vec![Wide::ZERO; width];
    let mut m_c = vec![Wide::ZERO; width];
    let mut outputs = Vec::with_capacity(inputs.len());
    for (t, input) in inputs.iter().enumerate() {
        let mut s_out = Vec::with_capacity(width);
        for j in 0..width {
            let mut x = b[j];
            for (c, &u) in input.iter().enumerate() {
                x = x + w[j * fan_in + c] * u;
            }
            let current = if cfg.enhanced { x + m_p[j] } else { x };
            let m = match cfg.kind {
                NeuronKind::If => v[j] + current,
                NeuronKind::Lif | NeuronKind::Plif => {
                    (Wide::ONE - inv_tau) * v[j] + inv_tau * current
                }
                NeuronKind::Clif => (Wide::ONE - inv_tau) * v[j] + current,
            };
            let s = (k * (m - theta)).sigmoid();
            let cut = Wide::from(frozen[t][j]);
            v[j] = match (cfg.kind, cfg.reset_mode) {
                (NeuronKind::Clif, _) => {
                    m_c[j] = m_c[j] * (inv_tau * m).sigmoid() + cut;
                    m - cut * (theta + m_c[j].sigmoid())
                }
                (_, ResetMode::Hard) => (Wide::ONE - cut) * m + cut * v_reset,
                (_, ResetMode::Soft) => m - theta * cut,
            };
            if cfg.enhanced {
                let spike = if cfg.detach_pred_spike { cut } else { s };
                let err = x - spike * inv_tau;
                m_p[j] = (Wide::ONE - tau_p) * m_p[j] + tau_p * err;
            }
            s_out.push(s);
        }
        outputs.push(s_out);
    }
    outputs
}

fn readout_loss(
    spec: &NetworkSpec,
    values: &[Vec<Wide>],
    spikes: &[Vec<Wide>],
    label: usize,
) -> Wide {
    let n_layers = spec.hidden.len();
    let (w_out, b_out) = (&values[4 * n_layers], &values[4 * n_layers + 1]);
    let last = spec.last_width();
    let t_len = Wide::from(spikes.len() as f64);
    let logits: Vec<Wide> = (0..spec.classes)
        .map(|c| {
            let mut acc = Wide::ZERO;
            for s in spikes {
                let mut z = b_out[c];
                for (j, &sj) in s.iter().enumerate() {
                    z = z + w_out[c * last + j] * sj;
                }
                acc = acc + z;
            }
            acc / t_len
        })
        .collect();
    let max = Wide::from(
        logits
            .iter()
            .map(|z| z.hi)
            .fold(f64::NEG_INFINITY, f64::max),
    );
    let sum = logits
        .iter()
        .fold(Wide::ZERO, |acc, &z| acc + (z - max).exp());
    max + sum.ln() - logits[label]
}

/// Widened copy of every parameter tensor in [`ParamSet::named`] order.
pub(crate) fn widen(params: &ParamSet) -> Vec<Vec<Wide>> {
    params
        .named()
        .into_iter()
        .map(|(_, v)| v.iter().map(|&x| Wide::from(x)).collect())
        .collect()
}
