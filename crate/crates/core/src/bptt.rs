//! Layer-level forward pass with a full per-timestep cache, and the
//! hand-written reverse-time backward pass over that cache.
//!
//! Gradient conventions:
//!
//! * The reset is cut from the graph: the spike in `v = m - s·(m - v_reset)`
//!   (hard), `v = m - theta·s` (soft) and the CLIF reset and spike
//!   accumulation is a constant for differentiation.
//! * The spike inside the prediction error `x - s/tau` stays in the graph
//!   unless `detach_pred_spike` is set. This is the path
//!   `m_p[t] -> s[t] -> m[t]`.
//! * Spikes feeding the next layer and the readout are always live.
//!
//! The relaxed twin (sigmoid spikes) is an ordinary differentiable function
//! once the cut spikes are read from a frozen copy of the nominal trace.
//! Its exact derivative at the nominal point is what [`backward_layer`]
//! computes, which is what makes finite differences a valid oracle.

use crate::neuron::{step, Firing, NeuronConfig, NeuronKind, NeuronState, ResetMode};
use crate::numeric::{matvec, matvec_transposed, sigmoid, sigmoid_grad, Matrix, Vector};

/// Which gradient pathways the backward pass follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardFlags {
    pub enhanced: bool,
    pub detach_pred_spike: bool,
    pub relaxed: bool,
}

impl BackwardFlags {
    pub fn from_config(cfg: &NeuronConfig, firing: Firing) -> Self {
        BackwardFlags {
            enhanced: cfg.enhanced,
            detach_pred_spike: cfg.enhanced && cfg.detach_pred_spike,
            relaxed: firing == Firing::Relaxed,
        }
    }
}

/// Everything the backward pass needs from a layer's forward pass,
/// indexed by timestep `0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub firing: Firing,
    /// Layer input before the weights (previous layer's spikes or data).
    pub input: Vec<Vector>,
    /// Weighted input `W·input + b`.
    pub x: Vec<Vector>,
    /// Effective input current.
    pub i: Vec<Vector>,
    /// Pre-reset potential.
    pub m: Vec<Vector>,
    pub s: Vec<Vector>,
    /// Post-reset potential.
    pub v: Vec<Vector>,
    pub m_p: Vec<Vector>,
    /// CLIF only; empty for other kinds.
    pub m_c: Vec<Vector>,
    pub err: Vec<Vector>,
}

impl LayerTrace {
    pub fn timesteps(&self) -> usize {
        self.s.len()
    }

    pub fn width(&self) -> usize {
        self.s.first().map_or(0, Vector::len)
    }

    fn check_complete(&self, kind: NeuronKind) {
        let t = self.timesteps();
        assert!(t >= 1, "trace is empty");
        for (name, seq) in [
            ("input", &self.input),
            ("x", &self.x),
            ("i", &self.i),
            ("m", &self.m),
            ("v", &self.v),
            ("m_p", &self.m_p),
            ("err", &self.err),
        ] {
            assert_eq!(
                seq.len(),
                t,
                "trace field `{name}` has {} entries, expected {t}",
                seq.len()
            );
        }
        if kind == NeuronKind::Clif {
            assert_eq!(
                self.m_c.len(),
                t,
                "trace field `m_c` missing for CLIF layer"
            );
        }
    }
}

/// Gradients of one layer, plus the gradient sent upstream.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub dw: Matrix,
    pub db: Vector,
    pub d_raw_tau: f64,
    pub d_raw_tau_p: f64,
    /// `dL/dx[t]` for the weighted input.
    pub dx: Vec<Vector>,
    /// `dL/dinput[t] = Wᵀ·dx[t]`, the spike gradient for the layer below.
    pub d_input: Vec<Vector>,
    /// `dL/dm[t]`, total gradient at the pre-reset potential.
    pub d_membrane: Vec<Vector>,
    /// Neuron-timestep updates performed.
    pub work: usize,
}

/// Runs a layer over `inputs` and records its trace.
///
/// `frozen` is the nominal trace whose spikes stand in for the cut paths;
/// it only matters for relaxed runs at perturbed parameters.
pub fn forward_layer(
    cfg: &NeuronConfig,
    w: &Matrix,
    b: &Vector,
    inputs: &[Vector],
    firing: Firing,
    frozen: Option<&LayerTrace>,
) -> LayerTrace {
    assert!(
        !inputs.is_empty(),
        "forward_layer: need at least one timestep"
    );
    assert_eq!(
        w.rows(),
        b.len(),
        "forward_layer: weight rows {} vs bias length {}",
        w.rows(),
        b.len()
    );
    if let Some(f) = frozen {
        assert_eq!(f.timesteps(), inputs.len(), "frozen trace length mismatch");
    }
    let width = w.rows();
    let t_len = inputs.len();
    let mut trace = LayerTrace {
        firing,
        input: Vec::with_capacity(t_len),
        x: Vec::with_capacity(t_len),
        i: Vec::with_capacity(t_len),
        m: Vec::with_capacity(t_len),
        s: Vec::with_capacity(t_len),
        v: Vec::with_capacity(t_len),
        m_p: Vec::with_capacity(t_len),
        m_c: Vec::new(),
        err: Vec::with_capacity(t_len),
    };
    let mut state = NeuronState::zeros(cfg.kind, width);
    for (t, input) in inputs.iter().enumerate() {
        let x = matvec(w, input).add(b);
        let (out, next) = step(cfg, &state, &x, firing, frozen.map(|f| &f.s[t]));
        trace.input.push(input.clone());
        trace.x.push(x);
        trace.i.push(out.i);
        trace.m.push(out.m);
        trace.s.push(out.s);
        trace.err.push(out.err);
        trace.v.push(next.v.clone());
        trace.m_p.push(next.m_p.clone());
        if let Some(m_c) = &next.m_c {
            trace.m_c.push(m_c.clone());
        }
        state = next;
    }
    trace
}

/// Reverse-time gradient of a layer.
///
/// `ext[t]` is the loss gradient arriving at this layer's spikes at `t`
/// from everything downstream (next layer or readout).
pub fn backward_layer(
    cfg: &NeuronConfig,
    w: &Matrix,
    trace: &LayerTrace,
    ext: &[Vector],
    flags: BackwardFlags,
) -> LayerGrads {
    trace.check_complete(cfg.kind);
    let t_len = trace.timesteps();
    let width = trace.width();
    assert_eq!(
        ext.len(),
        t_len,
        "backward_layer: {} upstream gradients for {t_len} timesteps",
        ext.len()
    );
    assert_eq!(
        w.rows(),
        width,
        "backward_layer: weight rows do not match trace width"
    );

    let inv_tau = cfg.inv_tau();
    let (leak, gain) = cfg.charge_coefficients();
    let tau_p = if flags.enhanced { cfg.tau_p() } else { 0.0 };
    let keep_pred_spike = flags.enhanced && !flags.detach_pred_spike;
    let is_clif = cfg.kind == NeuronKind::Clif;
    let hard = !is_clif && cfg.reset_mode == ResetMode::Hard;
    let zeros = Vector::zeros(width);

    let mut dx = vec![Vector::zeros(width); t_len];
    let mut d_membrane = vec![Vector::zeros(width); t_len];
    let mut d_inv_tau = 0.0;
    let mut d_tau_p = 0.0;
    let mut work = 0;

    // per-neuron accumulators for dL/dm[t+1], dL/dm_p[t+1], dL/dm_c[t+1]
    let mut g_m_next = vec![0.0; width];
    let mut g_p_next = vec![0.0; width];
    let mut g_c_next = vec![0.0; width];

    for t in (0..t_len).rev() {
        let m = &trace.m[t];
        let s = &trace.s[t];
        let v_prev = if t > 0 { &trace.v[t - 1] } else { &zeros };
        let m_p_prev = if t > 0 { &trace.m_p[t - 1] } else { &zeros };
        for j in 0..width {
            let sg = cfg.surrogate_k * sigmoid_grad(cfg.surrogate_k * (m[j] - cfg.theta));

            let g_v = g_m_next[j] * leak;
            let dv_dm = if hard { 1.0 - s[j] } else { 1.0 };

            let g_p = if flags.enhanced {
                g_m_next[j] * gain + g_p_next[j] * (1.0 - tau_p)
            } else {
                0.0
            };

            let mut g_s = ext[t][j];
            if keep_pred_spike {
                g_s += g_p * (-tau_p * inv_tau);
            }
            let mut g_m = g_s * sg + g_v * dv_dm;

            if is_clif {
                let m_c = &trace.m_c[t];
                let gate_next = if t + 1 < t_len {
                    sigmoid(inv_tau * trace.m[t + 1][j])
                } else {
                    0.0
                };
                let g_c = g_v * (-s[j] * sigmoid_grad(m_c[j])) + g_c_next[j] * gate_next;
                let m_c_prev = if t > 0 { trace.m_c[t - 1][j] } else { 0.0 };
                g_m += g_c * m_c_prev * sigmoid_grad(inv_tau * m[j]) * inv_tau;
                g_c_next[j] = g_c;
            }

            let mut g_x = g_m * gain;
            if flags.enhanced {
                g_x += g_p * tau_p;
                d_tau_p += g_p * (trace.err[t][j] - m_p_prev[j]);
            }
            if cfg.kind == NeuronKind::Plif {
                // m = (1 - a)·v_prev + a·I and m_p gains -tau_p·a·s
                d_inv_tau += g_m * (trace.i[t][j] - v_prev[j]);
                if flags.enhanced {
                    d_inv_tau += g_p * (-tau_p * s[j]);
                }
            }

            dx[t][j] = g_x;
            d_membrane[t][j] = g_m;
            g_m_next[j] = g_m;
            g_p_next[j] = g_p;
            work += 1;
        }
    }

    let mut dw = Matrix::zeros(w.rows(), w.cols());
    let mut db = Vector::zeros(width);
    let mut d_input = Vec::with_capacity(t_len);
    for (dx_t, input_t) in dx.iter().zip(&trace.input) {
        dw.add_outer(dx_t, input_t);
        for (db_j, &g) in db.as_mut_slice().iter_mut().zip(dx_t.iter()) {
            *db_j += g;
        }
        d_input.push(matvec_transposed(w, dx_t));
    }

    let d_raw_tau = if cfg.tau_is_trainable() {
        d_inv_tau * cfg.inv_tau_grad()
    } else {
        0.0
    };
    let d_raw_tau_p = if flags.enhanced && cfg.tau_p_is_trainable() {
        d_tau_p * cfg.tau_p_grad()
    } else {
        0.0
    };

    LayerGrads {
        dw,
        db,
        d_raw_tau,
        d_raw_tau_p,
        dx,
        d_input,
        d_membrane,
        work,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn random_inputs(rng: &mut Rng, t: usize, width: usize) -> Vec<Vector> {
        (0..t)
            .map(|_| {
                (0..width)
                    .map(|_| rng.uniform(0.0, 1.0))
                    .collect::<Vec<_>>()
                    .into()
            })
            .collect()
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.uniform(-scale, scale))
                .collect(),
        )
    }

    #[test]
    fn zero_weights_single_step() {
        let cfg = NeuronConfig::default();
        let w = Matrix::zeros(3, 2);
        let b = Vector::zeros(3);
        let inputs = vec![Vector::filled(2, 0.5)];
        let spiking = forward_layer(&cfg, &w, &b, &inputs, Firing::Spiking, None);
        assert_eq!(spiking.s[0], Vector::zeros(3));
        let relaxed = forward_layer(&cfg, &w, &b, &inputs, Firing::Relaxed, None);
        let expected = sigmoid(-cfg.surrogate_k * cfg.theta);
        assert!(relaxed.s[0].iter().all(|&s| s == expected));
    }

    #[test]
    fn identity_layer_reproduces_hand_trace() {
        let cfg = NeuronConfig::default().enhanced(true);
        let inputs = vec![Vector::filled(1, 1.0); 3];
        let trace = forward_layer(
            &cfg,
            &Matrix::identity(1),
            &Vector::zeros(1),
            &inputs,
            Firing::Spiking,
            None,
        );
        let got: Vec<_> = (0..3)
            .map(|t| (trace.m[t][0], trace.s[t][0], trace.v[t][0], trace.m_p[t][0]))
            .collect();
        assert_eq!(
            got,
            vec![
                (0.5, 0.0, 0.5, 0.5),
                (1.0, 1.0, 0.0, 0.5),
                (0.75, 0.0, 0.75, 0.75)
            ]
        );
    }

    #[test]
    fn relaxed_agrees_with_spiking_when_saturated() {
        // inputs alternate between far above and far below threshold
        let mut cfg = NeuronConfig::new(NeuronKind::If).reset(ResetMode::Soft);
        cfg.surrogate_k = 40.0;
        let inputs: Vec<Vector> = [2.0, -3.0, 2.5, -3.5, 3.0]
            .iter()
            .map(|&x| Vector::filled(1, x))
            .collect();
        let w = Matrix::identity(1);
        let b = Vector::zeros(1);
        let spiking = forward_layer(&cfg, &w, &b, &inputs, Firing::Spiking, None);
        let relaxed = forward_layer(&cfg, &w, &b, &inputs, Firing::Relaxed, None);
        for t in 0..inputs.len() {
            assert!((spiking.m[t][0] - cfg.theta).abs() >= 10.0 / cfg.surrogate_k);
            assert!((spiking.s[t][0] - relaxed.s[t][0]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_step_base_case() {
        let cfg = NeuronConfig::default();
        let mut rng = Rng::new(4);
        let w = random_matrix(&mut rng, 3, 2, 1.0);
        let b = Vector::zeros(3);
        let inputs = random_inputs(&mut rng, 1, 2);
        let trace = forward_layer(&cfg, &w, &b, &inputs, Firing::Spiking, None);
        let ext = vec![Vector::from(vec![0.3, -0.7, 1.1])];
        let grads = backward_layer(
            &cfg,
            &w,
            &trace,
            &ext,
            BackwardFlags::from_config(&cfg, Firing::Spiking),
        );
        for (j, &e) in ext[0].iter().enumerate() {
            let sg = cfg.surrogate_k * sigmoid_grad(cfg.surrogate_k * (trace.m[0][j] - 1.0));
            let g_m = e * sg;
            assert_eq!(grads.d_membrane[0][j], g_m);
            assert_eq!(grads.dx[0][j], g_m * 0.5);
        }
    }

    #[test]
    fn detach_removes_exactly_the_spike_term() {
        let cfg = NeuronConfig::default().enhanced(true);
        let mut rng = Rng::new(8);
        let w = random_matrix(&mut rng, 4, 3, 1.5);
        let b = Vector::filled(4, 0.3);
        let inputs = random_inputs(&mut rng, 5, 3);
        let ext: Vec<Vector> = random_inputs(&mut rng, 5, 4);
        let trace = forward_layer(&cfg, &w, &b, &inputs, Firing::Relaxed, None);
        let kept = backward_layer(
            &cfg,
            &w,
            &trace,
            &ext,
            BackwardFlags::from_config(&cfg, Firing::Relaxed),
        );
        let mut flags = BackwardFlags::from_config(&cfg, Firing::Relaxed);
        flags.detach_pred_spike = true;
        let detached = backward_layer(&cfg, &w, &trace, &ext, flags);
        assert_ne!(kept.dw, detached.dw);
        // the last step has no future, so g_p = 0 there and both agree
        assert_eq!(kept.d_membrane[4], detached.d_membrane[4]);
        assert_ne!(kept.d_membrane[3], detached.d_membrane[3]);
    }

    #[test]
    fn zero_tau_p_backward_is_baseline() {
        let mut rng = Rng::new(21);
        for kind in NeuronKind::ALL {
            for mode in ResetMode::ALL {
                let base = NeuronConfig::new(kind).reset(mode);
                let mut degenerate = base.clone().enhanced(true);
                degenerate.zero_tau_p = true;
                let w = random_matrix(&mut rng, 5, 4, 1.5);
                let b = Vector::filled(5, 0.2);
                let inputs = random_inputs(&mut rng, 6, 4);
                let ext = random_inputs(&mut rng, 6, 5);
                for firing in [Firing::Spiking, Firing::Relaxed] {
                    let ta = forward_layer(&base, &w, &b, &inputs, firing, None);
                    let tb = forward_layer(&degenerate, &w, &b, &inputs, firing, None);
                    let ga = backward_layer(
                        &base,
                        &w,
                        &ta,
                        &ext,
                        BackwardFlags::from_config(&base, firing),
                    );
                    let gb = backward_layer(
                        &degenerate,
                        &w,
                        &tb,
                        &ext,
                        BackwardFlags::from_config(&degenerate, firing),
                    );
                    let bits =
                        |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    assert_eq!(bits(&ga.dw), bits(&gb.dw), "{kind} {mode} {firing:?}");
                    assert_eq!(ga.db, gb.db);
                    assert_eq!(ga.d_input, gb.d_input);
                    assert_eq!(ga.d_raw_tau.to_bits(), gb.d_raw_tau.to_bits());
                }
            }
        }
    }

    #[test]
    fn backward_work_is_linear_in_time() {
        let cfg = NeuronConfig::new(NeuronKind::Plif).enhanced(true);
        let mut rng = Rng::new(2);
        let w = random_matrix(&mut rng, 7, 3, 1.0);
        let b = Vector::zeros(7);
        for t in [1, 2, 5, 10, 40] {
            let inputs = random_inputs(&mut rng, t, 3);
            let trace = forward_layer(&cfg, &w, &b, &inputs, Firing::Spiking, None);
            let ext = vec![Vector::filled(7, 1.0); t];
            let grads = backward_layer(
                &cfg,
                &w,
                &trace,
                &ext,
                BackwardFlags::from_config(&cfg, Firing::Spiking),
            );
            assert_eq!(grads.work, 7 * t);
        }
    }

    #[test]
    #[should_panic(expected = "trace field")]
    fn incomplete_trace_is_rejected() {
        let cfg = NeuronConfig::default();
        let w = Matrix::identity(1);
        let mut trace = forward_layer(
            &cfg,
            &w,
            &Vector::zeros(1),
            &[Vector::filled(1, 1.0)],
            Firing::Spiking,
            None,
        );
        trace.v.clear();
        backward_layer(
            &cfg,
            &w,
            &trace,
            &[Vector::zeros(1)],
            BackwardFlags::from_config(&cfg, Firing::Spiking),
        );
    }
}
