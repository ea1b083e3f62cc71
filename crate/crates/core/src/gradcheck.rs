//! Central finite differences over the relaxed twin, and the grid report
//! comparing them with the explicit backward pass.

use std::fmt;

mod wide;

use crate::bptt::{BackwardFlags, LayerTrace};
use crate::error::{Error, Result};
use crate::model::{
    forward_network, par_map, sample_loss_and_grads_with, LayerParams, NetworkSpec, ParamSet,
};
use crate::neuron::{Firing, NeuronConfig, NeuronKind, ResetMode};
use crate::numeric::{Matrix, Rng, Vector};
use wide::Wide;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences `(f(p + h) - f(p - h)) / 2h` for every coordinate.
pub fn finite_diff_flat(
    point: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut p = point.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "coordinate {i} gave {up} / {down}"
            )));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference gradient of `loss` over the scalars of `params` for
/// which `include(name)` holds; the others are left at zero.
pub fn finite_diff(
    params: &ParamSet,
    h: f64,
    include: impl Fn(&str) -> bool,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> Result<ParamSet> {
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut grads = params.zeros_like();
    let mut work = params.clone();
    for (ti, (name, values)) in params.named().into_iter().enumerate() {
        if !include(&name) {
            continue;
        }
        for (i, &orig) in values.iter().enumerate() {
            work.tensor_mut(ti)[i] = orig + h;
            let up = loss(&work);
            work.tensor_mut(ti)[i] = orig - h;
            let down = loss(&work);
            work.tensor_mut(ti)[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "{name}[{i}] gave {up} / {down}"
                )));
            }
            grads.tensor_mut(ti)[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Whether a named parameter tensor receives gradient under `spec`.
pub fn is_trainable(spec: &NetworkSpec, name: &str) -> bool {
    let layer_cfg = |prefix: &str| -> Option<&NeuronConfig> {
        name.strip_prefix(prefix)
            .and_then(|l| l.parse::<usize>().ok())
            .and_then(|l| spec.hidden.get(l))
            .map(|h| &h.cfg)
    };
    if let Some(cfg) = layer_cfg("raw_tau_p.") {
        return cfg.tau_p_is_trainable();
    }
    if let Some(cfg) = layer_cfg("raw_tau.") {
        return cfg.tau_is_trainable();
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    /// Enhanced, with the prediction-error spike cut from the graph.
    Detached,
    /// Enhanced, full graph.
    Kept,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Detached, Variant::Kept];

    pub fn apply(self, cfg: &mut NeuronConfig) {
        cfg.enhanced = self != Variant::Baseline;
        cfg.detach_pred_spike = self == Variant::Detached;
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Detached => "enhanced-detached",
            Variant::Kept => "enhanced-kept",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradcheckCase {
    pub kind: NeuronKind,
    pub reset: ResetMode,
    pub variant: Variant,
}

impl GradcheckCase {
    /// Every kind × reset × variant combination.
    pub fn grid() -> Vec<GradcheckCase> {
        let mut out = Vec::new();
        for kind in NeuronKind::ALL {
            for reset in ResetMode::ALL {
                for variant in Variant::ALL {
                    out.push(GradcheckCase {
                        kind,
                        reset,
                        variant,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradcheckOptions {
    /// Worker threads across seeds.
    pub threads: usize,
    /// Drop the `m_p -> s` gradient path from the backward pass while the
    /// oracle keeps it. Used to confirm the check can fail.
    pub drop_pred_spike_path: bool,
}

/// A random relaxed-mode problem: network, parameters, one sample.
#[derive(Clone, Debug)]
pub struct Problem {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub sample: Vec<Vector>,
    pub label: usize,
}

/// Random two-layer network (widths ≤ 16, T ≤ 6) for `case`, drawn from `seed`.
///
/// Scales are chosen so that membrane potentials sit around threshold,
/// where the surrogate slope is appreciable.
pub fn random_problem(case: GradcheckCase, seed: u64) -> Problem {
    let mut rng = Rng::new(seed);
    let input_width = 2 + rng.below(5);
    let widths = [2 + rng.below(15), 2 + rng.below(15)];
    let classes = 2 + rng.below(3);
    let timesteps = 1 + rng.below(6);

    let mut cfg = NeuronConfig::new(case.kind).reset(case.reset);
    case.variant.apply(&mut cfg);
    cfg.surrogate_k = rng.uniform(1.5, 3.0);
    cfg.v_reset = rng.uniform(-0.3, 0.3);
    let spec = NetworkSpec::uniform(input_width, &widths, &cfg, classes, timesteps);

    let mut layers = Vec::new();
    let mut fan_in = input_width;
    for &width in &widths {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let w = Matrix::from_vec(
            width,
            fan_in,
            (0..width * fan_in)
                .map(|_| rng.uniform(-scale, scale))
                .collect(),
        );
        let b: Vector = (0..width)
            .map(|_| rng.uniform(0.2, 0.9))
            .collect::<Vec<_>>()
            .into();
        let raw_tau = if case.kind == NeuronKind::Plif {
            rng.uniform(-1.0, 1.0)
        } else {
            0.0
        };
        let raw_tau_p = rng.uniform(-1.5, 1.5);
        layers.push(LayerParams {
            w,
            b,
            raw_tau,
            raw_tau_p,
        });
        fan_in = width;
    }
    let last = widths[1];
    let w_out = Matrix::from_vec(
        classes,
        last,
        (0..classes * last)
            .map(|_| signed(&mut rng, 0.5, 1.5))
            .collect(),
    );
    let b_out: Vector = (0..classes)
        .map(|_| rng.uniform(-0.5, 0.5))
        .collect::<Vec<_>>()
        .into();
    let params = ParamSet {
        layers,
        w_out,
        b_out,
    };
    let sample = (0..timesteps)
        .map(|_| {
            (0..input_width)
                .map(|_| rng.uniform(0.2, 1.0))
                .collect::<Vec<_>>()
                .into()
        })
        .collect();
    let label = rng.below(classes);
    Problem {
        spec,
        params,
        sample,
        label,
    }
}

fn signed(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    let magnitude = rng.uniform(lo, hi);
    if rng.bernoulli(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Central differences of the relaxed loss in double-double, one vector per
/// parameter tensor; untrainable tensors are left at zero.
fn wide_finite_diff(problem: &Problem, nominal: &[LayerTrace], h: f64) -> Result<Vec<Vec<f64>>> {
    let Problem {
        spec,
        params,
        sample,
        label,
    } = problem;
    let frozen: Vec<Vec<Vec<f64>>> = nominal
        .iter()
        .map(|tr| tr.s.iter().map(|s| s.as_slice().to_vec()).collect())
        .collect();
    let mut values = wide::widen(params);
    let n_layers = spec.hidden.len();
    // activations[l] feeds layer l; activations[n_layers] feeds the readout
    let mut activations: Vec<Vec<Vec<Wide>>> = vec![sample
        .iter()
        .map(|f| f.iter().map(|&x| Wide::from(x)).collect())
        .collect()];
    for l in 0..n_layers {
        let next = wide::layer_outputs(spec, l, &values, &activations[l], &frozen[l]);
        activations.push(next);
    }
    let step = Wide::from(h);
    let mut out = Vec::with_capacity(values.len());
    for (ti, (name, _)) in params.named().into_iter().enumerate() {
        let mut g = vec![0.0; values[ti].len()];
        if is_trainable(spec, &name) {
            let start = (ti / 4).min(n_layers);
            for (i, gi) in g.iter_mut().enumerate() {
                let orig = values[ti][i];
                values[ti][i] = orig + step;
                let up =
                    wide::relaxed_loss(spec, &values, start, &activations[start], *label, &frozen);
                values[ti][i] = orig - step;
                let down =
                    wide::relaxed_loss(spec, &values, start, &activations[start], *label, &frozen);
                values[ti][i] = orig;
                if !up.to_f64().is_finite() || !down.to_f64().is_finite() {
                    return Err(Error::NonFiniteLoss(format!("{name}[{i}]")));
                }
                *gi = ((up - down) / (step + step)).to_f64();
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest relative error between the explicit backward pass and finite
/// differences of the relaxed twin, over all trainable scalars.
pub fn check_problem(problem: &Problem, h: f64, drop_pred_spike_path: bool) -> Result<f64> {
    let Problem {
        spec,
        params,
        sample,
        label,
    } = problem;
    let (_, nominal) = forward_network(spec, params, sample, Firing::Relaxed, None)?;
    let (_, analytic) =
        sample_loss_and_grads_with(spec, params, sample, *label, Firing::Relaxed, |cfg| {
            let mut flags = BackwardFlags::from_config(cfg, Firing::Relaxed);
            if drop_pred_spike_path && flags.enhanced {
                flags.detach_pred_spike = true;
            }
            flags
        })?;
    let numeric = wide_finite_diff(problem, &nominal, h)?;
    let mut worst: f64 = 0.0;
    for ((name, a), n) in analytic.named().into_iter().zip(&numeric) {
        if !is_trainable(spec, &name) {
            continue;
        }
        for (&a, &n) in a.iter().zip(n) {
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub case: GradcheckCase,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl fmt::Display for GradcheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let enhanced = self.case.variant != Variant::Baseline;
        let detached = self.case.variant == Variant::Detached;
        write!(
            f,
            "{},{},{},{},{:e},{}",
            self.case.kind, self.case.reset, enhanced, detached, self.max_rel_err, self.pass
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub const HEADER: &'static str = "kind,reset,enhanced,detached,max_rel_err,pass";

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn row(
        &self,
        kind: NeuronKind,
        reset: ResetMode,
        variant: Variant,
    ) -> Option<&GradcheckRow> {
        self.rows.iter().find(|r| {
            r.case
                == GradcheckCase {
                    kind,
                    reset,
                    variant,
                }
        })
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        for row in &self.rows {
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// Runs `seeds` random problems for every case of the grid.
///
/// Failures are recorded in the report rather than returned as errors; a
/// non-finite finite-difference loss counts as an infinite error.
pub fn gradcheck_report(
    seeds: usize,
    tolerance: f64,
    options: GradcheckOptions,
) -> GradcheckReport {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let cases = GradcheckCase::grid();
    let rows = cases
        .iter()
        .map(|&case| {
            let errors = par_map(seeds, options.threads.max(1), |s| {
                let problem = random_problem(case, s as u64);
                check_problem(&problem, DEFAULT_STEP, options.drop_pred_spike_path)
                    .unwrap_or(f64::INFINITY)
            });
            let max_rel_err = errors.into_iter().fold(0.0, f64::max);
            GradcheckRow {
                case,
                max_rel_err,
                pass: max_rel_err < tolerance,
            }
        })
        .collect();
    GradcheckReport {
        seeds,
        tolerance,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let g = finite_diff_flat(&[3.0], 1e-5, |p| p[0] * p[0]).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
        let g = finite_diff_flat(&[1.0, -2.0, 0.5], 1e-5, |_| 4.2).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        assert!(finite_diff_flat(&[1.0], 0.0, |p| p[0]).is_err());
        assert!(matches!(
            finite_diff_flat(&[1.0], 1e-5, |_| f64::NAN),
            Err(Error::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_format() {
        let report = gradcheck_report(1, 1e-4, GradcheckOptions::default());
        let text = report.to_string();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(GradcheckReport::HEADER));
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), 24);
        for line in rows {
            let fields: Vec<_> = line.split(',').collect();
            assert_eq!(fields.len(), 6, "{line}");
            assert!(fields[0].parse::<NeuronKind>().is_ok());
            assert!(fields[1].parse::<ResetMode>().is_ok());
            assert!(
                fields[2].parse::<bool>().is_ok()
                    && fields[3].parse::<bool>().is_ok()
                    && fields[5].parse::<bool>().is_ok()
            );
            assert!(fields[4].parse::<f64>().is_ok());
        }
    }

    #[test]
    fn tiny_tolerance_fails_but_stays_well_formed() {
        let report = gradcheck_report(2, 1e-14, GradcheckOptions::default());
        assert!(!report.all_pass());
        assert_eq!(report.rows.len(), 24);
    }
}
