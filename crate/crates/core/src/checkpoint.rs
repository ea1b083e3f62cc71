//! Versioned plain-text checkpoints.
//!
//! One `key = value` entry per line, `#` starts a comment:
//!
//! ```text
//! version = 1
//! spec.input_width = 16
//! spec.classes = 4
//! spec.timesteps = 32
//! spec.layers = 1
//! spec.layer.0 = width=64 kind=lif theta=1.0 v_reset=0.0 reset=hard k=4.0 enhanced=true detach=false zero_tau_p=false raw_tau=0.0 raw_tau_p=0.0
//! W.0 = 64x16: 0.12 -0.03 ...
//! b.0 = 64: 0.0 ...
//! raw_tau.0 = 0.0
//! raw_tau_p.0 = 0.0
//! W_out = 4x64: ...
//! b_out = 4: ...
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HiddenLayer, NetworkSpec, ParamSet};
use crate::neuron::NeuronConfig;

pub const VERSION: u32 = 1;

fn push_values(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, " {v:?}");
    }
}

fn layer_line(h: &HiddenLayer) -> String {
    let c = &h.cfg;
    format!(
        "width={} kind={} theta={:?} v_reset={:?} reset={} k={:?} enhanced={} detach={} zero_tau_p={} raw_tau={:?} raw_tau_p={:?}",
        h.width, c.kind, c.theta, c.v_reset, c.reset_mode, c.surrogate_k, c.enhanced, c.detach_pred_spike, c.zero_tau_p, c.raw_tau, c.raw_tau_p
    )
}

/// Renders a checkpoint document.
pub fn encode_checkpoint(params: &ParamSet, spec: &NetworkSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# selfspike checkpoint");
    let _ = writeln!(out, "version = {VERSION}");
    let _ = writeln!(out, "spec.input_width = {}", spec.input_width);
    let _ = writeln!(out, "spec.classes = {}", spec.classes);
    let _ = writeln!(out, "spec.timesteps = {}", spec.timesteps);
    let _ = writeln!(out, "spec.layers = {}", spec.hidden.len());
    for (l, h) in spec.hidden.iter().enumerate() {
        let _ = writeln!(out, "spec.layer.{l} = {}", layer_line(h));
    }
    for (l, p) in params.layers.iter().enumerate() {
        let _ = write!(out, "W.{l} = {}x{}:", p.w.rows(), p.w.cols());
        push_values(&mut out, p.w.as_slice());
        let _ = write!(out, "\nb.{l} = {}:", p.b.len());
        push_values(&mut out, p.b.as_slice());
        let _ = writeln!(out, "\nraw_tau.{l} = {:?}", p.raw_tau);
        let _ = writeln!(out, "raw_tau_p.{l} = {:?}", p.raw_tau_p);
    }
    let _ = write!(
        out,
        "W_out = {}x{}:",
        params.w_out.rows(),
        params.w_out.cols()
    );
    push_values(&mut out, params.w_out.as_slice());
    let _ = write!(out, "\nb_out = {}:", params.b_out.len());
    push_values(&mut out, params.b_out.as_slice());
    out.push('\n');
    out
}

pub fn save_checkpoint(params: &ParamSet, spec: &NetworkSpec, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, spec)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, NetworkSpec)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&text, path)
}

/// Loads a checkpoint and confirms its shapes agree with `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &NetworkSpec) -> Result<ParamSet> {
    let (params, spec) = load_checkpoint(path)?;
    params.check_shapes(expected)?;
    if spec.timesteps != expected.timesteps {
        return Err(Error::Shape(format!(
            "checkpoint built for {} timesteps, expected {}",
            spec.timesteps, expected.timesteps
        )));
    }
    Ok(params)
}

struct Doc<'a> {
    path: &'a Path,
    entries: HashMap<&'a str, (usize, &'a str)>,
    last_line: usize,
}

impl<'a> Doc<'a> {
    fn parse(text: &'a str, path: &'a Path) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::CheckpointParse {
                    path: path.to_path_buf(),
                    line,
                    field: trimmed.chars().take(24).collect(),
                    message: "expected `key = value`".into(),
                })?;
            let key = key.trim();
            if entries.insert(key, (line, value.trim())).is_some() {
                return Err(Error::CheckpointParse {
                    path: path.to_path_buf(),
                    line,
                    field: key.into(),
                    message: "duplicate field".into(),
                });
            }
        }
        Ok(Doc {
            path,
            entries,
            last_line,
        })
    }

    fn err(&self, line: usize, field: &str, message: impl Into<String>) -> Error {
        Error::CheckpointParse {
            path: self.path.to_path_buf(),
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    fn get(&self, field: &str) -> Result<(usize, &'a str)> {
        self.entries
            .get(field)
            .copied()
            .ok_or_else(|| self.err(self.last_line + 1, field, "missing (file truncated?)"))
    }

    fn parse_value<T: std::str::FromStr>(&self, field: &str) -> Result<T> {
        let (line, v) = self.get(field)?;
        v.parse()
            .map_err(|_| self.err(line, field, format!("cannot parse `{v}`")))
    }

    /// `dims: v v v`, checking the declared dims and the value count.
    fn array(&self, field: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let (line, v) = self.get(field)?;
        let (head, body) = v
            .split_once(':')
            .ok_or_else(|| self.err(line, field, "expected `dims: values`"))?;
        let declared: Vec<usize> = head
            .trim()
            .split('x')
            .map(|d| {
                d.trim()
                    .parse::<usize>()
                    .map_err(|_| self.err(line, field, format!("bad dimension `{d}`")))
            })
            .collect::<Result<_>>()?;
        if declared != dims {
            return Err(Error::Shape(format!(
                "{field}: checkpoint has {declared:?}, spec needs {dims:?}"
            )));
        }
        let values: Vec<f64> = body
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| self.err(line, field, format!("bad number `{t}`")))
            })
            .collect::<Result<_>>()?;
        let expected: usize = dims.iter().product();
        if values.len() != expected {
            return Err(self.err(
                line,
                field,
                format!("expected {expected} values, found {}", values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(self.err(line, field, format!("non-finite value {bad}")));
        }
        Ok(values)
    }

    fn layer(&self, l: usize) -> Result<HiddenLayer> {
        let field = format!("spec.layer.{l}");
        let (line, v) = self.get(&field)?;
        let mut kv = HashMap::new();
        for tok in v.split_whitespace() {
            let (k, val) = tok.split_once('=').ok_or_else(|| {
                self.err(line, &field, format!("expected `key=value`, got `{tok}`"))
            })?;
            kv.insert(k, val);
        }
        let take = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| self.err(line, &field, format!("missing `{k}`")))
        };
        fn conv<T: std::str::FromStr>(
            doc: &Doc,
            line: usize,
            field: &str,
            k: &str,
            v: &str,
        ) -> Result<T> {
            v.parse()
                .map_err(|_| doc.err(line, field, format!("cannot parse {k}=`{v}`")))
        }
        let cfg = NeuronConfig {
            kind: take("kind")?
                .parse()
                .map_err(|e: String| self.err(line, &field, e))?,
            raw_tau: conv(self, line, &field, "raw_tau", take("raw_tau")?)?,
            theta: conv(self, line, &field, "theta", take("theta")?)?,
            v_reset: conv(self, line, &field, "v_reset", take("v_reset")?)?,
            reset_mode: take("reset")?
                .parse()
                .map_err(|e: String| self.err(line, &field, e))?,
            surrogate_k: conv(self, line, &field, "k", take("k")?)?,
            enhanced: conv(self, line, &field, "enhanced", take("enhanced")?)?,
            raw_tau_p: conv(self, line, &field, "raw_tau_p", take("raw_tau_p")?)?,
            detach_pred_spike: conv(self, line, &field, "detach", take("detach")?)?,
            zero_tau_p: conv(self, line, &field, "zero_tau_p", take("zero_tau_p")?)?,
        };
        Ok(HiddenLayer {
            width: conv(self, line, &field, "width", take("width")?)?,
            cfg,
        })
    }
}

/// Parses a checkpoint document. Either the whole parameter set is
/// returned or an error; there is no partial result.
pub fn decode_checkpoint(text: &str, path: &Path) -> Result<(ParamSet, NetworkSpec)> {
    let doc = Doc::parse(text, path)?;
    let (_, version) = doc.get("version")?;
    if version != VERSION.to_string() {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: VERSION,
        });
    }
    let layers: usize = doc.parse_value("spec.layers")?;
    let spec = NetworkSpec {
        input_width: doc.parse_value("spec.input_width")?,
        hidden: (0..layers).map(|l| doc.layer(l)).collect::<Result<_>>()?,
        classes: doc.parse_value("spec.classes")?,
        timesteps: doc.parse_value("spec.timesteps")?,
    };
    spec.validate()?;

    let mut params = ParamSet::zeros(&spec);
    let mut fan_in = spec.input_width;
    for (l, h) in spec.hidden.iter().enumerate() {
        let p = &mut params.layers[l];
        p.w.as_mut_slice()
            .copy_from_slice(&doc.array(&format!("W.{l}"), &[h.width, fan_in])?);
        p.b.as_mut_slice()
            .copy_from_slice(&doc.array(&format!("b.{l}"), &[h.width])?);
        p.raw_tau = doc.parse_value(&format!("raw_tau.{l}"))?;
        p.raw_tau_p = doc.parse_value(&format!("raw_tau_p.{l}"))?;
        fan_in = h.width;
    }
    params
        .w_out
        .as_mut_slice()
        .copy_from_slice(&doc.array("W_out", &[spec.classes, fan_in])?);
    params
        .b_out
        .as_mut_slice()
        .copy_from_slice(&doc.array("b_out", &[spec.classes])?);
    Ok((params, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::neuron::{NeuronKind, ResetMode};
    use crate::numeric::Rng;

    fn spec() -> NetworkSpec {
        let mut cfg = NeuronConfig::new(NeuronKind::Plif)
            .enhanced(true)
            .reset(ResetMode::Soft);
        cfg.v_reset = -0.1;
        NetworkSpec::uniform(4, &[6, 3], &cfg, 2, 5)
    }

    fn params(spec: &NetworkSpec) -> ParamSet {
        let mut p = init_params(spec, &mut Rng::new(1));
        p.layers[0].raw_tau = 0.123_456_789_012_345_67;
        p.layers[1].raw_tau_p = -1e-300;
        p.b_out[1] = 1.0 / 3.0;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = spec();
        let p = params(&spec);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        save_checkpoint(&p, &spec, &path).unwrap();
        let (q, spec2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        let bits = |p: &ParamSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let spec = spec();
        let text = encode_checkpoint(&params(&spec), &spec);
        let path = Path::new("mem.ckpt");
        // cut inside the readout matrix: count mismatch on that line
        let cut = &text[..text.find("W_out").unwrap() + 20];
        match decode_checkpoint(cut, path) {
            Err(Error::CheckpointParse { field, .. }) => assert_eq!(field, "W_out"),
            other => panic!("unexpected {other:?}"),
        }
        // cut before a whole field
        let cut = &text[..text.find("b.1").unwrap()];
        assert!(matches!(
            decode_checkpoint(cut, path),
            Err(Error::CheckpointParse { .. })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let spec = spec();
        let text = encode_checkpoint(&params(&spec), &spec)
            .replace("spec.classes = 2", "spec.classes = two");
        match decode_checkpoint(&text, Path::new("x")) {
            Err(Error::CheckpointParse { line, field, .. }) => {
                assert_eq!((line, field.as_str()), (4, "spec.classes"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let spec = spec();
        let text = encode_checkpoint(&params(&spec), &spec).replace("version = 1", "version = 7");
        assert!(matches!(
            decode_checkpoint(&text, Path::new("x")),
            Err(Error::CheckpointVersion { .. })
        ));
    }

    #[test]
    fn loading_against_other_widths_fails() {
        let spec_a = spec();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&params(&spec_a), &spec_a, &path).unwrap();
        let spec_b = NetworkSpec::uniform(4, &[7, 3], &spec_a.hidden[0].cfg, 2, 5);
        assert!(matches!(
            load_checkpoint_for(&path, &spec_b),
            Err(Error::Shape(_))
        ));
        assert!(load_checkpoint_for(&path, &spec_a).is_ok());
    }
}
