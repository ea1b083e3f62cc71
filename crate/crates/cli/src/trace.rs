//! Single-neuron traces from a column of input values.

use selfspike::neuron::{neuron_step, NeuronConfig, NeuronState};
use selfspike::numeric::Vector;

pub const TRACE_HEADER: &str = "t,x,I,m,s,v,m_p,err";

/// Input files shipped with the binary, by name.
pub const SCENARIOS: [(&str, &str); 4] = [
    ("case1", include_str!("../scenarios/case1.csv")),
    ("case2", include_str!("../scenarios/case2.csv")),
    ("case3", include_str!("../scenarios/case3.csv")),
    ("case4", include_str!("../scenarios/case4.csv")),
];

pub fn scenario(name: &str) -> Option<&'static str> {
    SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

/// One input value per line. An `x` header, blank lines and `#` comments
/// are skipped.
pub fn parse_inputs(text: &str) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (out.is_empty() && line == "x") {
            continue;
        }
        let x: f64 = line
            .parse()
            .map_err(|_| format!("line {}: `{line}` is not a number", n + 1))?;
        if !x.is_finite() {
            return Err(format!("line {}: non-finite input", n + 1));
        }
        out.push(x);
    }
    if out.is_empty() {
        return Err("no input values".into());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub x: f64,
    pub i: f64,
    pub m: f64,
    pub s: f64,
    pub v: f64,
    pub m_p: f64,
    pub err: f64,
}

/// Steps a single neuron through `inputs`; rows are numbered from 1.
pub fn run_trace(cfg: &NeuronConfig, inputs: &[f64]) -> Vec<TraceRow> {
    let mut state = NeuronState::zeros(cfg.kind, 1);
    inputs
        .iter()
        .enumerate()
        .map(|(t, &x)| {
            let (out, next) = neuron_step(cfg, &state, &Vector::from(&[x][..]));
            let row = TraceRow {
                t: t + 1,
                x,
                i: out.i[0],
                m: out.m[0],
                s: out.s[0],
                v: next.v[0],
                m_p: next.m_p[0],
                err: out.err[0],
            };
            state = next;
            row
        })
        .collect()
}

pub fn to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.t, r.x, r.i, r.m, r.s, r.v, r.m_p, r.err
        ));
    }
    out
}
