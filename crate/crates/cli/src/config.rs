//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment and blank lines are
//! skipped. Every key has a default except the IDX paths, which
//! `dataset = mnist-seq` requires.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use selfspike::model::Algorithm;
use selfspike::neuron::{NeuronConfig, NeuronKind, ResetMode};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    MnistSeq,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synth" => Ok(DatasetKind::Synth),
            "mnist-seq" => Ok(DatasetKind::MnistSeq),
            other => Err(format!(
                "unknown dataset `{other}` (expected synth or mnist-seq)"
            )),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Synth => "synth",
            DatasetKind::MnistSeq => "mnist-seq",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Training samples; for IDX data the leading subset of the file.
    /// `None` means 2000 for synth and the whole file for IDX.
    pub train_samples: Option<usize>,
    /// Test samples; `None` means 500 for synth and the whole file for IDX.
    pub test_samples: Option<usize>,
    /// Timestep override. Synthetic data only; IDX images always give one
    /// step per row.
    pub timesteps: Option<usize>,
    pub synth_width: usize,
    pub synth_classes: usize,
    pub synth_late_flip: f64,
    pub hidden: Vec<usize>,
    pub kind: NeuronKind,
    pub enhanced: bool,
    pub detach_pred_spike: bool,
    pub zero_tau_p: bool,
    pub reset_mode: ResetMode,
    pub surrogate_k: f64,
    pub theta: f64,
    pub v_reset: f64,
    pub tau: f64,
    pub tau_p: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Algorithm,
    pub lr: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetKind::Synth,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_samples: None,
            test_samples: None,
            timesteps: None,
            synth_width: 16,
            synth_classes: 4,
            synth_late_flip: 0.1,
            hidden: vec![64],
            kind: NeuronKind::Lif,
            enhanced: false,
            detach_pred_spike: false,
            zero_tau_p: false,
            reset_mode: ResetMode::Hard,
            surrogate_k: 4.0,
            theta: 1.0,
            v_reset: 0.0,
            tau: 2.0,
            tau_p: 0.5,
            epochs: 10,
            batch_size: 32,
            optimizer: Algorithm::Adam,
            lr: 0.005,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("bad value `{value}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!(
            "bad value `{value}` for `{key}`: expected true or false"
        )),
    }
}

impl RunConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", n + 1))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = RunConfig::parse(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Ok((cfg, text))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let path = || Some(PathBuf::from(value));
        match key {
            "dataset" => self.dataset = parse_value(key, value)?,
            "train_images" => self.train_images = path(),
            "train_labels" => self.train_labels = path(),
            "test_images" => self.test_images = path(),
            "test_labels" => self.test_labels = path(),
            "train_samples" => self.train_samples = Some(parse_value(key, value)?),
            "test_samples" => self.test_samples = Some(parse_value(key, value)?),
            "timesteps" => self.timesteps = Some(parse_value(key, value)?),
            "width" => self.synth_width = parse_value(key, value)?,
            "classes" => self.synth_classes = parse_value(key, value)?,
            "late_flip" => self.synth_late_flip = parse_value(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|w| parse_value::<usize>(key, w.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "kind" => self.kind = parse_value(key, value)?,
            "enhanced" => self.enhanced = parse_bool(key, value)?,
            "detach_pred_spike" => self.detach_pred_spike = parse_bool(key, value)?,
            "zero_tau_p" => self.zero_tau_p = parse_bool(key, value)?,
            "reset_mode" => self.reset_mode = parse_value(key, value)?,
            "surrogate_k" => self.surrogate_k = parse_value(key, value)?,
            "theta" => self.theta = parse_value(key, value)?,
            "v_reset" => self.v_reset = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "tau_p" => self.tau_p = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "optimizer" => self.optimizer = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("`hidden` needs at least one positive width".into());
        }
        if self.epochs == 0 {
            return Err("`epochs` must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("`batch_size` must be at least 1".into());
        }
        if !(self.tau > 1.0) {
            return Err(format!("`tau` must exceed 1, got {}", self.tau));
        }
        if !(self.tau_p > 0.0 && self.tau_p < 1.0) {
            return Err(format!("`tau_p` must lie in (0, 1), got {}", self.tau_p));
        }
        if !(self.lr > 0.0) {
            return Err(format!("`lr` must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.synth_late_flip) {
            return Err(format!(
                "`late_flip` must lie in [0, 1], got {}",
                self.synth_late_flip
            ));
        }
        if self.timesteps == Some(0) {
            return Err("`timesteps` must be at least 1".into());
        }
        self.neuron_config().validate()
    }

    /// Neuron settings shared by every hidden layer.
    pub fn neuron_config(&self) -> NeuronConfig {
        let mut cfg = NeuronConfig::new(self.kind)
            .enhanced(self.enhanced)
            .reset(self.reset_mode);
        if self.tau > 1.0 {
            cfg = cfg.with_tau(self.tau);
        }
        if self.tau_p > 0.0 && self.tau_p < 1.0 {
            cfg = cfg.with_tau_p(self.tau_p);
        }
        cfg.theta = self.theta;
        cfg.v_reset = self.v_reset;
        cfg.surrogate_k = self.surrogate_k;
        cfg.detach_pred_spike = self.detach_pred_spike;
        cfg.zero_tau_p = self.zero_tau_p;
        cfg
    }
}
