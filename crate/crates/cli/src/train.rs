//! Training, evaluation and the paired ablation driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use selfspike::checkpoint::{load_checkpoint, save_checkpoint};
use selfspike::data::{epoch_batches, frame_rows, load_idx, synth_pattern, Dataset, SynthConfig};
use selfspike::gradcheck::Variant;
use selfspike::model::{
    init_params, loss_and_grads, optimizer_step, par_map, predict, NetworkSpec, OptimState,
    ParamSet,
};
use selfspike::neuron::Firing;
use selfspike::numeric::{Rng, Vector};

use crate::config::{DatasetKind, RunConfig};
use crate::error::CliError;

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy";
pub const SUMMARY_HEADER: &str = "variant,best_test_acc,final_train_acc";

/// Worker count from `SELFSPIKE_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("SELFSPIKE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Independent streams for data, initialization and shuffling, all derived
/// from the run seed.
struct RunRngs {
    data: Rng,
    init: Rng,
    shuffle: Rng,
}

impl RunRngs {
    fn new(seed: u64) -> Self {
        let mut master = Rng::new(seed);
        RunRngs {
            data: master.fork(),
            init: master.fork(),
            shuffle: master.fork(),
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Input(format!("dataset mnist-seq needs `{key}`")))
}

fn load_idx_split(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset, CliError> {
    let mut raw = load_idx(images, labels)?;
    if let Some(n) = limit {
        raw = raw.truncate(n);
    }
    Ok(frame_rows(&raw))
}

fn generate_data(cfg: &RunConfig, rng: &mut Rng) -> Result<(Dataset, Dataset), CliError> {
    match cfg.dataset {
        DatasetKind::Synth => {
            let n_train = cfg.train_samples.unwrap_or(2000);
            let n_test = cfg.test_samples.unwrap_or(500);
            let mut synth = SynthConfig::new(
                n_train + n_test,
                cfg.timesteps.unwrap_or(32),
                cfg.synth_width,
                cfg.synth_classes,
            );
            synth.late_flip = cfg.synth_late_flip;
            let all = synth_pattern(rng, &synth)?;
            Ok(all.split_at(n_train))
        }
        DatasetKind::MnistSeq => {
            let train = load_idx_split(
                required(&cfg.train_images, "train_images")?,
                required(&cfg.train_labels, "train_labels")?,
                cfg.train_samples,
            )?;
            let test = load_idx_split(
                required(&cfg.test_images, "test_images")?,
                required(&cfg.test_labels, "test_labels")?,
                cfg.test_samples,
            )?;
            if (train.input_width, train.timesteps) != (test.input_width, test.timesteps) {
                return Err(CliError::Input(format!(
                    "train images are {}x{} but test images are {}x{}",
                    train.timesteps, train.input_width, test.timesteps, test.input_width
                )));
            }
            if let Some(t) = cfg.timesteps.filter(|&t| t != train.timesteps) {
                return Err(CliError::Input(format!(
                    "timesteps = {t} but images have {} rows",
                    train.timesteps
                )));
            }
            let classes = train.classes.max(test.classes);
            let (mut train, mut test) = (train, test);
            train.classes = classes;
            test.classes = classes;
            Ok((train, test))
        }
    }
}

/// Train and test splits exactly as a training run with `cfg` sees them.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    generate_data(cfg, &mut RunRngs::new(cfg.seed).data)
}

pub fn network_spec(cfg: &RunConfig, data: &Dataset) -> Result<NetworkSpec, CliError> {
    let spec = NetworkSpec::uniform(
        data.input_width,
        &cfg.hidden,
        &cfg.neuron_config(),
        data.classes,
        data.timesteps,
    );
    spec.validate()?;
    Ok(spec)
}

/// Mean cross-entropy and accuracy of the spiking network over `data`.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParamSet,
    data: &Dataset,
    threads: usize,
) -> Result<(f64, f64), CliError> {
    if data.is_empty() {
        return Err(CliError::Input(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let results = par_map(data.len(), threads, |i| {
        predict(spec, params, &data.samples[i].frames, data.samples[i].label)
    });
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, s) in results.into_iter().zip(&data.samples) {
        let (class, l) = r?;
        loss += l;
        correct += usize::from(class == s.label);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_test_acc: f64,
    pub best_epoch: usize,
    pub final_train_acc: f64,
    pub checkpoint: PathBuf,
}

fn create_file(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| CliError::write(path, e))
}

fn write_line(file: &mut fs::File, path: &Path, line: &str) -> Result<(), CliError> {
    writeln!(file, "{line}").map_err(|e| CliError::write(path, e))
}

/// Configuration text as given, followed by any values that were set on
/// the command line.
pub fn config_echo(text: &str, overrides: &[(&str, String)]) -> String {
    let mut out = text.to_string();
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
    if !overrides.is_empty() {
        out.push_str("# command-line overrides\n");
        for (k, v) in overrides {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}

/// Runs one training job and writes `config.txt`, `metrics.csv`,
/// `timing.csv` and `best.ckpt` into `cfg.out`.
///
/// `metrics.csv` holds only seed-determined values so that repeated runs
/// produce identical bytes; wall-clock time goes to `timing.csv`.
pub fn train(cfg: &RunConfig, echo: &str, threads: usize) -> Result<TrainOutcome, CliError> {
    cfg.validate().map_err(CliError::Input)?;
    let mut rngs = RunRngs::new(cfg.seed);
    let (train_set, test_set) = generate_data(cfg, &mut rngs.data)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(CliError::Input(
            "training and test splits must both be non-empty".into(),
        ));
    }
    let spec = network_spec(cfg, &train_set)?;
    let mut params = init_params(&spec, &mut rngs.init);
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr);

    fs::create_dir_all(&cfg.out).map_err(|e| CliError::write(&cfg.out, e))?;
    let echo_path = cfg.out.join("config.txt");
    fs::write(&echo_path, echo).map_err(|e| CliError::write(&echo_path, e))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let timing_path = cfg.out.join("timing.csv");
    let checkpoint = cfg.out.join("best.ckpt");
    let mut metrics_file = create_file(&metrics_path)?;
    let mut timing_file = create_file(&timing_path)?;
    write_line(&mut metrics_file, &metrics_path, METRICS_HEADER)?;
    write_line(&mut timing_file, &timing_path, "epoch,wall_seconds")?;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        for (b, batch) in epoch_batches(train_set.len(), cfg.batch_size, &mut rngs.shuffle)
            .into_iter()
            .enumerate()
        {
            let items: Vec<(&[Vector], usize)> = batch
                .iter()
                .map(|&i| (&train_set.samples[i].frames[..], train_set.samples[i].label))
                .collect();
            let (loss, grads) = loss_and_grads(&spec, &params, &items, Firing::Spiking, threads)?;
            if !loss.is_finite() {
                return Err(CliError::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            optimizer_step(&mut opt, &mut params, &grads).map_err(|source| {
                CliError::Numerical {
                    epoch,
                    batch: b + 1,
                    source,
                }
            })?;
        }
        let (train_loss, train_acc) = evaluate(&spec, &params, &train_set, threads)?;
        let (test_loss, test_acc) = evaluate(&spec, &params, &test_set, threads)?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(CliError::NonFiniteLoss { epoch, batch: 0 });
        }
        if best.is_none_or(|(_, acc)| test_acc > acc) {
            best = Some((epoch, test_acc));
            save_checkpoint(&params, &spec, &checkpoint)?;
        }
        let wall_seconds = started.elapsed().as_secs_f64();
        write_line(
            &mut metrics_file,
            &metrics_path,
            &format!("{epoch},train,{train_loss:?},{train_acc:?}"),
        )?;
        write_line(
            &mut metrics_file,
            &metrics_path,
            &format!("{epoch},test,{test_loss:?},{test_acc:?}"),
        )?;
        write_line(
            &mut timing_file,
            &timing_path,
            &format!("{epoch},{wall_seconds:?}"),
        )?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            test_loss,
            test_acc,
            wall_seconds,
        });
    }

    let (best_epoch, best_test_acc) = best.expect("validated config has at least one epoch");
    let final_train_acc = metrics.last().expect("at least one epoch").train_acc;
    Ok(TrainOutcome {
        metrics,
        best_test_acc,
        best_epoch,
        final_train_acc,
        checkpoint,
    })
}

/// Where `eval` takes its samples from.
#[derive(Clone, Debug)]
pub enum EvalData {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    /// The test split a training run with this config would use.
    Config(PathBuf),
}

/// Accuracy of a saved checkpoint.
pub fn eval(checkpoint: &Path, data: &EvalData, threads: usize) -> Result<f64, CliError> {
    let (params, spec) = load_checkpoint(checkpoint)?;
    let test = match data {
        EvalData::Idx { images, labels } => load_idx_split(images, labels, None)?,
        EvalData::Config(path) => load_data(&RunConfig::load(path)?.0)?.1,
    };
    if test.input_width != spec.input_width || test.timesteps != spec.timesteps {
        return Err(CliError::Input(format!(
            "data frames are {} steps of width {}, checkpoint expects {} steps of width {}",
            test.timesteps, test.input_width, spec.timesteps, spec.input_width
        )));
    }
    if let Some(s) = test.samples.iter().find(|s| s.label >= spec.classes) {
        return Err(CliError::Input(format!(
            "label {} outside the checkpoint's {} classes",
            s.label, spec.classes
        )));
    }
    Ok(evaluate(&spec, &params, &test, threads)?.1)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub outcome: TrainOutcome,
}

/// Baseline, detached and kept runs with a shared seed, each in its own
/// subdirectory of `cfg.out`, plus `summary.csv`.
pub fn ablate(cfg: &RunConfig, text: &str, threads: usize) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut run = cfg.clone();
        let mut neuron = run.neuron_config();
        variant.apply(&mut neuron);
        run.enhanced = neuron.enhanced;
        run.detach_pred_spike = neuron.detach_pred_spike;
        run.out = cfg.out.join(variant.name());
        let echo = config_echo(
            text,
            &[
                ("seed", run.seed.to_string()),
                ("enhanced", run.enhanced.to_string()),
                ("detach_pred_spike", run.detach_pred_spike.to_string()),
                ("out", run.out.display().to_string()),
            ],
        );
        let outcome = train(&run, &echo, threads)?;
        rows.push(AblationRow { variant, outcome });
    }
    let path = cfg.out.join("summary.csv");
    let mut file = create_file(&path)?;
    write_line(&mut file, &path, SUMMARY_HEADER)?;
    for r in &rows {
        write_line(
            &mut file,
            &path,
            &format!(
                "{},{:?},{:?}",
                r.variant.name(),
                r.outcome.best_test_acc,
                r.outcome.final_train_acc
            ),
        )?;
    }
    Ok(rows)
}
