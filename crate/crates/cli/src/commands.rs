//! The subcommands, as library functions writing human-readable output to `out`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::Serialize;
use ssm_core::analysis::{
    combine_members, grad_cam_split, image_to_pgm, oracle_from_predictions, EnsembleReport, EnsembleRule, EnsembleSpec,
};
use ssm_core::data::normalize;
use ssm_core::metrics::argmax;
use ssm_core::{
    fit_with, predict, BackboneSpec, Dataset, EpochRecord, HeadSpec, MetricsReport, Model, ModelSpec, Precision,
    Predictions, Scalar, SgdState, TrainConfig, Trainer,
};

use crate::checkpoint::{self, AnyCheckpoint, State};
use crate::config::{BackboneKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::gradcheck::{run_cases, standard_cases, GradCheckReport, THRESHOLD};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
/// Caps worker threads for ensemble member evaluation (default 1).
pub const THREADS_ENV: &str = "SSM_LAB_THREADS";

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<u32>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) -> CliResult<()> {
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(p) = self.precision {
            config.precision = p;
        }
        if let Some(o) = &self.out {
            config.out_dir = o.clone();
        }
        config.validate()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report serializes")
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn emit(out: &mut dyn Write, text: std::fmt::Arguments) -> CliResult<()> {
    out.write_fmt(text).and_then(|_| out.write_all(b"\n")).map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub records: Vec<EpochRecord>,
    pub next_epoch: usize,
    pub best_accuracy: Option<f64>,
}

/// Trains from `config_path`, or continues the run saved in `resume`.
pub fn train(config_path: &Path, resume: Option<&Path>, overrides: &Overrides, out: &mut dyn Write) -> CliResult<TrainSummary> {
    let mut config = RunConfig::load(config_path)?;
    overrides.apply(&mut config)?;
    let resumed = resume.map(checkpoint::load).transpose()?;
    if let Some(ckpt) = &resumed {
        let saved = ckpt.config();
        if saved.model != config.model || saved.precision != config.precision {
            return Err(CliError::Incompatible(format!(
                "checkpoint was trained with a different [model] section or precision ({} vs {})",
                saved.precision, config.precision
            )));
        }
    }
    match resumed {
        Some(AnyCheckpoint::F32(c)) => train_typed::<f32>(config, Some(c.into_parts()), out),
        Some(AnyCheckpoint::F64(c)) => train_typed::<f64>(config, Some(c.into_parts()), out),
        None => match config.precision() {
            Precision::F32 => train_typed::<f32>(config, None, out),
            Precision::F64 => train_typed::<f64>(config, None, out),
        },
    }
}

type ResumeParts<T> = (u64, usize, Option<ssm_core::Normalization>, Model<T>, SgdState<T>);

impl<T: Scalar> checkpoint::Checkpoint<T> {
    fn into_parts(self) -> ResumeParts<T> {
        (self.seed, self.next_epoch, self.normalization, self.model, self.sgd)
    }
}

fn train_typed<T: Scalar>(mut config: RunConfig, resume: Option<ResumeParts<T>>, out: &mut dyn Write) -> CliResult<TrainSummary> {
    let (raw_train, raw_test) = config.load_datasets()?;
    let (train, test, stats) = match resume.as_ref().and_then(|r| r.2.clone()) {
        Some(stats) => (raw_train.normalized(&stats), raw_test.normalized(&stats), stats),
        None => {
            let (train, test, stats) = normalize(raw_train, Some(raw_test))?;
            (train, test.expect("test split was passed"), stats)
        }
    };
    let (input, num_classes) = config.resolve_shape(Some(&train))?;
    // the border of a pad-and-crop is a raw-zero pixel after normalization
    let fill = -stats.mean[0] / stats.std[0];
    let train_config = config.train_config(fill);

    let mut trainer = match resume {
        Some((seed, next_epoch, _, model, sgd)) => {
            config.seed = seed;
            if model.spec.input != input || model.num_classes() != num_classes {
                return Err(CliError::Incompatible(format!(
                    "checkpoint model expects input {:?} with {} classes, dataset has {:?} with {}",
                    model.spec.input,
                    model.num_classes(),
                    input,
                    num_classes
                )));
            }
            let mut t = Trainer::new(model, TrainConfig { seed, ..train_config })?;
            t.sgd = sgd;
            t.next_epoch = next_epoch;
            t
        }
        None => Trainer::new(Model::new(config.model_spec(input, num_classes), config.seed)?, train_config)?,
    };

    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let metrics_path = dir.join(METRICS_FILE);
    let kept = kept_metrics(&metrics_path, trainer.next_epoch)?;
    let mut best = kept.iter().filter_map(|r| r.eval.as_ref().map(|e| e.accuracy)).fold(None, |b: Option<f64>, a| {
        Some(b.map_or(a, |b| b.max(a)))
    });
    let mut metrics = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    for r in &kept {
        writeln!(metrics, "{}", json_line(r)).map_err(io_err(&metrics_path))?;
    }

    emit(
        out,
        format_args!(
            "training {} params on {} samples, epochs {}..{}",
            trainer.model.store.trainable_count(),
            train.len(),
            trainer.next_epoch,
            trainer.config.epochs
        ),
    )?;
    let save_every = config.train.save_every;
    let target = config.train.target_accuracy;
    let save = |t: &Trainer<T>, name: &str| {
        State {
            config: &config,
            seed: config.seed,
            next_epoch: t.next_epoch,
            normalization: Some(&stats),
            model: &t.model,
            sgd: &t.sgd,
        }
        .save(&dir.join(name))
    };
    let mut failure = None;
    let records = fit_with(&mut trainer, &train, Some(&test), |record, t| {
        let acc = record.eval.as_ref().map_or(0.0, |e| e.accuracy);
        let mut after_epoch = || -> CliResult<bool> {
            writeln!(metrics, "{}", json_line(record))
                .and_then(|_| metrics.flush())
                .map_err(io_err(&metrics_path))?;
            emit(
                out,
                format_args!(
                    "epoch {:>3}  lr {:.5}  loss {:.4}  train {}  test {}",
                    record.epoch,
                    record.lr,
                    record.train_loss,
                    percent(record.train_accuracy),
                    percent(acc)
                ),
            )?;
            if save_every > 0 && (record.epoch + 1) % save_every == 0 {
                save(t, &format!("epoch-{:03}.ckpt", record.epoch))?;
            }
            if best.is_none_or(|b| acc > b) {
                best = Some(acc);
                save(t, BEST_CHECKPOINT)?;
            }
            Ok(target.is_some_and(|goal| acc >= goal))
        };
        Ok(match after_epoch() {
            Ok(false) => ControlFlow::Continue(()),
            Ok(true) => ControlFlow::Break(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        })
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    save(&trainer, FINAL_CHECKPOINT)?;
    emit(out, format_args!("wrote {}", dir.display()))?;
    Ok(TrainSummary { out_dir: dir, records, next_epoch: trainer.next_epoch, best_accuracy: best })
}

/// Records of epochs before `next_epoch` already present in `path`.
fn kept_metrics(path: &Path, next_epoch: usize) -> CliResult<Vec<EpochRecord>> {
    if next_epoch == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Incompatible(format!("{}: unreadable metrics record: {e}", path.display())))?;
        if record.epoch < next_epoch {
            kept.push(record);
        }
    }
    Ok(kept)
}

/// Test split of `config`, normalized with the statistics saved in a checkpoint.
fn checkpoint_test_set(ckpt: &AnyCheckpoint, data_config: Option<&Path>) -> CliResult<Dataset> {
    let config = match data_config {
        Some(p) => RunConfig::load(p)?,
        None => ckpt.config().clone(),
    };
    let test = config.load_test()?;
    Ok(match ckpt.normalization() {
        Some(stats) => test.normalized(stats),
        None => test,
    })
}

fn predictions(ckpt: &AnyCheckpoint, data: &Dataset, batch: usize) -> CliResult<Predictions> {
    check_model_data(ckpt, data)?;
    Ok(match ckpt {
        AnyCheckpoint::F32(c) => predict(&c.model, data, batch)?,
        AnyCheckpoint::F64(c) => predict(&c.model, data, batch)?,
    })
}

fn model_shape(ckpt: &AnyCheckpoint) -> ([usize; 3], usize) {
    match ckpt {
        AnyCheckpoint::F32(c) => (c.model.spec.input, c.model.num_classes()),
        AnyCheckpoint::F64(c) => (c.model.spec.input, c.model.num_classes()),
    }
}

fn check_model_data(ckpt: &AnyCheckpoint, data: &Dataset) -> CliResult<()> {
    let (input, classes) = model_shape(ckpt);
    if input != data.image_dims() {
        return Err(CliError::Incompatible(format!(
            "model expects images {input:?}, dataset has {:?}",
            data.image_dims()
        )));
    }
    if data.num_classes > classes {
        return Err(CliError::Incompatible(format!(
            "model predicts {classes} classes, dataset has {}",
            data.num_classes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub oracle_accuracy: f64,
}

pub fn eval(checkpoint: &Path, data_config: Option<&Path>, out_dir: Option<&Path>, out: &mut dyn Write) -> CliResult<EvalReport> {
    let ckpt = checkpoint::load(checkpoint)?;
    let data = checkpoint_test_set(&ckpt, data_config)?;
    let p = predictions(&ckpt, &data, ckpt.config().train.eval_batch_size)?;
    let report = EvalReport { metrics: MetricsReport::from_predictions(&p), oracle_accuracy: oracle_from_predictions(&p) };

    emit(out, format_args!("samples   {}", report.metrics.samples))?;
    emit(out, format_args!("loss      {:.6}", report.metrics.loss))?;
    emit(out, format_args!("combined  {}", percent(report.metrics.accuracy)))?;
    for (i, a) in report.metrics.head_accuracies.iter().enumerate() {
        emit(out, format_args!("FC{}       {}", i + 1, percent(*a)))?;
    }
    emit(out, format_args!("oracle    {}", percent(report.oracle_accuracy)))?;
    emit(out, format_args!("{}", json_line(&report)))?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradCamRequest {
    pub image: usize,
    pub class: Option<usize>,
    pub head: Option<usize>,
}

/// Writes `input.pgm` and one `head{i}.pgm` per requested head; returns the written paths.
pub fn gradcam(
    checkpoint: &Path,
    data_config: Option<&Path>,
    request: &GradCamRequest,
    out_dir: &Path,
    out: &mut dyn Write,
) -> CliResult<Vec<PathBuf>> {
    let ckpt = checkpoint::load(checkpoint)?;
    let data = checkpoint_test_set(&ckpt, data_config)?;
    check_model_data(&ckpt, &data)?;
    let model = ckpt.to_f64();
    if !matches!(model.spec.backbone, BackboneSpec::Cnn { .. }) {
        return Err(CliError::Incompatible("grad-cam needs a convolutional backbone".into()));
    }
    if request.image >= data.len() {
        return Err(CliError::Config(format!("--image {} is out of range for {} test images", request.image, data.len())));
    }
    let h = model.num_heads();
    let heads: Vec<usize> = match request.head {
        Some(i) if i == 0 || i > h => {
            return Err(CliError::Config(format!("--head {i} is out of range 1..={h}")));
        }
        Some(i) => vec![i],
        None => (1..=h).collect(),
    };
    let class = request.class.unwrap_or(data.labels[request.image]);
    if class >= model.num_classes() {
        return Err(CliError::Config(format!("--class {class} is out of range for {} classes", model.num_classes())));
    }

    let image = ssm_core::Tensor::new(
        [vec![1], data.image_dims().to_vec()].concat(),
        data.images.outer(request.image).to_vec(),
    )?;
    let maps = heads
        .iter()
        .map(|&i| grad_cam_split(&model, &image, class, i))
        .collect::<ssm_core::Result<Vec<_>>>()?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let input_path = out_dir.join("input.pgm");
    fs::write(&input_path, image_to_pgm(&image)?).map_err(io_err(&input_path))?;
    written.push(input_path);
    for map in &maps {
        let path = out_dir.join(format!("head{}.pgm", map.head_index));
        fs::write(&path, map.to_pgm()).map_err(io_err(&path))?;
        written.push(path);
    }
    emit(
        out,
        format_args!("image {} label {} class {}: wrote {} files to {}", request.image, data.labels[request.image], class, written.len(), out_dir.display()),
    )?;
    Ok(written)
}

fn thread_cap() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

pub fn ensemble(
    checkpoints: &[PathBuf],
    rule: EnsembleRule,
    data_config: Option<&Path>,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<EnsembleReport> {
    if checkpoints.len() < 2 {
        return Err(CliError::Config(format!("ensemble needs at least 2 --checkpoint values, got {}", checkpoints.len())));
    }
    let loaded = checkpoints.iter().map(|p| checkpoint::load(p)).collect::<CliResult<Vec<_>>>()?;
    for (path, c) in checkpoints.iter().zip(&loaded).skip(1) {
        if c.normalization() != loaded[0].normalization() {
            return Err(CliError::Incompatible(format!(
                "{} was trained with different input normalization than {}",
                path.display(),
                checkpoints[0].display()
            )));
        }
    }
    let spec = EnsembleSpec { members: loaded.iter().map(AnyCheckpoint::to_f64).collect::<Vec<Model<f64>>>(), rule };
    spec.validate()?;
    let data = checkpoint_test_set(&loaded[0], data_config)?;
    let batch = loaded[0].config().train.eval_batch_size;

    // members are independent; evaluate up to `thread_cap()` at a time
    let mut preds: Vec<Option<Predictions>> = vec![None; loaded.len()];
    let indices: Vec<usize> = (0..loaded.len()).collect();
    for group in indices.chunks(thread_cap()) {
        let results: Vec<CliResult<Predictions>> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|&i| {
                    let (ckpt, data) = (&loaded[i], &data);
                    s.spawn(move || predictions(ckpt, data, batch))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("member evaluation panicked")).collect()
        });
        for (&i, r) in group.iter().zip(results) {
            preds[i] = Some(r?);
        }
    }
    let preds: Vec<Predictions> = preds.into_iter().map(|p| p.expect("every member evaluated")).collect();
    let scores = combine_members(&preds, rule);
    let k = preds[0].num_classes;
    let correct = (0..data.len()).filter(|&i| argmax(&scores[i * k..(i + 1) * k]) == data.labels[i]).count();
    let report = EnsembleReport {
        rule,
        samples: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        members: preds.iter().map(MetricsReport::from_predictions).collect(),
    };

    for (path, m) in checkpoints.iter().zip(&report.members) {
        emit(out, format_args!("member    {}  {}", percent(m.accuracy), path.display()))?;
    }
    emit(out, format_args!("ensemble  {}  ({})", percent(report.accuracy), json_line(&rule).trim_matches('"')))?;
    emit(out, format_args!("{}", json_line(&report)))?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join("ensemble.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamTable {
    pub feature_width: usize,
    pub num_classes: usize,
    pub num_heads: usize,
    pub backbone: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub fc3: usize,
    pub ssm: usize,
}

impl ParamTable {
    /// Classifier parameters beyond a single full-width linear layer.
    pub fn delta(&self, classifier: usize) -> i64 {
        classifier as i64 - self.fc1 as i64
    }
}

pub fn param_table(config: &RunConfig) -> CliResult<ParamTable> {
    let needs_data = config.model.input.is_none() || config.model.num_classes.is_none();
    let train = if needs_data { Some(config.load_datasets()?.0) } else { None };
    let (input, num_classes) = config.resolve_shape(train.as_ref())?;
    let spec = config.model_spec(input, num_classes);
    let c = spec.backbone.feature_width();
    let fc = |count| HeadSpec::ParallelFc { count }.param_count(c, num_classes);
    let ssm = HeadSpec::Ssm { num_heads: config.model.num_heads, bn_relu_on_last: config.model.bn_relu_on_last };
    Ok(ParamTable {
        feature_width: c,
        num_classes,
        num_heads: config.model.num_heads,
        backbone: spec.backbone.param_count(input),
        fc1: fc(1)?,
        fc2: fc(2)?,
        fc3: fc(3)?,
        ssm: ssm.param_count(c, num_classes)?,
    })
}

pub fn params(config_path: &Path, out: &mut dyn Write) -> CliResult<ParamTable> {
    let config = RunConfig::load(config_path)?;
    let t = param_table(&config)?;
    emit(out, format_args!("feature width {}, classes {}, heads {}", t.feature_width, t.num_classes, t.num_heads))?;
    emit(out, format_args!("{:<10}{:>14}{:>14}{:>14}", "part", "params", "total", "delta"))?;
    emit(out, format_args!("{:<10}{:>14}", "backbone", t.backbone))?;
    for (name, n) in [("1FC", t.fc1), ("2FC", t.fc2), ("3FC", t.fc3), ("SSM", t.ssm)] {
        emit(out, format_args!("{:<10}{:>14}{:>14}{:>+14}", name, n, t.backbone + n, t.delta(n)))?;
    }
    emit(out, format_args!("{}", json_line(&t)))?;
    Ok(t)
}

/// Model used by `gradcheck`: the configured architecture at a small spatial size.
pub fn gradcheck_spec(config: &RunConfig) -> ModelSpec {
    let channels = config.model.input.map_or(1, |i| i[0]);
    let classes = config.model.num_classes.unwrap_or(10);
    let input = match config.model.backbone {
        BackboneKind::Cnn => {
            let side = (1usize << (config.model.widths.len() - 1)).max(8);
            [channels, side, side]
        }
        BackboneKind::Mlp => config.model.input.unwrap_or([1, 6, 6]),
    };
    config.model_spec(input, classes)
}

pub fn gradcheck(config_path: &Path, out: &mut dyn Write) -> CliResult<GradCheckReport> {
    let config = RunConfig::load(config_path)?;
    let spec = gradcheck_spec(&config);
    let report = run_cases(&standard_cases(spec, config.seed))?;
    for c in &report.cases {
        emit(
            out,
            format_args!("{:<18} max rel err {:.3e}  {}", c.name, c.max_rel_error, if c.passed { "ok" } else { "FAIL" }),
        )?;
    }
    emit(out, format_args!("{}", json_line(&report)))?;
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::CheckFailed(format!("max relative error {:.3e} exceeds {THRESHOLD:e}", report.worst())))
    }
}
