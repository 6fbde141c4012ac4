//! Drivers behind the `train`, `compare`, `sweep` and `benchmark` commands.

use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;

use super::config::RunConfig;
use super::config::SyntheticKind;
use super::sweep::{sweep_points, SweepAxis};
use crate::data::format::infer_text_field_count;
use crate::data::{
    build_vocabulary, make_synthetic_dataset, split_indices, DataFormat, Dataset, GroundTruth, LoadReport, Provenance, RawRecord,
    RecordReader, Schema, SparseInstance, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{efficiency_ratio, format_table, EvalReport};
use crate::zoo::{fit, pretrain_fm_then_init, save_model, Architecture, FitOptions, Model, ModelSpec, Trainer};

/// Train and test sets sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub name: String,
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub test: Dataset,
    /// Known for synthetic data.
    pub truth: Option<GroundTruth>,
    pub skipped: usize,
}

impl PreparedData {
    /// AUC and logloss of the true probabilities on the test set.
    pub fn bayes_report(&self) -> Option<Result<EvalReport>> {
        let truth = self.truth.as_ref()?;
        let preds: Vec<(f64, u8)> = self
            .test
            .instances()
            .iter()
            .map(|x| (crate::math::sigmoid(truth.logit_of(x, self.test.layout())), x.label()))
            .collect();
        Some(EvalReport::from_predictions("bayes", &self.name, &preds, 0.0))
    }
}

fn data_schema(cfg: &RunConfig, train: &Path) -> Result<Schema> {
    match cfg.data.format {
        DataFormat::Criteo => Ok(Schema::criteo()),
        DataFormat::Text => {
            let m = match cfg.data.num_fields {
                Some(m) => m,
                None => infer_text_field_count(train)?,
            };
            Schema::with_continuous(m, &cfg.data.continuous_fields)
        }
    }
}

fn reader(cfg: &RunConfig, path: &Path, m: usize) -> Result<impl Iterator<Item = Result<RawRecord>>> {
    let r = RecordReader::open(path, cfg.data.format, m, cfg.data.malformed)?;
    Ok(r.take(cfg.data.max_rows.unwrap_or(usize::MAX)))
}

/// Encode records, applying the malformed-line policy to encoding failures.
fn encode_all<I>(records: I, vocab: &Vocabulary, cfg: &RunConfig, mut keep: impl FnMut(usize) -> Option<bool>) -> Result<(Vec<SparseInstance>, Vec<SparseInstance>, usize)>
where
    I: Iterator<Item = Result<RawRecord>>,
{
    let (mut a, mut b, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (i, record) in records.enumerate() {
        let x = match record.and_then(|r| vocab.encode(&r)) {
            Ok(x) => x,
            Err(e @ Error::MalformedRecord { .. }) if cfg.data.malformed == crate::data::MalformedPolicy::Skip => {
                log::warn!("skipping {e}");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        match keep(i) {
            Some(true) => a.push(x),
            Some(false) => b.push(x),
            None => {}
        }
    }
    Ok((a, b, skipped))
}

/// Read or generate the datasets named by `cfg.data`.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    if let Some(s) = &cfg.data.synthetic {
        let spec = s.resolved_spec();
        let (all, truth) = make_synthetic_dataset(&spec, s.n_train + s.n_test, cfg.seed)?;
        let layout = all.layout().clone();
        let mut xs = all.instances().to_vec();
        let test = xs.split_off(s.n_train);
        return Ok(PreparedData {
            name: format!("synthetic-{}", serde_plain_kind(s.kind)),
            vocab: spec.vocabulary()?,
            train: Dataset::new(xs, layout.clone(), Provenance::Train)?,
            test: Dataset::new(test, layout, Provenance::Test)?,
            truth: Some(truth),
            skipped: 0,
        });
    }
    let train_path = cfg.data.train.as_deref().ok_or_else(|| Error::config("no training data configured"))?;
    let schema = data_schema(cfg, train_path)?;
    let m = schema.len();
    let name = train_path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());

    let (vocab, train, test, skipped) = if let Some(test_path) = &cfg.data.test {
        let vocab = match &cfg.data.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => build_vocabulary(reader(cfg, train_path, m)?, &schema, cfg.vocab)?,
        };
        let (train, _, s1) = encode_all(reader(cfg, train_path, m)?, &vocab, cfg, |_| Some(true))?;
        let test_reader = RecordReader::open(test_path, cfg.data.format, m, cfg.data.malformed)?;
        let (test, _, s2) = encode_all(test_reader, &vocab, cfg, |_| Some(true))?;
        (vocab, train, test, s1 + s2)
    } else {
        // pass 1 counts records, pass 2 builds the vocabulary from the
        // training side only, pass 3 encodes
        let mut n = 0;
        for r in reader(cfg, train_path, m)? {
            r?;
            n += 1;
        }
        let (train_idx, _) = split_indices(n, cfg.data.split, cfg.seed)?;
        let mut is_train = vec![false; n];
        train_idx.iter().for_each(|&i| is_train[i] = true);
        let vocab = match &cfg.data.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => {
                let records = reader(cfg, train_path, m)?
                    .enumerate()
                    .filter(|(i, _)| is_train[*i])
                    .map(|(_, r)| r);
                build_vocabulary(records, &schema, cfg.vocab)?
            }
        };
        let (train, test, skipped) = encode_all(reader(cfg, train_path, m)?, &vocab, cfg, |i| is_train.get(i).copied())?;
        (vocab, train, test, skipped)
    };
    let layout = vocab.layout().clone();
    info!("{name}: {} train / {} test instances, d = {}", train.len(), test.len(), layout.dim());
    Ok(PreparedData {
        name,
        train: Dataset::new(train, layout.clone(), Provenance::Train)?,
        test: Dataset::new(test, layout, Provenance::Test)?,
        vocab,
        truth: None,
        skipped,
    })
}

fn serde_plain_kind(k: SyntheticKind) -> &'static str {
    match k {
        SyntheticKind::Planted => "planted",
        SyntheticKind::Linear => "linear",
    }
}

/// Score `model` on `ds`.
pub fn evaluate(model: &Model, ds: &Dataset, dataset: &str) -> Result<EvalReport> {
    let start = Instant::now();
    let probs = model.predict_batch(ds.instances())?;
    let secs = start.elapsed().as_secs_f64();
    let pairs: Vec<(f64, u8)> = probs.into_iter().zip(ds.instances().iter().map(|x| x.label())).collect();
    EvalReport::from_predictions(model.architecture().name(), dataset, &pairs, secs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_auc: Option<f64>,
    pub test_logloss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trainer: Trainer,
    pub history: Vec<EpochRecord>,
    pub report: EvalReport,
    pub pretrain_seconds: f64,
    pub train_seconds: f64,
}

impl TrainOutcome {
    pub fn total_seconds(&self) -> f64 {
        self.pretrain_seconds + self.train_seconds
    }
}

/// Optionally pre-train, then train with per-epoch test evaluation.
pub fn train_model(spec: ModelSpec, data: &PreparedData, cfg: &RunConfig) -> Result<TrainOutcome> {
    let seed = cfg.seed;
    let arch = spec.architecture;
    let start = Instant::now();
    let pretrains = arch == Architecture::Fnn && spec.pretrain_epochs > 0;
    let mut model = if pretrains {
        pretrain_fm_then_init(&spec, &data.train, spec.pretrain_epochs, cfg.batch_size, seed)?
    } else {
        Model::new(spec, data.train.layout(), seed)?
    };
    if arch == Architecture::Fnn && !pretrains {
        log::warn!("FNN pre-training disabled; embedding stays at its random init");
    }
    let pretrain_seconds = if pretrains { start.elapsed().as_secs_f64() } else { 0.0 };
    model.set_vocab_hash(Some(data.vocab.content_hash()));
    let mut trainer = Trainer::for_model(&model, seed)?;
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let opts = FitOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
    };
    let stats = fit(&mut model, &mut trainer, &data.train, opts, |s, m| {
        let r = evaluate(m, &data.test, &data.name)?;
        info!("{} epoch {}: train loss {:.5}, test auc {:?}, logloss {:.5}", arch, s.epoch, s.train_loss, r.auc, r.logloss);
        history.push(EpochRecord {
            epoch: s.epoch,
            train_loss: s.train_loss,
            test_auc: r.auc,
            test_logloss: r.logloss,
            seconds: s.seconds,
        });
        if r.logloss < best {
            best = r.logloss;
            stale = 0;
        } else {
            stale += 1;
        }
        Ok(!(cfg.early_stopping && stale >= 2))
    })?;
    let train_seconds = stats.iter().map(|s| s.seconds).sum();
    let report = evaluate(&model, &data.test, &data.name)?;
    model.meta.final_auc = report.auc;
    model.meta.final_logloss = Some(report.logloss);
    Ok(TrainOutcome {
        model,
        trainer,
        history,
        report,
        pretrain_seconds,
        train_seconds,
    })
}

/// Run `f`, turning both errors and panics into a message.
pub fn isolate<T>(f: impl FnOnce() -> Result<T>) -> std::result::Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into())),
    }
}

fn failure_record(model: &str, dataset: &str, err: &str) -> String {
    format!("model={model} dataset={dataset} status=failed error={:?}", err)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::at_path(path, e))
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::at_path(&dir, e))?;
    write_file(&dir.join("config.toml"), &cfg.to_toml()?)?;
    Ok(dir)
}

fn history_tsv(h: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_loss\ttest_auc\ttest_logloss\n");
    for r in h {
        let auc = r.test_auc.map_or("NA".into(), |a| format!("{a:.8}"));
        let _ = writeln!(s, "{}\t{:.8}\t{auc}\t{:.8}", r.epoch, r.train_loss, r.test_logloss);
    }
    s
}

/// Files written by a run, for the caller to report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// `train`: one model, saved with its vocabulary, history and metrics.
pub fn cmd_train(cfg: &RunConfig, arch: Architecture) -> Result<(TrainOutcome, RunFiles)> {
    cfg.validate()?;
    let spec = cfg.model_spec(arch)?;
    let data = prepare_data(cfg)?;
    let out = train_model(spec, &data, cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let slug = arch.slug();
    let model_path = dir.join(format!("{slug}.model"));
    save_model(&out.model, Some(&out.trainer), &model_path)?;
    let vocab_path = dir.join("vocab.txt");
    data.vocab.save(&vocab_path)?;
    let hist = dir.join(format!("history_{slug}.tsv"));
    write_file(&hist, &history_tsv(&out.history))?;
    let metrics = dir.join("metrics.txt");
    write_file(&metrics, &format!("{}\n", out.report.to_record(false)))?;
    let timing = dir.join("timing.txt");
    let mut t = format!("model={} pretrain_seconds={:.3} train_seconds={:.3}\n", arch.name(), out.pretrain_seconds, out.train_seconds);
    for r in &out.history {
        let _ = writeln!(t, "epoch={} seconds={:.3}", r.epoch, r.seconds);
    }
    write_file(&timing, &t)?;
    let files = vec![dir.join("config.toml"), model_path, vocab_path, hist, metrics, timing];
    Ok((out, RunFiles { dir, files }))
}

/// One row of `compare`: the outcome or the isolated failure.
pub type CompareRow = (Architecture, std::result::Result<TrainOutcome, String>);

/// `compare`: every configured model on one split with one seed. Models
/// train concurrently; a failing model is reported and the rest complete.
pub fn cmd_compare(cfg: &RunConfig) -> Result<(Vec<CompareRow>, RunFiles)> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let rows: Vec<CompareRow> = cfg
        .models()
        .into_par_iter()
        .map(|arch| (arch, isolate(|| train_model(cfg.model_spec(arch)?, &data, cfg))))
        .collect();
    let dir = prepare_out_dir(cfg)?;
    let mut metrics = String::new();
    let mut timing = String::new();
    let mut reports = Vec::new();
    let mut files = vec![dir.join("config.toml")];
    for (arch, row) in &rows {
        match row {
            Ok(out) => {
                let _ = writeln!(metrics, "{}", out.report.to_record(false));
                let _ = writeln!(timing, "model={} pretrain_seconds={:.3} train_seconds={:.3}", arch.name(), out.pretrain_seconds, out.train_seconds);
                reports.push(out.report.clone());
                let hist = dir.join(format!("history_{}.tsv", arch.slug()));
                write_file(&hist, &history_tsv(&out.history))?;
                files.push(hist);
            }
            Err(e) => {
                log::error!("{arch} failed: {e}");
                let _ = writeln!(metrics, "{}", failure_record(arch.name(), &data.name, e));
            }
        }
    }
    let mut table = format_table(&reports);
    for (arch, row) in &rows {
        if let Err(e) = row {
            let _ = writeln!(table, "{} failed: {e}", arch.name());
        }
    }
    for (name, text) in [("metrics.txt", &metrics), ("compare.txt", &table), ("timing.txt", &timing)] {
        let p = dir.join(name);
        write_file(&p, text)?;
        files.push(p);
    }
    Ok((rows, RunFiles { dir, files }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub hidden_sizes: Vec<usize>,
    pub result: std::result::Result<EvalReport, String>,
}

/// Plot-ready columns: axis value, hidden sizes, AUC, logloss, status.
pub fn sweep_tsv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{}\thidden\tauc\tlogloss\tstatus\n", axis.name());
    for r in rows {
        let hidden = r.hidden_sizes.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-");
        match &r.result {
            Ok(rep) => {
                let auc = rep.auc.map_or("NA".into(), |a| format!("{a:.8}"));
                let _ = writeln!(s, "{}\t{hidden}\t{auc}\t{:.8}\tok", r.value, rep.logloss);
            }
            Err(e) => {
                let _ = writeln!(s, "{}\t{hidden}\tNA\tNA\tfailed: {}", r.value, e.replace(['\t', '\n'], " "));
            }
        }
    }
    s
}

/// `sweep`: one model per grid point of `axis`, points isolated from each other.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis) -> Result<(Vec<SweepRow>, RunFiles)> {
    cfg.validate()?;
    let base = cfg.model_spec(cfg.sweep.model)?;
    let shapes = cfg.sweep.shapes.clone().unwrap_or_default();
    let points = sweep_points(axis, &base, cfg.sweep.layers, cfg.sweep.total_neurons, &shapes)?;
    let data = prepare_data(cfg)?;
    let rows: Vec<SweepRow> = points
        .into_par_iter()
        .map(|p| SweepRow {
            value: p.value.clone(),
            hidden_sizes: p.spec.mlp.hidden_sizes.clone(),
            result: isolate(|| train_model(p.spec, &data, cfg).map(|o| o.report)),
        })
        .collect();
    let dir = prepare_out_dir(cfg)?;
    let path = dir.join(format!("sweep_{}_{}.tsv", cfg.sweep.model.slug(), axis.name()));
    write_file(&path, &sweep_tsv(axis, &rows))?;
    Ok((rows, RunFiles { dir: dir.clone(), files: vec![dir.join("config.toml"), path] }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub label: String,
    pub pretrain_seconds: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
    pub ratio: f64,
}

pub const FNN_NO_PRETRAIN: &str = "FNN(no-pretrain)";

/// `benchmark`: serial timing of every model on identical data and epochs,
/// each as a ratio to LR. LR is always measured. When FNN pre-trains, the
/// same FNN without pre-training is measured as an extra row.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<(Vec<BenchmarkRow>, RunFiles)> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let mut runs: Vec<(String, ModelSpec)> = Vec::new();
    let mut models = cfg.models();
    if !models.contains(&Architecture::Lr) {
        models.insert(0, Architecture::Lr);
    }
    for arch in models {
        let spec = cfg.model_spec(arch)?;
        if arch == Architecture::Fnn && spec.pretrain_epochs > 0 {
            let mut plain = spec.clone();
            plain.pretrain_epochs = 0;
            runs.push((arch.name().into(), spec));
            runs.push((FNN_NO_PRETRAIN.into(), plain));
        } else {
            runs.push((arch.name().into(), spec));
        }
    }
    let mut timed = Vec::new();
    for (label, spec) in runs {
        let out = train_model(spec, &data, cfg).map_err(|e| Error::InvalidConfig(format!("{label}: {e}")))?;
        timed.push((label, out.pretrain_seconds, out.train_seconds));
    }
    let lr_total = timed
        .iter()
        .find(|(l, ..)| l == Architecture::Lr.name())
        .map(|(_, p, t)| p + t)
        .expect("LR is always benchmarked");
    let rows = timed
        .into_iter()
        .map(|(label, pre, train)| {
            let total = pre + train;
            Ok(BenchmarkRow {
                ratio: efficiency_ratio(total, lr_total)?,
                label,
                pretrain_seconds: pre,
                train_seconds: train,
                total_seconds: total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = prepare_out_dir(cfg)?;
    let path = dir.join("benchmark.txt");
    write_file(&path, &format_benchmark(&rows))?;
    Ok((rows, RunFiles { dir: dir.clone(), files: vec![dir.join("config.toml"), path] }))
}

pub fn format_benchmark(rows: &[BenchmarkRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:>11}  {:>9}  {:>9}  {:>7}\n", "model", "pretrain_s", "train_s", "total_s", "ratio");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>11.3}  {:>9.3}  {:>9.3}  {:>7.2}",
            r.label, r.pretrain_seconds, r.train_seconds, r.total_seconds, r.ratio
        );
    }
    s
}

/// `eval`: score a saved model on a data file encoded with its vocabulary.
pub fn cmd_eval(model: &Model, vocab: &Vocabulary, data: &Path, format: DataFormat, policy: crate::data::MalformedPolicy) -> Result<(EvalReport, LoadReport)> {
    if let Some(h) = model.vocab_hash() {
        if h != &vocab.content_hash() {
            return Err(Error::config("vocabulary does not match the one the model was trained with"));
        }
    }
    let (ds, report) = crate::data::load_dataset(data, format, vocab, policy, Provenance::Test)?;
    let name = data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
    Ok((evaluate(model, &ds, &name)?, report))
}
