use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deepfm_core::data::format::{infer_text_field_count, write_text_dataset};
use deepfm_core::data::{build_vocabulary, ContinuousTransform, make_synthetic_dataset, DataFormat, MalformedPolicy, RecordReader, Schema, VocabConfig, Vocabulary};
use deepfm_core::harness::{
    cmd_benchmark, cmd_compare, cmd_eval, cmd_sweep, cmd_train, format_benchmark, RunConfig, RunFiles, SweepAxis, SyntheticKind,
    SyntheticSource,
};
use deepfm_core::math::Activation;
use deepfm_core::metrics::format_table;
use deepfm_core::zoo::{load_model, Architecture};

#[derive(Parser)]
#[command(name = "deepfm", version, about = "Train and compare sparse CTR models")]
struct Cli {
    /// More logging (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and save it with its vocabulary and metric history.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Model to train; may be omitted when the config lists exactly one.
        #[arg(long)]
        model: Option<Architecture>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a saved model on a data file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "text")]
        format: DataFormat,
        #[arg(long)]
        skip_malformed: bool,
    },
    /// Train every configured model on the same split and tabulate AUC and Logloss.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: u64,
    },
    /// Train one model per value of a hyper-parameter axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: u64,
        /// activation, dropout, neurons, layers or shape
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Model whose tower is swept (default DeepFM).
        #[arg(long = "sweep-model")]
        sweep_model: Option<Architecture>,
        /// Hidden layers for the shape axis.
        #[arg(long)]
        layers: Option<usize>,
        /// Neuron budget for the shape axis.
        #[arg(long)]
        total_neurons: Option<usize>,
    },
    /// Time every model on identical data and epochs, relative to LR.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a planted-interaction dataset in text format.
    MakeSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 220_000)]
        n: usize,
        #[arg(long, default_value_t = 2017)]
        seed: u64,
        #[arg(long, default_value = "planted", value_parser = parse_kind)]
        kind: SyntheticKind,
        /// Also save the generator's vocabulary here.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Build a vocabulary file from training data.
    BuildVocab {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "text")]
        format: DataFormat,
        #[arg(long)]
        num_fields: Option<usize>,
        /// Text-format fields holding numbers, comma separated.
        #[arg(long, value_delimiter = ',')]
        continuous: Vec<usize>,
        #[arg(long)]
        min_count: Option<u64>,
        #[arg(long)]
        max_rows: Option<usize>,
    },
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    match s {
        "planted" => Ok(SyntheticKind::Planted),
        "linear" => Ok(SyntheticKind::Linear),
        other => Err(format!("unknown synthetic kind `{other}` (planted or linear)")),
    }
}

/// Flags shared by the training verbs. Each one overrides the config file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    format: Option<DataFormat>,
    /// Generate data instead of reading it.
    #[arg(long, value_parser = parse_kind)]
    synthetic: Option<SyntheticKind>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    max_rows: Option<usize>,
    #[arg(long)]
    skip_malformed: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated model names.
    #[arg(long, value_delimiter = ',')]
    models: Vec<Architecture>,
    #[arg(long)]
    early_stopping: bool,
    /// Hidden sizes for every deep model, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Latent dimension.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    dropout_keep: Option<f64>,
    /// Also drop out the embedding layer feeding the tower.
    #[arg(long)]
    dropout_on_embedding: bool,
    /// Pass the tower output through its own sigmoid before the final one.
    #[arg(long)]
    literal_dnn_sigmoid: bool,
    /// Drop the global bias terms.
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Rarer tokens map to the field's out-of-vocabulary index.
    #[arg(long)]
    min_count: Option<u64>,
    /// Continuous feature transform: identity, log1p or discretize.
    #[arg(long)]
    transform: Option<ContinuousTransform>,
}

impl RunArgs {
    fn config(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.train {
            cfg.data.train = Some(p.clone());
            cfg.data.synthetic = None;
        }
        if let Some(p) = &self.test {
            cfg.data.test = Some(p.clone());
        }
        if let Some(f) = self.format {
            cfg.data.format = f;
        }
        if let Some(kind) = self.synthetic {
            cfg.data.synthetic.get_or_insert_with(SyntheticSource::default).kind = kind;
        }
        if self.n_train.is_some() || self.n_test.is_some() {
            let Some(s) = cfg.data.synthetic.as_mut() else {
                bail!("--n-train/--n-test need synthetic data");
            };
            s.n_train = self.n_train.unwrap_or(s.n_train);
            s.n_test = self.n_test.unwrap_or(s.n_test);
        }
        if let Some(v) = self.split {
            cfg.data.split = v;
        }
        if let Some(v) = self.max_rows {
            cfg.data.max_rows = Some(v);
        }
        if self.skip_malformed {
            cfg.data.malformed = MalformedPolicy::Skip;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if !self.models.is_empty() {
            cfg.models = self.models.clone();
        }
        if self.early_stopping {
            cfg.early_stopping = true;
        }
        if !self.hidden.is_empty() {
            cfg.defaults.hidden_sizes = Some(self.hidden.clone());
        }
        let d = &mut cfg.defaults;
        if let Some(v) = self.learning_rate {
            d.learning_rate = Some(v);
        }
        if let Some(v) = self.k {
            d.k = Some(v);
        }
        if let Some(v) = self.activation {
            d.activation = Some(v);
        }
        if let Some(v) = self.dropout_keep {
            d.dropout_keep = Some(v);
        }
        if self.dropout_on_embedding {
            d.dropout_on_embedding = Some(true);
        }
        if self.literal_dnn_sigmoid {
            d.literal_sigmoid_head = Some(true);
        }
        if self.no_bias {
            d.use_bias = Some(false);
        }
        if let Some(v) = self.pretrain_epochs {
            d.pretrain_epochs = Some(v);
        }
        if let Some(v) = self.min_count {
            cfg.vocab.min_count = v;
        }
        if let Some(v) = self.transform {
            cfg.vocab.transform = v;
        }
        Ok(cfg)
    }
}

fn report_files(files: &RunFiles) {
    for f in &files.files {
        eprintln!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, model, seed } => {
            let cfg = run.config(seed)?;
            let arch = match (model, cfg.models.as_slice()) {
                (Some(a), _) => a,
                (None, [a]) => *a,
                (None, _) => bail!("pass --model (or list exactly one model in the config)"),
            };
            let (out, files) = cmd_train(&cfg, arch)?;
            for h in &out.history {
                let auc = h.test_auc.map_or("NA".into(), |a| format!("{a:.5}"));
                println!("epoch {:>3}  train_loss {:.5}  test_auc {auc}  test_logloss {:.5}", h.epoch, h.train_loss, h.test_logloss);
            }
            println!("{}", out.report.to_record(true));
            report_files(&files);
        }
        Command::Eval { model, vocab, data, format, skip_malformed } => {
            let m = load_model(&model).with_context(|| format!("loading {}", model.display()))?;
            let v = Vocabulary::load(&vocab).with_context(|| format!("loading {}", vocab.display()))?;
            let policy = if skip_malformed { MalformedPolicy::Skip } else { MalformedPolicy::Abort };
            let (report, load) = cmd_eval(&m, &v, &data, format, policy)?;
            if load.skipped > 0 {
                eprintln!("skipped {} malformed lines", load.skipped);
            }
            println!("{}", report.to_record(true));
        }
        Command::Compare { run, seed } => {
            let cfg = run.config(Some(seed))?;
            let (rows, files) = cmd_compare(&cfg)?;
            let reports: Vec<_> = rows.iter().filter_map(|(_, r)| r.as_ref().ok().map(|o| o.report.clone())).collect();
            print!("{}", format_table(&reports));
            let mut failed = 0;
            for (arch, r) in &rows {
                if let Err(e) = r {
                    eprintln!("{arch} failed: {e}");
                    failed += 1;
                }
            }
            report_files(&files);
            if failed > 0 {
                bail!("{failed} of {} models failed", rows.len());
            }
        }
        Command::Sweep { run, seed, axis, sweep_model, layers, total_neurons } => {
            let mut cfg = run.config(Some(seed))?;
            if let Some(m) = sweep_model {
                cfg.sweep.model = m;
            }
            if let Some(l) = layers {
                cfg.sweep.layers = l;
            }
            if let Some(t) = total_neurons {
                cfg.sweep.total_neurons = t;
            }
            let Some(axis) = axis.or(cfg.sweep.axis) else {
                bail!("pass --axis or set sweep.axis in the config");
            };
            cfg.sweep.axis = Some(axis);
            let (rows, files) = cmd_sweep(&cfg, axis)?;
            print!("{}", deepfm_core::harness::sweep_tsv(axis, &rows));
            report_files(&files);
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            if failed > 0 {
                bail!("{failed} of {} grid points failed", rows.len());
            }
        }
        Command::Benchmark { run, seed } => {
            let cfg = run.config(seed)?;
            let (rows, files) = cmd_benchmark(&cfg)?;
            print!("{}", format_benchmark(&rows));
            report_files(&files);
        }
        Command::MakeSynth { out, n, seed, kind, vocab_out } => {
            let spec = kind.spec();
            let (ds, _) = make_synthetic_dataset(&spec, n, seed)?;
            let vocab = spec.vocabulary()?;
            write_text_dataset(&out, &ds, &vocab)?;
            eprintln!("wrote {} instances to {}", ds.len(), out.display());
            if let Some(p) = vocab_out {
                vocab.save(&p)?;
                eprintln!("wrote {}", p.display());
            }
        }
        Command::BuildVocab { train, out, format, num_fields, continuous, min_count, max_rows } => {
            let schema = match format {
                DataFormat::Criteo => Schema::criteo(),
                DataFormat::Text => {
                    let m = match num_fields {
                        Some(m) => m,
                        None => infer_text_field_count(&train)?,
                    };
                    Schema::with_continuous(m, &continuous)?
                }
            };
            let mut config = VocabConfig::default();
            if let Some(c) = min_count {
                config.min_count = c;
            }
            let vocab = build_vocab(&train, format, &schema, config, max_rows)?;
            vocab.save(&out)?;
            eprintln!("wrote {} ({} features over {} fields)", out.display(), vocab.dim(), vocab.num_fields());
        }
    }
    Ok(())
}

fn build_vocab(path: &Path, format: DataFormat, schema: &Schema, config: VocabConfig, max_rows: Option<usize>) -> Result<Vocabulary> {
    let reader = RecordReader::open(path, format, schema.len(), MalformedPolicy::Abort)?;
    Ok(build_vocabulary(reader.take(max_rows.unwrap_or(usize::MAX)), schema, config)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
