use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use deepfm_core::data::format::write_text_dataset;
use deepfm_core::data::vocab::FieldEncoding;
use deepfm_core::data::{make_synthetic_dataset, DataFormat, MalformedPolicy, SyntheticSpec, Vocabulary};
use deepfm_core::harness::*;
use deepfm_core::zoo::{load_checkpoint, load_model, Architecture};
use deepfm_core::Error;

fn synthetic(kind: SyntheticKind, n_train: usize, n_test: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic = Some(SyntheticSource { kind, n_train, n_test, spec: None });
    cfg.defaults.hidden_sizes = Some(vec![16, 16]);
    cfg.epochs = 1;
    cfg.batch_size = 256;
    cfg
}

fn write_synthetic_file(path: &Path, n: usize, seed: u64) {
    let spec = SyntheticSpec::planted_default();
    let (ds, _) = make_synthetic_dataset(&spec, n, seed).unwrap();
    write_text_dataset(path, &ds, &spec.vocabulary().unwrap()).unwrap();
}

#[test]
fn lr_nearly_reaches_bayes_on_linear_data() {
    let mut cfg = synthetic(SyntheticKind::Linear, 40_000, 5_000);
    cfg.epochs = 2;
    let data = prepare_data(&cfg).unwrap();
    let bayes = data.bayes_report().unwrap().unwrap().auc.unwrap();
    let lr = train_model(cfg.model_spec(Architecture::Lr).unwrap(), &data, &cfg).unwrap();
    let auc = lr.report.auc.unwrap();
    assert!(auc >= 0.95 * bayes, "LR {auc} vs Bayes {bayes}");
}

#[test]
fn deepfm_history_is_reproducible() {
    let cfg = synthetic(SyntheticKind::Planted, 3_000, 1_000);
    let data = prepare_data(&cfg).unwrap();
    let run = || train_model(cfg.model_spec(Architecture::DeepFm).unwrap(), &data, &cfg).unwrap();
    let (a, b) = (run(), run());
    let strip = |o: &TrainOutcome| o.history.iter().map(|h| (h.epoch, h.train_loss, h.test_auc, h.test_logloss)).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.report.to_record(false), b.report.to_record(false));
}

#[test]
fn missing_paths_fail_validation_together() {
    let mut cfg = RunConfig::default();
    cfg.data.train = Some("/nonexistent/train.txt".into());
    cfg.data.test = Some("/nonexistent/test.txt".into());
    cfg.epochs = 0;
    let err = cmd_compare(&cfg).unwrap_err().to_string();
    assert!(err.contains("train.txt") && err.contains("test.txt") && err.contains("epochs"), "{err}");
}

#[test]
fn compare_isolates_a_diverging_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(SyntheticKind::Planted, 2_000, 500);
    cfg.out_dir = dir.path().to_path_buf();
    cfg.models = vec![Architecture::Lr, Architecture::Fm, Architecture::DeepFm];
    cfg.model_overrides.insert("fm".into(), ModelOverrides { learning_rate: Some(1e300), ..Default::default() });
    let (rows, _) = cmd_compare(&cfg).unwrap();
    assert!(rows[0].1.is_ok() && rows[2].1.is_ok());
    let err = rows[1].1.as_ref().unwrap_err();
    assert!(err.contains("non-finite"), "{err}");
    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().nth(1).unwrap().contains("status=failed"));
    let table = fs::read_to_string(dir.path().join("compare.txt")).unwrap();
    assert!(table.contains("DeepFM") && table.contains("FM failed"));
}

#[test]
fn compare_emits_nine_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(SyntheticKind::Planted, 1_500, 500);
    cfg.out_dir = dir.path().to_path_buf();
    let (rows, files) = cmd_compare(&cfg).unwrap();
    assert_eq!(rows.len(), 9);
    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    let names: Vec<&str> = metrics.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    let expected: Vec<String> = Architecture::ALL.iter().map(|a| format!("model={}", a.name())).collect();
    assert_eq!(names, expected);
    // the snapshot reproduces the run's config
    let snapshot = RunConfig::load(dir.path().join("config.toml")).unwrap();
    assert_eq!(snapshot, cfg);
    assert!(files.files.iter().all(|f| f.is_file()));
}

#[test]
fn train_saves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.txt");
    write_synthetic_file(&data_path, 2_000, 4);
    let mut cfg = RunConfig::default();
    cfg.data.train = Some(data_path.clone());
    cfg.vocab.min_count = 1;
    cfg.epochs = 2;
    cfg.defaults.hidden_sizes = Some(vec![8]);
    cfg.out_dir = dir.path().join("run");
    let (out, _) = cmd_train(&cfg, Architecture::Ipnn).unwrap();
    assert_eq!(out.history.len(), 2);
    // 90/10 split of 2000 lines
    assert_eq!(out.report.n_pos + out.report.n_neg, 200);

    let (model, trainer) = load_checkpoint(cfg.out_dir.join("ipnn.model")).unwrap();
    assert_eq!(model, out.model);
    assert_eq!(trainer.unwrap(), out.trainer);
    let vocab = Vocabulary::load(cfg.out_dir.join("vocab.txt")).unwrap();
    let (report, load) = cmd_eval(&model, &vocab, &data_path, DataFormat::Text, MalformedPolicy::Abort).unwrap();
    assert_eq!(load.instances, 2_000);
    assert_eq!(report.n_pos + report.n_neg, 2_000);
    let history = fs::read_to_string(cfg.out_dir.join("history_ipnn.tsv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn eval_rejects_a_foreign_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(SyntheticKind::Planted, 1_000, 200);
    cfg.out_dir = dir.path().to_path_buf();
    let (out, _) = cmd_train(&cfg, Architecture::Fm).unwrap();
    let data_path = dir.path().join("data.txt");
    write_synthetic_file(&data_path, 300, 9);
    let generator = SyntheticSpec::planted_default().vocabulary().unwrap();
    let own = load_model(dir.path().join("fm.model")).unwrap();
    assert_eq!(own, out.model);
    // the generator vocabulary is the one it was trained with; a rebuilt one is not
    assert!(cmd_eval(&own, &generator, &data_path, DataFormat::Text, MalformedPolicy::Abort).is_ok());
    let mut rebuilt_cfg = RunConfig::default();
    rebuilt_cfg.data.train = Some(data_path.clone());
    rebuilt_cfg.vocab.min_count = 1;
    let rebuilt = prepare_data(&rebuilt_cfg).unwrap().vocab;
    match cmd_eval(&own, &rebuilt, &data_path, DataFormat::Text, MalformedPolicy::Abort) {
        Err(Error::InvalidConfig(msg)) => assert!(msg.contains("vocabulary")),
        other => panic!("expected a vocabulary mismatch, got {other:?}"),
    }
}

#[test]
fn split_vocabulary_only_sees_training_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    // field 1 token "rare" appears in exactly one line
    let mut text = String::new();
    for i in 0..50 {
        let tok = if i == 17 { "rare".to_string() } else { format!("t{}", i % 3) };
        text.push_str(&format!("{} 0:a{} 1:{tok}\n", i % 2, i % 4));
    }
    fs::write(&path, text).unwrap();
    let mut held_out = 0;
    for seed in 0..10 {
        let mut cfg = RunConfig::default();
        cfg.data.train = Some(path.clone());
        cfg.vocab.min_count = 1;
        cfg.data.split = 0.8;
        cfg.seed = seed;
        let data = prepare_data(&cfg).unwrap();
        assert_eq!((data.train.len(), data.test.len()), (40, 10));
        let seen: BTreeSet<&str> = data
            .train
            .instances()
            .iter()
            .flat_map(|x| x.entries().iter().filter_map(|e| data.vocab.token_of(e.index)))
            .filter(|t| !t.starts_with('a'))
            .collect();
        let known: BTreeSet<&str> = match &data.vocab.fields()[1].encoding {
            FieldEncoding::Categorical { tokens } => tokens.keys().map(String::as_str).collect(),
            _ => unreachable!(),
        };
        assert_eq!(seen, known);
        held_out += usize::from(!known.contains("rare"));
    }
    assert!(held_out > 0);
}

#[test]
fn sweep_writes_plot_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(SyntheticKind::Planted, 1_000, 300);
    cfg.out_dir = dir.path().to_path_buf();
    cfg.defaults.hidden_sizes = Some(vec![8, 8]);
    let (rows, files) = cmd_sweep(&cfg, SweepAxis::Layers).unwrap();
    assert_eq!(rows.iter().map(|r| r.hidden_sizes.len()).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
    let tsv = fs::read_to_string(&files.files[1]).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "layers\thidden\tauc\tlogloss\tstatus");
    assert_eq!(lines.next().unwrap().split('\t').take(2).collect::<Vec<_>>(), ["1", "8"]);
    cfg.sweep.model = Architecture::Fm;
    assert!(cmd_sweep(&cfg, SweepAxis::Dropout).is_err());
}

#[test]
fn benchmark_pins_lr_and_splits_fnn() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(SyntheticKind::Planted, 3_000, 300);
    cfg.out_dir = dir.path().to_path_buf();
    cfg.models = vec![Architecture::Fm, Architecture::Fnn];
    let (rows, _) = cmd_benchmark(&cfg).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["LR", "FM", "FNN", FNN_NO_PRETRAIN]);
    assert_eq!(rows[0].ratio, 1.0);
    assert!(rows[2].pretrain_seconds > 0.0 && rows[3].pretrain_seconds == 0.0);
    assert!(rows.iter().all(|r| r.total_seconds > 0.0 && (r.total_seconds - r.pretrain_seconds - r.train_seconds).abs() < 1e-12));
}

#[test]
fn early_stopping_cuts_training_short() {
    let mut cfg = synthetic(SyntheticKind::Linear, 500, 2_000);
    cfg.epochs = 40;
    cfg.early_stopping = true;
    cfg.batch_size = 32;
    cfg.defaults.learning_rate = Some(0.05);
    let data = prepare_data(&cfg).unwrap();
    let out = train_model(cfg.model_spec(Architecture::DeepFm).unwrap(), &data, &cfg).unwrap();
    assert!(out.history.len() < 40, "ran all {} epochs", out.history.len());
}
