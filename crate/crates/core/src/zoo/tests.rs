use super::*;
use crate::data::{Dataset, Feature, Provenance};
use crate::math::logistic_loss;
use crate::optim::Optimizer;
use rand::Rng;

fn layout() -> FieldLayout {
    FieldLayout::from_sizes(&[4, 3, 5, 2, 6]).unwrap()
}

fn random_instance(layout: &FieldLayout, rng: &mut impl Rng, real_valued: bool) -> SparseInstance {
    let mut entries = Vec::new();
    for f in 0..layout.num_fields() {
        if rng.random_bool(0.15) {
            continue;
        }
        let r = layout.range(f);
        let index = rng.random_range(r);
        let value = if real_valued { rng.random_range(-1.5..1.5) } else { 1.0 };
        entries.push(Feature { index, value });
    }
    SparseInstance::new(entries, u8::from(rng.random_bool(0.5)))
}

fn instances(n: usize, seed: u64, real_valued: bool) -> Vec<SparseInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = layout();
    (0..n).map(|_| random_instance(&l, &mut rng, real_valued)).collect()
}

fn small_spec(arch: Architecture, activation: Activation) -> ModelSpec {
    let mut spec = ModelSpec::new(arch);
    spec.k = 4;
    spec.mlp.hidden_sizes = vec![8, 8];
    spec.mlp.dropout_keep = 1.0;
    spec.mlp.activation = activation;
    spec.embedding_init = InitScheme::Normal { std: 0.5 };
    spec.pretrain_epochs = 0;
    spec
}

/// Random values in every parameter, biases included.
fn randomize(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, b) in model.blocks_mut() {
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

fn mean_loss(model: &Model, batch: &[SparseInstance]) -> f64 {
    batch.iter().map(|x| logistic_loss(model.logit(x).unwrap(), x.label())).sum::<f64>() / batch.len() as f64
}

fn dense(g: &GradBlock<'_>, len: usize) -> Vec<f64> {
    match g {
        GradBlock::Dense(d) => d.to_vec(),
        GradBlock::Sparse(s) => {
            let mut out = vec![0.0; len];
            for (row, r) in s.rows() {
                out[row * s.width()..(row + 1) * s.width()].copy_from_slice(r);
            }
            out
        }
    }
}

#[test]
fn architecture_names_round_trip() {
    for a in Architecture::ALL {
        assert_eq!(a.name().parse::<Architecture>().unwrap(), a);
        assert_eq!(a.slug().parse::<Architecture>().unwrap(), a);
        ModelSpec::new(a).validate().unwrap();
    }
    assert!("xgboost".parse::<Architecture>().is_err());
}

#[test]
fn spec_invariants_are_enforced() {
    let mut s = ModelSpec::new(Architecture::DeepFm);
    s.share_embedding = false;
    assert!(s.validate().is_err());
    let mut s = ModelSpec::new(Architecture::FmDnn);
    s.share_embedding = true;
    assert!(s.validate().is_err());
    let mut s = ModelSpec::new(Architecture::Ipnn);
    s.product_kind = None;
    assert!(s.validate().is_err());
    let mut s = ModelSpec::new(Architecture::DeepFm);
    s.pretrain_epochs = 2;
    assert!(s.validate().is_err());
    assert_eq!(ModelSpec::new(Architecture::Ipnn).mlp.activation, Activation::Tanh);
    assert_eq!(ModelSpec::new(Architecture::Lr).optimizer.name(), "ftrl");
    assert_eq!(ModelSpec::new(Architecture::Fm).optimizer.name(), "adam");
}

#[test]
fn structure_follows_the_feature_matrix() {
    let l = layout();
    for a in Architecture::ALL {
        let m = Model::new(ModelSpec::new(a), &l, 1).unwrap();
        let has_order1 = m.wide().is_some() || m.fm().is_some();
        assert_eq!(has_order1, matches!(a, Architecture::Lr | Architecture::Fm | Architecture::LrDnn | Architecture::FmDnn | Architecture::DeepFm), "{a}");
        let tables = usize::from(m.fm().is_some()) + usize::from(m.deep_table().is_some());
        let expected = match a {
            Architecture::Lr => 0,
            Architecture::FmDnn => 2,
            _ => 1,
        };
        assert_eq!(tables, expected, "{a}");
        assert_eq!(m.mlp().is_some(), a.has_deep());
    }
}

#[test]
fn zero_deepfm_predicts_one_half() {
    let m = Model::zeros(ModelSpec::new(Architecture::DeepFm), &layout()).unwrap();
    for x in instances(20, 1, false) {
        assert_eq!(m.predict(&x).unwrap(), 0.5);
    }
}

#[test]
fn lr_single_feature_value() {
    let mut m = Model::zeros(ModelSpec::new(Architecture::Lr), &layout()).unwrap();
    m.wide_mut().unwrap().w[2] = 2.0;
    let p = m.predict(&SparseInstance::new(vec![Feature::one_hot(2)], 1)).unwrap();
    assert!((p - 0.8807970779778823).abs() < 1e-15);
}

#[test]
fn predict_rejects_out_of_range() {
    let m = Model::new(ModelSpec::new(Architecture::Fm), &layout(), 0).unwrap();
    assert!(m.predict(&SparseInstance::new(vec![Feature::one_hot(99)], 1)).is_err());
}

#[test]
fn deepfm_with_zero_head_equals_fm() {
    let l = layout();
    let mut deepfm = Model::new(small_spec(Architecture::DeepFm, Activation::Relu), &l, 3).unwrap();
    randomize(&mut deepfm, 4);
    let mlp = deepfm.mlp_mut().unwrap();
    mlp.head_weight.fill(0.0);
    mlp.head_bias = 0.0;
    let mut fm = Model::new(small_spec(Architecture::Fm, Activation::Relu), &l, 3).unwrap();
    *fm.fm_mut().unwrap() = deepfm.fm().unwrap().clone();
    for x in instances(1000, 5, true) {
        let (a, b) = (deepfm.predict(&x).unwrap(), fm.predict(&x).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn fm_with_zero_latents_equals_lr() {
    let l = layout();
    let mut fm = Model::new(small_spec(Architecture::Fm, Activation::Relu), &l, 3).unwrap();
    randomize(&mut fm, 6);
    fm.fm_mut().unwrap().table.as_mut_slice().fill(0.0);
    let mut lr = Model::zeros(small_spec(Architecture::Lr, Activation::Relu), &l).unwrap();
    *lr.wide_mut().unwrap() = fm.fm().unwrap().linear.clone();
    for x in instances(1000, 7, true) {
        assert!((fm.predict(&x).unwrap() - lr.predict(&x).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn probabilities_stay_inside_the_open_interval() {
    let l = layout();
    for a in Architecture::ALL {
        let mut m = Model::new(small_spec(a, Activation::Relu), &l, 8).unwrap();
        for (_, b) in m.blocks_mut() {
            b.iter_mut().for_each(|v| *v = 50.0);
        }
        for x in instances(50, 9, false) {
            let p = m.predict(&x).unwrap();
            assert!(p > 0.0 && p < 1.0, "{a}: {p}");
        }
    }
    assert!(probability(-1e6) > 0.0 && probability(1e6) < 1.0);
}

#[test]
fn gradients_match_finite_differences_for_all_architectures() {
    let l = layout();
    let batch = instances(6, 10, true);
    for a in Architecture::ALL {
        let act = if a == Architecture::Ipnn { Activation::Tanh } else { Activation::Relu };
        let mut model = Model::new(small_spec(a, act), &l, 11).unwrap();
        randomize(&mut model, 12);
        let (_, grads) = batch_gradients(&model, &batch, Mode::Eval, 0).unwrap();
        let analytic: Vec<Vec<f64>> = grads.blocks().iter().zip(model.blocks()).map(|(g, (_, p))| dense(g, p.len())).collect();
        let names: Vec<String> = model.blocks().into_iter().map(|(n, _)| n).collect();
        let h = 1e-6;
        for (bi, name) in names.iter().enumerate() {
            for i in 0..analytic[bi].len() {
                let bump = |m: &mut Model, d: f64| m.blocks_mut()[bi].1[i] += d;
                let mut mp = model.clone();
                bump(&mut mp, h);
                let mut mm = model.clone();
                bump(&mut mm, -h);
                let fd = (mean_loss(&mp, &batch) - mean_loss(&mm, &batch)) / (2.0 * h);
                let an = analytic[bi][i];
                let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-4);
                assert!(rel < 1e-5, "{a} {name}[{i}]: analytic {an} vs fd {fd}");
            }
        }
    }
}

#[test]
fn cross_features_feed_the_wide_part() {
    let l = layout();
    let mut spec = small_spec(Architecture::LrDnn, Activation::Relu);
    spec.cross = Some(CrossConfig { pairs: vec![[0, 1], [2, 4]], buckets: 7 });
    let mut m = Model::new(spec.clone(), &l, 1).unwrap();
    randomize(&mut m, 2);
    assert_eq!(m.blocks().iter().find(|(n, _)| n == "cross.w").unwrap().1.len(), 7);
    let batch = instances(4, 3, true);
    let (_, g) = batch_gradients(&m, &batch, Mode::Eval, 0).unwrap();
    assert!(!g.cross.as_ref().unwrap().is_empty());
    spec.cross = Some(CrossConfig { pairs: vec![[0, 9]], buckets: 7 });
    assert!(Model::new(spec, &l, 1).is_err());
}

fn trainer(model: &Model) -> Trainer {
    Trainer::for_model(model, 42).unwrap()
}

#[test]
fn repeated_batch_has_same_mean_loss() {
    let l = layout();
    let m = Model::new(small_spec(Architecture::DeepFm, Activation::Relu), &l, 1).unwrap();
    let batch = instances(10, 2, false);
    let doubled: Vec<SparseInstance> = batch.iter().chain(batch.iter()).cloned().collect();
    let a = batch_gradients(&m, &batch, Mode::Eval, 0).unwrap().0;
    let b = batch_gradients(&m, &doubled, Mode::Eval, 0).unwrap().0;
    assert!((a - b).abs() <= 1e-15 * a.abs());
}

#[test]
fn small_step_decreases_single_instance_loss() {
    let l = layout();
    let mut decreased = 0;
    for seed in 0..100 {
        let mut spec = small_spec(Architecture::DeepFm, Activation::Tanh);
        spec.optimizer = OptimizerConfig::Adam(AdamConfig { lr: 1e-4, ..Default::default() });
        let mut m = Model::new(spec, &l, seed).unwrap();
        let x = instances(1, 1000 + seed, false);
        let before = mean_loss(&m, &x);
        let mut t = trainer(&m);
        t.train_step(&mut m, &x).unwrap();
        if mean_loss(&m, &x) < before {
            decreased += 1;
        }
    }
    assert_eq!(decreased, 100);
}

#[test]
fn training_is_deterministic_with_dropout() {
    let l = layout();
    let run = || {
        let mut spec = small_spec(Architecture::DeepFm, Activation::Relu);
        spec.mlp.dropout_keep = 0.5;
        let mut m = Model::new(spec, &l, 5).unwrap();
        let mut t = trainer(&m);
        let data = instances(600, 6, false);
        let losses: Vec<u64> = data.chunks(300).map(|b| t.train_step(&mut m, b).unwrap().to_bits()).collect();
        (losses, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn inactive_embedding_rows_are_bitwise_unchanged() {
    let l = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for a in [Architecture::DeepFm, Architecture::FmDnn, Architecture::Fnn, Architecture::PnnStar, Architecture::Lr] {
        let mut m = Model::new(small_spec(a, Activation::Relu), &l, 1).unwrap();
        let mut t = trainer(&m);
        for _ in 0..20 {
            let batch: Vec<SparseInstance> = (0..3).map(|_| random_instance(&l, &mut rng, false)).collect();
            let active: std::collections::BTreeSet<usize> = batch.iter().flat_map(|x| x.entries().iter().map(|e| e.index)).collect();
            let before = m.clone();
            t.train_step(&mut m, &batch).unwrap();
            for ((name, old), (_, new)) in before.blocks().iter().zip(m.blocks()) {
                let width = match name.as_str() {
                    "fm.v" | "deep.v" => 4,
                    "wide.w" | "fm.w" => 1,
                    _ => continue,
                };
                for row in (0..l.dim()).filter(|r| !active.contains(r)) {
                    for j in row * width..(row + 1) * width {
                        assert_eq!(old[j].to_bits(), new[j].to_bits(), "{a} {name} row {row}");
                    }
                }
            }
        }
    }
}

#[test]
fn fm_dnn_keeps_tables_independent() {
    let l = layout();
    let mut m = Model::new(small_spec(Architecture::FmDnn, Activation::Relu), &l, 1).unwrap();
    randomize(&mut m, 2);
    let batch = instances(8, 3, false);
    let (_, g) = batch_gradients(&m, &batch, Mode::Eval, 0).unwrap();
    // zero the FM output path: the FM table must then receive no gradient
    let mut fm_off = m.clone();
    fm_off.fm_mut().unwrap().table.as_mut_slice().fill(0.0);
    fm_off.fm_mut().unwrap().linear.w.fill(0.0);
    let (_, g_off) = batch_gradients(&fm_off, &batch, Mode::Eval, 0).unwrap();
    assert!(g_off.fm.as_ref().unwrap().v.rows().all(|(_, r)| r.iter().all(|&v| v == 0.0)));
    assert!(!g.deep_v.as_ref().unwrap().is_empty());

    // DeepFM: one table, moved by a step
    let mut d = Model::new(small_spec(Architecture::DeepFm, Activation::Relu), &l, 1).unwrap();
    assert!(d.deep_table().is_none());
    let before = d.fm().unwrap().table.clone();
    trainer(&d).train_step(&mut d, &batch).unwrap();
    assert_ne!(before, d.fm().unwrap().table);
}

#[test]
fn non_finite_loss_aborts() {
    let l = layout();
    let mut m = Model::new(small_spec(Architecture::Fm, Activation::Relu), &l, 1).unwrap();
    m.fm_mut().unwrap().linear.bias = f64::INFINITY;
    let before = m.clone();
    let err = trainer(&m).train_step(&mut m, &instances(4, 1, false)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert_eq!(before, m);
    assert!(trainer(&m).train_step(&mut m, &[]).is_err());
}

fn dataset(n: usize, seed: u64) -> Dataset {
    Dataset::new(instances(n, seed, false), layout(), Provenance::Synthetic).unwrap()
}

#[test]
fn pretrain_with_zero_epochs_is_random_init() {
    let ds = dataset(50, 1);
    let spec = small_spec(Architecture::Fnn, Activation::Relu);
    let m = pretrain_fm_then_init(&spec, &ds, 0, 16, 9).unwrap();
    assert_eq!(m, Model::new(spec, ds.layout(), 9).unwrap());
    assert!(pretrain_fm_then_init(&small_spec(Architecture::DeepFm, Activation::Relu), &ds, 1, 16, 9).is_err());
}

#[test]
fn pretrain_copies_fm_latents_exactly() {
    let ds = dataset(200, 2);
    let spec = small_spec(Architecture::Fnn, Activation::Relu);
    let m = pretrain_fm_then_init(&spec, &ds, 2, 32, 9).unwrap();
    // replay the FM run and compare the handed-off table bitwise
    let mut fm_spec = ModelSpec::new(Architecture::Fm);
    fm_spec.k = spec.k;
    fm_spec.embedding_init = spec.embedding_init;
    let mut fm = Model::new(fm_spec, ds.layout(), 9).unwrap();
    let mut t = trainer(&fm);
    let t_seed = 9;
    t = Trainer::new(t.optimizer().config(), t_seed).unwrap();
    fit(&mut fm, &mut t, &ds, FitOptions { epochs: 2, batch_size: 32, seed: 9 }, |_, _| Ok(true)).unwrap();
    assert_eq!(m.deep_table().unwrap(), &fm.fm().unwrap().table);
    assert_ne!(m.deep_table().unwrap(), Model::new(spec, ds.layout(), 9).unwrap().deep_table().unwrap());
}

#[test]
fn fit_reports_epochs_and_rejects_bad_input() {
    let ds = dataset(100, 3);
    let mut m = Model::new(small_spec(Architecture::Fm, Activation::Relu), ds.layout(), 1).unwrap();
    let mut t = trainer(&m);
    let mut seen = Vec::new();
    let h = fit(&mut m, &mut t, &ds, FitOptions { epochs: 3, batch_size: 10, seed: 1 }, |s, _| {
        seen.push(s.epoch);
        Ok(s.epoch < 3)
    })
    .unwrap();
    assert_eq!(h.len(), 3);
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(m.meta.steps, 30);
    assert_eq!(t.steps(), 30);
    let h = fit(&mut m, &mut t, &ds, FitOptions { epochs: 5, batch_size: 10, seed: 1 }, |_, _| Ok(false)).unwrap();
    assert_eq!(h.len(), 1);
    assert!(fit(&mut m, &mut t, &ds, FitOptions { epochs: 1, batch_size: 0, seed: 1 }, |_, _| Ok(true)).is_err());
}

mod files {
    use super::*;

    fn trained(a: Architecture) -> (Model, Trainer) {
        let ds = dataset(64, 4);
        let mut m = Model::new(small_spec(a, Activation::Relu), ds.layout(), 2).unwrap();
        let mut t = trainer(&m);
        fit(&mut m, &mut t, &ds, FitOptions { epochs: 1, batch_size: 16, seed: 3 }, |_, _| Ok(true)).unwrap();
        m.meta.final_auc = Some(0.75);
        m.set_vocab_hash(Some([7; 32]));
        (m, t)
    }

    #[test]
    fn round_trip_preserves_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let xs = instances(1000, 5, false);
        for a in Architecture::ALL {
            let (m, t) = trained(a);
            let path = dir.path().join(format!("{}.model", a.slug()));
            save_model(&m, Some(&t), &path).unwrap();
            let (back, bt) = load_checkpoint(&path).unwrap();
            assert_eq!(back, m, "{a}");
            assert_eq!(bt.as_ref(), Some(&t));
            for x in &xs {
                assert_eq!(m.predict(x).unwrap().to_bits(), back.predict(x).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, mut t) = trained(Architecture::DeepFm);
        let path = dir.path().join("ckpt");
        save_model(&m, Some(&t), &path).unwrap();
        let (mut m2, t2) = load_checkpoint(&path).unwrap();
        let mut t2 = t2.unwrap();
        let batch = instances(16, 8, false);
        assert_eq!(t.train_step(&mut m, &batch).unwrap(), t2.train_step(&mut m2, &batch).unwrap());
        assert_eq!(m, m2);
        assert!(matches!(t.optimizer(), Optimizer::Adam { .. }));
    }

    #[test]
    fn corruption_truncation_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = trained(Architecture::Fm);
        let path = dir.path().join("m");
        save_model(&m, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(io::decode(&flipped), Err(Error::ChecksumMismatch)));

        assert!(matches!(io::decode(&bytes[..bytes.len() - 10]), Err(Error::Truncated)));
        assert!(matches!(io::decode(&bytes[..6]), Err(Error::Truncated)));

        let mut old = bytes.clone();
        old[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(io::decode(&old), Err(Error::UnsupportedVersion { found: 0, .. })));

        assert!(matches!(io::decode(b"PNG\x89 not a model"), Err(Error::BadFormat(_))));
        assert!(load_model(dir.path().join("missing")).is_err());
    }
}
