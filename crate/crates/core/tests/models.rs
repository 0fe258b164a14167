use autodiff::nn::{ParamStore, Session};
use autodiff::optim::{adam_step, AdamState};
use autodiff::Tensor;
use gearfault::dataset::{Dataset, Sample};
use gearfault::models::{batch_tensor, predict_proba, train, LstmFcnConfig, ModelSpec, MsResNetConfig, TrainConfig, TrainedModel};
use gearfault::synthgen::{generate, GenConfig};
use gearfault::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_resnet(input_length: usize, train: TrainConfig) -> MsResNetConfig {
    MsResNetConfig { input_length, stem_channels: 4, branch_widths: vec![4, 6, 8], train, ..MsResNetConfig::default() }
}

fn small_lstmfcn(train: TrainConfig) -> LstmFcnConfig {
    LstmFcnConfig { conv_filters: vec![6, 8, 6], lstm_hidden: 4, train, ..LstmFcnConfig::default() }
}

fn random_dataset(n: usize, c: usize, l: usize, k: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|i| Sample::new(Array2::from_shape_fn((c, l), |_| rng.random_range(-1.0..1.0)), i % k)).collect();
    Dataset::new(samples, (0..k).map(|i| format!("c{i}")).collect(), (0..c).map(|i| format!("ch{i}")).collect(), 1.0).unwrap()
}

fn build(spec: &ModelSpec, c: usize, l: usize, k: usize) -> (ParamStore, Box<dyn gearfault::models::Network>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.train_config().seed);
    let net = spec.build(c, l, k, &mut store, &mut rng).unwrap();
    (store, net)
}

#[test]
fn resnet_shapes() {
    let cfg = small_resnet(64, TrainConfig::default());
    let spec = ModelSpec::MsResNet(cfg.clone());
    let (mut store, net) = build(&spec, 3, 64, 5);
    let ds = random_dataset(4, 3, 64, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Session::new(&mut store, false, &mut rng);
    let x = s.input(batch_tensor(&ds, &[0, 1, 2, 3]));
    let out = net.forward(&mut s, x).unwrap();
    assert_eq!(s.value(out.logits).shape(), &[4, 5]);
    assert_eq!(out.branches.len(), 3);
    for b in &out.branches {
        assert_eq!(s.value(*b).shape(), &[4, cfg.branch_out_dim()]);
    }
    assert_eq!(s.value(out.embedding.unwrap()).shape(), &[4, cfg.concat_dim()]);
    assert_eq!(cfg.concat_dim(), 3 * cfg.branch_out_dim());
}

#[test]
fn default_resnet_dimensions() {
    let cfg = MsResNetConfig::default();
    assert_eq!((cfg.blocks_per_branch(), cfg.branch_out_dim(), cfg.concat_dim()), (3, 256, 768));
}

#[test]
fn resnet_rejects_too_short_inputs() {
    let spec = ModelSpec::MsResNet(small_resnet(2, TrainConfig::default()));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(spec.build(3, 2, 5, &mut store, &mut rng), Err(Error::Argument(_))));
}

#[test]
fn lstmfcn_shapes_and_eval_determinism() {
    let spec = ModelSpec::LstmFcn(small_lstmfcn(TrainConfig::default()));
    let (mut store, net) = build(&spec, 3, 20, 5);
    let ds = random_dataset(4, 3, 20, 5, 2);
    let mut run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Session::new(&mut store, false, &mut rng);
        let x = s.input(batch_tensor(&ds, &[0, 1, 2, 3]));
        let out = net.forward(&mut s, x).unwrap();
        s.value(out.logits).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[4, 5]);
    assert_eq!(a, run());
}

#[test]
fn same_seed_gives_same_initial_parameters() {
    let spec = ModelSpec::MsResNet(small_resnet(64, TrainConfig { seed: 5, ..TrainConfig::default() }));
    assert_eq!(build(&spec, 3, 64, 5).0, build(&spec, 3, 64, 5).0);
}

#[test]
fn zeroed_branches_pass_the_stem_through() {
    let spec = ModelSpec::MsResNet(MsResNetConfig {
        input_length: 32,
        stem_channels: 4,
        branch_widths: vec![4, 4, 4],
        ..MsResNetConfig::default()
    });
    let (mut store, net) = build(&spec, 2, 32, 3);
    for p in store.params_mut() {
        if p.name.starts_with("branch") && p.name.contains(".conv.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    assert!(store.params().iter().all(|p| !p.name.contains("shortcut")));
    let ds = random_dataset(3, 2, 32, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Session::new(&mut store, false, &mut rng);
    let x = s.input(batch_tensor(&ds, &[0, 1, 2]));
    let out = net.forward(&mut s, x).unwrap();
    let stem = out.stem.unwrap();
    let pooled = s.graph.global_avg_pool1d(stem).unwrap();
    let pooled = s.value(pooled).clone();
    for b in &out.branches {
        assert_eq!(s.value(*b), &pooled);
    }
}

fn loss_after_steps(spec: &ModelSpec, ds: &Dataset, steps: usize) -> f64 {
    let (mut store, net) = build(spec, ds.num_channels(), ds.series_length(), ds.num_classes());
    let mut adam = AdamState::new(&store, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let labels = ds.labels();
    let mut last = f64::INFINITY;
    for _ in 0..steps {
        let mut s = Session::new(&mut store, true, &mut rng);
        let x = s.input(batch_tensor(ds, &idx));
        let out = net.forward(&mut s, x).unwrap();
        let loss = s.graph.cross_entropy(out.logits, &labels).unwrap();
        last = s.value(loss).item();
        if last < 0.01 {
            return last;
        }
        let grads = s.gradients(loss).unwrap();
        drop(s);
        adam_step(&mut store, &grads, &mut adam).unwrap();
    }
    last
}

#[test]
fn each_architecture_overfits_one_batch() {
    let ds = random_dataset(16, 3, 32, 4, 4);
    let resnet = ModelSpec::MsResNet(small_resnet(32, TrainConfig::default()));
    let loss = loss_after_steps(&resnet, &ds, 200);
    assert!(loss < 0.01, "resnet loss {loss}");
    let lstm = ModelSpec::LstmFcn(LstmFcnConfig { dropout_p: 0.0, ..small_lstmfcn(TrainConfig::default()) });
    let loss = loss_after_steps(&lstm, &ds, 200);
    assert!(loss < 0.01, "lstm-fcn loss {loss}");
}

fn separable(n_per_class: usize, seed: u64) -> Dataset {
    let mut cfg = GenConfig::with_shape(2, n_per_class, 2, seed);
    cfg.series_length = 32;
    cfg.class_channel_stddev = vec![vec![0.1, 0.2], vec![2.0, 3.0]];
    generate(&cfg).unwrap()
}

#[test]
fn training_history_and_best_epoch() {
    let ds = separable(20, 6);
    let val = separable(5, 7);
    let tc = TrainConfig { epochs: 5, batch_size: 8, lr: 0.01, seed: 3, ..TrainConfig::default() };
    let model = train(&ModelSpec::LstmFcn(small_lstmfcn(tc)), &ds, &val).unwrap();
    assert_eq!(model.history.len(), 5);
    let best = model.history.iter().map(|h| h.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(model.history[model.best_epoch].val_accuracy, best);
    assert!(model.history[..model.best_epoch].iter().all(|h| h.val_accuracy < best));

    let probs = predict_proba(&model, &ds).unwrap();
    let train_acc = probs.predict().iter().zip(ds.labels()).filter(|(p, l)| **p == *l).count() as f64 / ds.len() as f64;
    assert_eq!(train_acc, 1.0);
    for row in probs.values.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }

    // predictions on the validation split reproduce the accuracy recorded
    // for the kept epoch
    let val_probs = predict_proba(&model, &val).unwrap();
    let hits = val_probs.predict().iter().zip(val.labels()).filter(|(p, l)| **p == *l).count();
    assert_eq!(hits as f64 / val.len() as f64, model.history[model.best_epoch].val_accuracy);
}

#[test]
fn resnet_trains_with_resampling_and_duplicates_match() {
    let ds = separable(8, 8);
    let tc = TrainConfig { epochs: 2, batch_size: 8, seed: 1, ..TrainConfig::default() };
    let model = train(&ModelSpec::MsResNet(small_resnet(48, tc)), &ds, &ds).unwrap();
    let dup = ds.subset(&[0, 0, 1]);
    let p = predict_proba(&model, &dup).unwrap();
    assert_eq!(p.values.row(0), p.values.row(1));
    assert_eq!(p.model_tag, "msresnet");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = separable(6, 9);
    let tc = TrainConfig { epochs: 2, batch_size: 4, seed: 2, ..TrainConfig::default() };
    for spec in [ModelSpec::MsResNet(small_resnet(40, tc.clone())), ModelSpec::LstmFcn(small_lstmfcn(tc.clone()))] {
        let model = train(&spec, &ds, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        assert_eq!(loaded.store, model.store);
        assert_eq!(loaded.history, model.history);
        assert_eq!(loaded.spec, model.spec);
        let a = predict_proba(&model, &ds).unwrap();
        let b = predict_proba(&loaded, &ds).unwrap();
        assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn diverging_loss_names_the_epoch() {
    let ds = random_dataset(8, 2, 16, 2, 10);
    // one Adam step of this size overflows the weights before the second batch
    let tc = TrainConfig { epochs: 3, batch_size: 4, lr: 1e300, seed: 0, ..TrainConfig::default() };
    let err = train(&ModelSpec::LstmFcn(small_lstmfcn(tc)), &ds, &ds).unwrap_err();
    match err {
        Error::Training(msg) => assert!(msg.contains("epoch 1"), "{msg}"),
        other => panic!("expected a training error, got {other}"),
    }
}

#[test]
fn empty_or_mismatched_splits_are_rejected() {
    let ds = random_dataset(8, 2, 16, 2, 11);
    let spec = ModelSpec::LstmFcn(small_lstmfcn(TrainConfig { epochs: 1, ..TrainConfig::default() }));
    assert!(matches!(train(&spec, &ds, &ds.subset(&[])), Err(Error::Argument(_))));
    let other = random_dataset(4, 3, 16, 2, 12);
    assert!(matches!(train(&spec, &ds, &other), Err(Error::Dimension(_))));
}

#[test]
fn predict_rejects_wrong_shapes() {
    let ds = random_dataset(8, 2, 16, 2, 13);
    let tc = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    let model = train(&ModelSpec::LstmFcn(small_lstmfcn(tc)), &ds, &ds).unwrap();
    let other = random_dataset(2, 2, 17, 2, 14);
    assert!(matches!(predict_proba(&model, &other), Err(Error::Dimension(_))));
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true);
    let before = store.clone();
    let mut adam = AdamState::new(&store, 0.1);
    for _ in 0..5 {
        adam_step(&mut store, &[Some(Tensor::zeros(&[2]))], &mut adam).unwrap();
    }
    assert_eq!(store, before);
}
