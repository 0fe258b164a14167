use std::path::Path;
use std::time::Instant;

use autodiff::checkpoint::{read_checkpoint, write_checkpoint};
use autodiff::nn::{ParamStore, Session};
use autodiff::optim::{adam_step, clip_global_norm, AdamState, PlateauScheduler};
use autodiff::softmax_rows;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_tensor, ModelSpec, Network};
use crate::dataset::Dataset;
use crate::ensemble::ProbabilityMatrix;
use crate::error::{argument, dimension, Error, Result};
use crate::io::write_atomic;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub train_loss: f64,
    /// Fraction of validation samples classified correctly.
    pub val_accuracy: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    spec: ModelSpec,
    num_channels: usize,
    series_length: usize,
    num_classes: usize,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    train_seconds: f64,
}

/// Parameters restored from the best validation epoch, with the full run
/// history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub num_channels: usize,
    /// Length of the raw series the model accepts (before any resampling).
    pub series_length: usize,
    pub num_classes: usize,
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    /// Index into `history` of the epoch whose parameters were kept.
    pub best_epoch: usize,
    pub train_seconds: f64,
}

impl TrainedModel {
    fn metadata(&self) -> Metadata {
        Metadata {
            spec: self.spec.clone(),
            num_channels: self.num_channels,
            series_length: self.series_length,
            num_classes: self.num_classes,
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            train_seconds: self.train_seconds,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.metadata())?;
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &self.store, &meta)?;
        write_atomic(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (meta, records) = read_checkpoint(std::io::BufReader::new(file))?;
        let meta: Metadata = serde_json::from_str(&meta)?;
        let (store, _) = build(&meta.spec, meta.num_channels, meta.series_length, meta.num_classes)?;
        let mut store = store;
        store.load_values(records)?;
        Ok(Self {
            spec: meta.spec,
            num_channels: meta.num_channels,
            series_length: meta.series_length,
            num_classes: meta.num_classes,
            store,
            history: meta.history,
            best_epoch: meta.best_epoch,
            train_seconds: meta.train_seconds,
        })
    }

    pub fn network(&self) -> Result<Box<dyn Network>> {
        Ok(build(&self.spec, self.num_channels, self.series_length, self.num_classes)?.1)
    }
}

fn build(spec: &ModelSpec, c: usize, l: usize, k: usize) -> Result<(ParamStore, Box<dyn Network>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.train_config().seed);
    let net = spec.build(c, l, k, &mut store, &mut rng)?;
    Ok((store, net))
}

/// Eval-mode class probabilities for an already prepared dataset.
pub(crate) fn probabilities(net: &dyn Network, store: &mut ParamStore, dataset: &Dataset) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::new();
    let mut k = 0;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let mut s = Session::new(store, false, &mut rng);
        let x = s.input(batch_tensor(dataset, chunk));
        let out = net.forward(&mut s, x)?;
        let logits = s.value(out.logits);
        k = logits.shape()[1];
        rows.extend(softmax_rows(logits.data(), k));
    }
    Ok(Array2::from_shape_vec((dataset.len(), k), rows).expect("one row per sample"))
}

fn accuracy(probs: &Array2<f64>, dataset: &Dataset) -> f64 {
    let pred = crate::ensemble::predict(probs);
    let hits = pred.iter().zip(dataset.samples()).filter(|(p, s)| **p == s.label).count();
    hits as f64 / dataset.len() as f64
}

/// The batch-hard triplet term needs two classes and a repeated class.
fn triplet_applicable(labels: &[usize]) -> bool {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.len() >= 2 && counts.values().any(|&c| c >= 2)
}

/// Mini-batch Adam with a plateau schedule on validation accuracy; the
/// parameters of the first epoch reaching the best validation accuracy are
/// kept. A trailing batch of one sample is skipped since batch
/// normalisation needs two.
pub fn train(spec: &ModelSpec, train_set: &Dataset, val_set: &Dataset) -> Result<TrainedModel> {
    let start = Instant::now();
    let cfg = spec.train_config();
    if train_set.len() < 2 || val_set.is_empty() {
        return argument(format!(
            "training needs at least 2 training and 1 validation samples, got {} and {}",
            train_set.len(),
            val_set.len()
        ));
    }
    if (train_set.num_channels(), train_set.series_length()) != (val_set.num_channels(), val_set.series_length()) {
        return dimension("training and validation series differ in shape");
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return argument("batch size must be at least 2 and epochs positive");
    }
    let (c, l, k) = (train_set.num_channels(), train_set.series_length(), train_set.num_classes());
    let train_p = spec.prepare(train_set)?;
    let val_p = spec.prepare(val_set)?;
    let (mut store, net) = build(spec, c, l, k)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut adam = AdamState::new(&store, cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta)?;
    let triplet = match spec {
        ModelSpec::MsResNet(m) if m.triplet_weight > 0.0 => Some((m.triplet_margin, m.triplet_weight)),
        _ => None,
    };

    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let labels: Vec<usize> = batch.iter().map(|&i| train_p.sample(i).label).collect();
            let mut s = Session::new(&mut store, true, &mut dropout_rng);
            let x = s.input(batch_tensor(&train_p, batch));
            let out = net.forward(&mut s, x)?;
            let mut loss = s.graph.cross_entropy(out.logits, &labels)?;
            if let (Some((margin, weight)), Some(emb)) = (triplet, out.embedding) {
                if triplet_applicable(&labels) {
                    let t = s.graph.triplet_margin_loss(emb, &labels, margin)?;
                    let t = s.graph.scale(t, weight);
                    loss = s.graph.add(loss, t)?;
                }
            }
            let value = s.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!("loss became {value} in epoch {epoch}")));
            }
            let mut grads = s.gradients(loss)?;
            drop(s);
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam_step(&mut store, &grads, &mut adam)?;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let val_accuracy = accuracy(&probabilities(net.as_ref(), &mut store, &val_p)?, &val_p);
        history.push(EpochRecord { epoch, train_loss: loss_sum / seen.max(1) as f64, val_accuracy, lr: adam.lr });
        adam.lr = sched.step(val_accuracy, adam.lr);
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch - 1, val_accuracy, store.clone()));
        }
    }
    let (best_epoch, _, best_store) = best.expect("at least one epoch ran");
    Ok(TrainedModel {
        spec: spec.clone(),
        num_channels: c,
        series_length: l,
        num_classes: k,
        store: best_store,
        history,
        best_epoch,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn predict_proba(model: &TrainedModel, dataset: &Dataset) -> Result<ProbabilityMatrix> {
    if !dataset.is_empty() && (dataset.num_channels(), dataset.series_length()) != (model.num_channels, model.series_length) {
        return dimension(format!(
            "model takes {} channels x {} points, got {} x {}",
            model.num_channels,
            model.series_length,
            dataset.num_channels(),
            dataset.series_length()
        ));
    }
    let prepared = model.spec.prepare(dataset)?;
    let net = model.network()?;
    let mut store = model.store.clone();
    let values = probabilities(net.as_ref(), &mut store, &prepared)?;
    Ok(ProbabilityMatrix { values, model_tag: model.spec.tag().into() })
}
