//! The two deep classifiers, their configuration and training.

mod lstmfcn;
mod msresnet;
mod train;

use std::borrow::Cow;

use autodiff::nn::{ParamStore, Session};
use autodiff::{Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::Result;

pub use lstmfcn::LstmFcn;
pub use msresnet::MsResNet;
pub use train::{predict_proba, train, EpochRecord, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsResNetConfig {
    /// Series are linearly resampled to this length before the stem.
    pub input_length: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub branch_kernel_sizes: Vec<usize>,
    /// Output channels of each residual block; the last entry is the width of
    /// a branch embedding.
    pub branch_widths: Vec<usize>,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub train: TrainConfig,
}

impl Default for MsResNetConfig {
    fn default() -> Self {
        Self {
            input_length: 512,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            pool_kernel: 3,
            pool_stride: 2,
            branch_kernel_sizes: vec![3, 5, 7],
            branch_widths: vec![64, 128, 256],
            triplet_margin: 1.0,
            triplet_weight: 1.0,
            train: TrainConfig::default(),
        }
    }
}

impl MsResNetConfig {
    pub fn blocks_per_branch(&self) -> usize {
        self.branch_widths.len()
    }

    pub fn branch_out_dim(&self) -> usize {
        self.branch_widths.last().copied().unwrap_or(0)
    }

    pub fn concat_dim(&self) -> usize {
        self.branch_kernel_sizes.len() * self.branch_out_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmFcnConfig {
    pub conv_filters: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub lstm_hidden: usize,
    pub dropout_p: f64,
    pub train: TrainConfig,
}

impl Default for LstmFcnConfig {
    fn default() -> Self {
        Self {
            conv_filters: vec![128, 256, 128],
            conv_kernels: vec![8, 5, 3],
            lstm_hidden: 8,
            dropout_p: 0.8,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "lowercase")]
pub enum ModelSpec {
    MsResNet(MsResNetConfig),
    LstmFcn(LstmFcnConfig),
}

impl ModelSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelSpec::MsResNet(_) => "msresnet",
            ModelSpec::LstmFcn(_) => "lstmfcn",
        }
    }

    pub fn train_config(&self) -> &TrainConfig {
        match self {
            ModelSpec::MsResNet(c) => &c.train,
            ModelSpec::LstmFcn(c) => &c.train,
        }
    }

    /// Model-specific input preparation (resampling for the ResNet).
    pub fn prepare<'a>(&self, dataset: &'a Dataset) -> Result<Cow<'a, Dataset>> {
        match self {
            ModelSpec::MsResNet(c) if dataset.series_length() != c.input_length && !dataset.is_empty() => {
                Ok(Cow::Owned(dataset.resample(c.input_length)?))
            }
            _ => Ok(Cow::Borrowed(dataset)),
        }
    }

    /// Register the parameters in `store` and return the network.
    pub fn build(
        &self,
        num_channels: usize,
        series_length: usize,
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn Network>> {
        Ok(match self {
            ModelSpec::MsResNet(c) => Box::new(MsResNet::new(c, num_channels, num_classes, store, rng)?),
            ModelSpec::LstmFcn(c) => Box::new(LstmFcn::new(c, num_channels, series_length, num_classes, store, rng)?),
        })
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub logits: Var,
    /// Concatenated branch embeddings (ResNet only), used by the triplet term.
    pub embedding: Option<Var>,
    /// Per-branch pooled features (ResNet only).
    pub branches: Vec<Var>,
    /// Output of the shared stem (ResNet only).
    pub stem: Option<Var>,
}

pub trait Network: Send + Sync {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Outputs>;
}

/// Stack the given samples into an `(N, C, L)` tensor.
pub fn batch_tensor(dataset: &Dataset, indices: &[usize]) -> Tensor {
    let (c, l) = (dataset.num_channels(), dataset.series_length());
    let mut data = Vec::with_capacity(indices.len() * c * l);
    for &i in indices {
        data.extend(dataset.sample(i).values.iter());
    }
    Tensor::new(&[indices.len(), c, l], data).expect("samples share one shape")
}
