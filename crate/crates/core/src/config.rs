//! Whole-pipeline configuration, loadable from JSON with every field optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::io::{read_json, write_json};
use crate::linear::DEFAULT_ALPHAS;
use crate::minirocket::TransformConfig;
use crate::models::{LstmFcnConfig, MsResNetConfig};
use crate::synthgen::GenConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub num_folds: usize,
    /// (train, validation, test)
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { num_folds: 5, fractions: (0.7, 0.1, 0.2), seed: 0, stratified: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiniRocketConfig {
    pub transform: TransformConfig,
    pub alphas: Vec<f64>,
    pub temperature: f64,
    /// Fit the ridge on the training split alone and pick the softmax
    /// temperature on the validation split.
    pub tune_temperature: bool,
}

impl Default for MiniRocketConfig {
    fn default() -> Self {
        Self { transform: TransformConfig::default(), alphas: DEFAULT_ALPHAS.to_vec(), temperature: 1.0, tune_temperature: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: GenConfig,
    pub split: SplitConfig,
    pub minirocket: MiniRocketConfig,
    pub msresnet: MsResNetConfig,
    pub lstmfcn: LstmFcnConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Point every seeded component at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.split.seed = seed;
        self.minirocket.transform.seed = seed;
        self.msresnet.train.seed = seed;
        self.lstmfcn.train.seed = seed;
    }

    /// Hex SHA-256 of the compact JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
