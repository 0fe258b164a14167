//! MiniRocket: a fixed bank of 84 length-9 kernels with weights in {-1, 2},
//! exponentially spaced dilations, biases from quantiles of one training
//! example's convolution output, and proportion-of-positive-values pooling.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{argument, dimension, Result};
use crate::io::{read_json, write_json};

pub const NUM_KERNELS: usize = 84;
pub const KERNEL_LENGTH: usize = 9;

/// Samples by features, every entry in `[0, 1]`.
pub type FeatureMatrix = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    /// Indices of the three taps weighted 2, ascending.
    pub positions: Vec<[usize; 3]>,
    pub kernels: Vec<[f64; KERNEL_LENGTH]>,
}

/// All C(9, 3) kernels in lexicographic order of their weight-2 positions.
pub fn enumerate_kernels() -> KernelSet {
    let mut positions = Vec::with_capacity(NUM_KERNELS);
    for a in 0..KERNEL_LENGTH {
        for b in a + 1..KERNEL_LENGTH {
            for c in b + 1..KERNEL_LENGTH {
                positions.push([a, b, c]);
            }
        }
    }
    let kernels = positions
        .iter()
        .map(|p| {
            let mut w = [-1.0; KERNEL_LENGTH];
            for &i in p {
                w[i] = 2.0;
            }
            w
        })
        .collect();
    KernelSet { positions, kernels }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub num_features: usize,
    pub max_dilations_per_kernel: usize,
    pub seed: u64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self { num_features: 9996, max_dilations_per_kernel: 32, seed: 0 }
    }
}

impl TransformConfig {
    /// Feature count rounded down to a multiple of 84 (at least 84).
    pub fn effective_num_features(&self) -> usize {
        (self.num_features / NUM_KERNELS).max(1) * NUM_KERNELS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTransform {
    pub config: TransformConfig,
    pub input_length: usize,
    pub num_channels: usize,
    pub dilations: Vec<usize>,
    /// Features each kernel contributes at the matching dilation.
    pub features_per_dilation: Vec<usize>,
    /// Ordered dilation, then kernel, then quantile.
    pub biases: Vec<f64>,
    /// Indexed `dilation_index * 84 + kernel_index`, ascending channel ids.
    pub channel_subsets: Vec<Vec<usize>>,
    /// Same as `channel_subsets`; `true` also pools the border positions
    /// (series extended with its end values), `false` pools only positions
    /// where the kernel fits.
    pub paddings: Vec<bool>,
}

impl FittedTransform {
    pub fn num_features(&self) -> usize {
        self.biases.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Dilations `floor(2^e)` for `e` evenly spaced on `[0, log2((L-1)/8)]`,
/// deduplicated, with the per-kernel feature budget spread in proportion to
/// each dilation's multiplicity and the remainder handed out from the
/// smallest dilation upwards.
pub fn dilation_schedule(input_length: usize, features_per_kernel: usize, max_dilations: usize) -> (Vec<usize>, Vec<usize>) {
    let num = features_per_kernel.min(max_dilations).max(1);
    let max_exponent = (((input_length - 1) as f64) / (KERNEL_LENGTH - 1) as f64).log2().max(0.0);
    let mut dilations: Vec<usize> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..num {
        let e = if num == 1 { 0.0 } else { max_exponent * i as f64 / (num - 1) as f64 };
        let d = (2f64.powf(e).floor() as usize).max(1);
        if dilations.last() == Some(&d) {
            *counts.last_mut().expect("parallel to dilations") += 1;
        } else {
            dilations.push(d);
            counts.push(1);
        }
    }
    let multiplier = features_per_kernel as f64 / num as f64;
    let mut per: Vec<usize> = counts.iter().map(|&c| (c as f64 * multiplier) as usize).collect();
    let mut remainder = features_per_kernel - per.iter().sum::<usize>();
    let mut i = 0;
    while remainder > 0 {
        per[i] += 1;
        remainder -= 1;
        i = (i + 1) % per.len();
    }
    (dilations, per)
}

/// Padding rule: alternates with the dilation index and again with the
/// kernel index.
fn padded(dilation_index: usize, kernel_index: usize) -> bool {
    (dilation_index % 2 + kernel_index) % 2 == 0
}

/// Index of tap `j` around position `t`, with the series extended by
/// repeating its end values so that a constant offset cancels everywhere.
#[inline]
fn tap(t: isize, j: isize, d: usize, len: isize) -> usize {
    (t + (j - (KERNEL_LENGTH / 2) as isize) * d as isize).clamp(0, len - 1) as usize
}

/// Convolution of `z` with kernel `pos` at dilation `d`. With `keep_border`
/// the output has the input length; otherwise only the positions where the
/// kernel lies fully inside the series are returned.
fn convolve(z: &[f64], alpha: &[f64], pos: &[usize; 3], d: usize, keep_border: bool, out: &mut Vec<f64>) {
    let len = z.len() as isize;
    let half = (KERNEL_LENGTH / 2) as isize * d as isize;
    let (start, end) = if keep_border { (0, len) } else { (half, len - half) };
    out.clear();
    for t in start..end {
        let g = z[tap(t, pos[0] as isize, d, len)] + z[tap(t, pos[1] as isize, d, len)] + z[tap(t, pos[2] as isize, d, len)];
        out.push(3.0 * g - alpha[t as usize]);
    }
}

/// Sum of the nine dilated taps at each position.
fn tap_sums(z: &[f64], d: usize) -> Vec<f64> {
    let len = z.len() as isize;
    (0..len).map(|t| (0..KERNEL_LENGTH as isize).map(|j| z[tap(t, j, d, len)]).sum()).collect()
}

fn channel_sum(values: &Array2<f64>, subset: &[usize]) -> Vec<f64> {
    let mut z = vec![0.0; values.ncols()];
    for &ch in subset {
        for (acc, v) in z.iter_mut().zip(values.row(ch)) {
            *acc += v;
        }
    }
    z
}

fn subset_key(subset: &[usize]) -> u64 {
    subset.iter().fold(0, |m, &c| m | (1 << c))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (pos - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

pub fn fit(dataset: &Dataset, config: &TransformConfig) -> Result<FittedTransform> {
    if dataset.is_empty() {
        return argument("cannot fit MiniRocket on an empty dataset");
    }
    let len = dataset.series_length();
    if len < KERNEL_LENGTH {
        return argument(format!("series length {len} is shorter than the kernel length {KERNEL_LENGTH}"));
    }
    let c = dataset.num_channels();
    if c > 64 {
        return argument(format!("{c} channels exceed the supported maximum"));
    }
    let total = config.effective_num_features();
    let (dilations, features_per_dilation) = dilation_schedule(len, total / NUM_KERNELS, config.max_dilations_per_kernel);
    let kernels = enumerate_kernels();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut biases = Vec::with_capacity(total);
    let mut channel_subsets = Vec::new();
    let mut paddings = Vec::new();
    let mut conv = Vec::with_capacity(len);
    for (di, (&d, &m)) in dilations.iter().zip(&features_per_dilation).enumerate() {
        for (k, pos) in kernels.positions.iter().enumerate() {
            let size = rng.random_range(1..=c);
            let mut subset = sample_indices(&mut rng, c, size).into_vec();
            subset.sort_unstable();
            let example = rng.random_range(0..dataset.len());
            let keep_border = padded(di, k);
            let z = channel_sum(&dataset.sample(example).values, &subset);
            convolve(&z, &tap_sums(&z, d), pos, d, keep_border, &mut conv);
            conv.sort_by(f64::total_cmp);
            biases.extend((0..m).map(|q| quantile(&conv, (q + 1) as f64 / (m + 1) as f64)));
            channel_subsets.push(subset);
            paddings.push(keep_border);
        }
    }
    Ok(FittedTransform {
        config: config.clone(),
        input_length: len,
        num_channels: c,
        dilations,
        features_per_dilation,
        biases,
        channel_subsets,
        paddings,
    })
}

fn transform_one(fitted: &FittedTransform, positions: &[[usize; 3]], values: &Array2<f64>, row: &mut [f64]) {
    let mut sums: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut conv = Vec::with_capacity(fitted.input_length);
    let mut col = 0;
    for (di, (&d, &m)) in fitted.dilations.iter().zip(&fitted.features_per_dilation).enumerate() {
        let mut alphas: HashMap<u64, Vec<f64>> = HashMap::new();
        for (k, pos) in positions.iter().enumerate() {
            let idx = di * NUM_KERNELS + k;
            let subset = &fitted.channel_subsets[idx];
            let key = subset_key(subset);
            let z = sums.entry(key).or_insert_with(|| channel_sum(values, subset));
            let alpha = alphas.entry(key).or_insert_with(|| tap_sums(z, d));
            convolve(z, alpha, pos, d, fitted.paddings[idx], &mut conv);
            let inv = 1.0 / conv.len() as f64;
            for &b in &fitted.biases[col..col + m] {
                row[col] = conv.iter().filter(|&&v| v > b).count() as f64 * inv;
                col += 1;
            }
        }
    }
}

/// PPV features for every sample, one row per sample in dataset order.
pub fn transform(fitted: &FittedTransform, dataset: &Dataset) -> Result<FeatureMatrix> {
    if !dataset.is_empty() && (dataset.series_length() != fitted.input_length || dataset.num_channels() != fitted.num_channels) {
        return dimension(format!(
            "transform fitted on {} channels x {} points, got {} x {}",
            fitted.num_channels,
            fitted.input_length,
            dataset.num_channels(),
            dataset.series_length()
        ));
    }
    let positions = enumerate_kernels().positions;
    let f = fitted.num_features();
    let rows: Vec<Vec<f64>> = dataset
        .samples()
        .par_iter()
        .map(|s| {
            let mut row = vec![0.0; f];
            transform_one(fitted, &positions, &s.values, &mut row);
            row
        })
        .collect();
    Ok(Array2::from_shape_vec((rows.len(), f), rows.concat()).expect("rows have the feature count"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_bank() {
        let ks = enumerate_kernels();
        assert_eq!(ks.kernels.len(), 84);
        assert_eq!(ks.kernels[0], [2.0, 2.0, 2.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0]);
        assert_eq!(ks.positions[83], [6, 7, 8]);
        assert!(ks.kernels.iter().all(|k| k.iter().sum::<f64>() == 0.0));
    }

    #[test]
    fn schedule_for_length_200() {
        let (d, per) = dilation_schedule(200, 119, 32);
        assert_eq!(per.iter().sum::<usize>(), 119);
        assert_eq!(d[0], 1);
        assert!(d.windows(2).all(|w| w[0] < w[1]));
        assert!(d.iter().all(|&d| 8 * d < 200));
        assert_eq!(*d.last().unwrap(), 24);
    }

    #[test]
    fn schedule_for_minimum_length() {
        let (d, per) = dilation_schedule(9, 119, 32);
        assert_eq!(d, vec![1]);
        assert_eq!(per, vec![119]);
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let s = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&s, 0.5), 1.5);
        assert_eq!(quantile(&s, 1.0), 3.0);
        assert_eq!(quantile(&s, 0.0), 0.0);
    }
}
