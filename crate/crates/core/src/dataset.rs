//! Labelled multichannel time series: data model, CSV interchange, resampling,
//! noise augmentation and fold planning.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, dimension, Error, Result};
use crate::io::{format_f64, write_atomic};

/// Class names of the planetary gearbox data, in label order.
pub const GEARBOX_CLASS_NAMES: [&str; 5] = ["Normal", "Crack", "Surface Wear", "Chipped", "Tooth Missing"];

/// Default axis names for tri-axial accelerometer data.
pub const XYZ: [&str; 3] = ["x", "y", "z"];

pub const DEFAULT_SAMPLING_RATE_HZ: f64 = 10_000.0;

/// One labelled series, `values` shaped `(channels, length)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Array2<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(values: Array2<f64>, label: usize) -> Self {
        Self { values, label }
    }

    pub fn num_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    channel_names: Vec<String>,
    sampling_rate_hz: f64,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, channel_names: Vec<String>, sampling_rate_hz: f64) -> Result<Self> {
        if !(sampling_rate_hz > 0.0 && sampling_rate_hz.is_finite()) {
            return argument(format!("sampling rate {sampling_rate_hz} must be positive"));
        }
        if let Some(first) = samples.first() {
            let (c, l) = first.values.dim();
            for (i, s) in samples.iter().enumerate() {
                if s.values.dim() != (c, l) {
                    return dimension(format!("sample {i} has shape {:?}, expected {:?}", s.values.dim(), (c, l)));
                }
                if s.label >= class_names.len() {
                    return argument(format!("sample {i} has label {} but only {} classes are named", s.label, class_names.len()));
                }
                if s.values.iter().any(|v| !v.is_finite()) {
                    return argument(format!("sample {i} contains a non-finite value"));
                }
            }
            if channel_names.len() != c {
                return dimension(format!("{} channel names for {c}-channel samples", channel_names.len()));
            }
        }
        Ok(Self { samples, class_names, channel_names, sampling_rate_hz })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Common length of every series (0 for an empty dataset).
    pub fn series_length(&self) -> usize {
        self.samples.first().map_or(0, Sample::len)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.label).or_insert(0) += 1;
        }
        h
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            channel_names: self.channel_names.clone(),
            sampling_rate_hz: self.sampling_rate_hz,
        }
    }

    /// Samples of `self` followed by those of `other`.
    pub fn concatenate(&self, other: &Dataset) -> Result<Dataset> {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        let names = if self.class_names.len() >= other.class_names.len() { &self.class_names } else { &other.class_names };
        Dataset::new(samples, names.clone(), self.channel_names.clone(), self.sampling_rate_hz)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if let Some(max) = self.samples.iter().map(|s| s.label).max() {
            if max >= names.len() {
                return argument(format!("label {max} has no name among {} classes", names.len()));
            }
        }
        self.class_names = names;
        Ok(self)
    }

    /// Every sample resampled to `target_length` points.
    pub fn resample(&self, target_length: usize) -> Result<Dataset> {
        let samples = self.samples.iter().map(|s| resample_linear(s, target_length)).collect::<Result<_>>()?;
        Ok(Dataset { samples, ..self.clone_meta() })
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            class_names: self.class_names.clone(),
            channel_names: self.channel_names.clone(),
            sampling_rate_hz: self.sampling_rate_hz,
        }
    }
}

/// `class_0`, `class_1`, ... for data without class metadata.
pub fn generic_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Channel names for `c` channels: `x, y, z` for three, `ch0, ch1, ...` otherwise.
pub fn default_channel_names(c: usize) -> Vec<String> {
    if c == 3 {
        XYZ.iter().map(|s| s.to_string()).collect()
    } else {
        (0..c).map(|i| format!("ch{i}")).collect()
    }
}

/// Read the CSV interchange format: a `label` column followed by
/// `num_channels` blocks of `series_length` columns named `<channel>_<t>`.
/// Error positions use 1-based file lines (the header is line 1) and columns.
pub fn load_csv(path: &Path, series_length: usize, num_channels: usize) -> Result<Dataset> {
    if series_length == 0 || num_channels == 0 {
        return argument("series length and channel count must be positive");
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Format("empty file, expected a header row".into()));
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected_cols = 1 + series_length * num_channels;
    if cols.first() != Some(&"label") {
        return Err(Error::Format(format!("column 1 is {:?}, expected \"label\"", cols.first().unwrap_or(&""))));
    }
    if cols.len() != expected_cols {
        return dimension(format!(
            "header has {} columns, expected {expected_cols} for {num_channels} channels of length {series_length}",
            cols.len()
        ));
    }
    let mut channel_names = Vec::with_capacity(num_channels);
    for ch in 0..num_channels {
        let first_col = 1 + ch * series_length;
        let Some(name) = cols[first_col].strip_suffix("_0") else {
            return Err(Error::Format(format!("column {} is {:?}, expected <channel>_0", first_col + 1, cols[first_col])));
        };
        for t in 0..series_length {
            let want = format!("{name}_{t}");
            if cols[first_col + t] != want {
                return Err(Error::Format(format!("column {} is {:?}, expected {want:?}", first_col + t + 1, cols[first_col + t])));
            }
        }
        channel_names.push(name.to_string());
    }

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected_cols {
            return dimension(format!("line {row} has {} fields, expected {expected_cols}", cells.len()));
        }
        let label: usize = cells[0].trim().parse().map_err(|_| Error::Parse {
            row,
            column: 1,
            message: format!("label {:?} is not a non-negative integer", cells[0]),
        })?;
        let mut values = Vec::with_capacity(expected_cols - 1);
        for (j, cell) in cells[1..].iter().enumerate() {
            let v: f64 =
                cell.trim().parse().map_err(|_| Error::Parse { row, column: j + 2, message: format!("{cell:?} is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: j + 2, message: format!("{cell:?} is not finite") });
            }
            values.push(v);
        }
        let values = Array2::from_shape_vec((num_channels, series_length), values).expect("row length checked");
        samples.push(Sample { values, label });
    }
    let k = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    Dataset::new(samples, generic_class_names(k), channel_names, DEFAULT_SAMPLING_RATE_HZ)
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.is_empty() {
        return argument("refusing to save an empty dataset");
    }
    let len = dataset.series_length();
    write_atomic(path, |w| {
        let mut header = String::from("label");
        for name in dataset.channel_names() {
            for t in 0..len {
                header.push_str(&format!(",{name}_{t}"));
            }
        }
        writeln!(w, "{header}")?;
        for s in dataset.samples() {
            let mut line = s.label.to_string();
            for v in s.values.iter() {
                line.push(',');
                line.push_str(&format_f64(*v));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    })
}

/// Linear interpolation of every channel onto `target_length` evenly spaced
/// positions; output `j` samples the input at `j (L - 1) / (T - 1)`.
pub fn resample_linear(sample: &Sample, target_length: usize) -> Result<Sample> {
    let len = sample.len();
    if target_length < 2 {
        return argument(format!("target length {target_length} must be at least 2"));
    }
    if len < 2 {
        return argument(format!("series of length {len} cannot be interpolated"));
    }
    let c = sample.num_channels();
    let mut out = Array2::zeros((c, target_length));
    for ch in 0..c {
        let src = sample.values.row(ch);
        for j in 0..target_length {
            let pos = (j * (len - 1)) as f64 / (target_length - 1) as f64;
            let i0 = pos.floor() as usize;
            out[[ch, j]] = if i0 >= len - 1 {
                src[len - 1]
            } else {
                let frac = pos - i0 as f64;
                let (a, b) = (src[i0], src[i0 + 1]);
                (a + frac * (b - a)).clamp(a.min(b), a.max(b))
            };
        }
    }
    Ok(Sample { values: out, label: sample.label })
}

/// Add i.i.d. uniform noise in `[-amplitude, amplitude]` to every value.
pub fn augment_bounded_noise(dataset: &Dataset, amplitude: f64, seed: u64) -> Result<Dataset> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return argument(format!("noise amplitude {amplitude} must be a non-negative number"));
    }
    if amplitude == 0.0 {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = dataset
        .samples
        .iter()
        .map(|s| Sample { values: s.values.mapv(|v| v + rng.random_range(-amplitude..=amplitude)), label: s.label })
        .collect();
    Ok(Dataset { samples, ..dataset.clone_meta() })
}

/// Train/validation/test indices of one fold, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub seed: u64,
    /// (train, validation, test)
    pub fractions: (f64, f64, f64),
    pub stratified: bool,
    pub num_samples: usize,
}

impl SplitPlan {
    /// Check the partition invariants against a dataset size.
    pub fn validate(&self, num_samples: usize) -> Result<()> {
        let mut seen_test = vec![false; num_samples];
        for (k, fold) in self.folds.iter().enumerate() {
            let mut seen = vec![false; num_samples];
            for &i in fold.train.iter().chain(&fold.val).chain(&fold.test) {
                if i >= num_samples || seen[i] {
                    return argument(format!("fold {k}: index {i} out of range or repeated"));
                }
                seen[i] = true;
            }
            if seen.iter().any(|s| !s) {
                return argument(format!("fold {k} does not cover every sample"));
            }
            for &i in &fold.test {
                if seen_test[i] {
                    return argument(format!("index {i} is in the test set of two folds"));
                }
                seen_test[i] = true;
            }
        }
        Ok(())
    }
}

/// `(floor, fractional part)` with values within 1e-9 of an integer snapped to it.
fn split_real(x: f64) -> (usize, f64) {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        (r.max(0.0) as usize, 0.0)
    } else {
        (x.floor().max(0.0) as usize, x - x.floor())
    }
}

/// Seeded k-fold plan. Fold `k` tests on the `k`-th contiguous block of a
/// single seeded permutation (per class when stratified); the remainder is
/// split between training and validation in the ratio of their fractions.
pub fn make_split_plan(dataset: &Dataset, num_folds: usize, fractions: (f64, f64, f64), seed: u64, stratified: bool) -> Result<SplitPlan> {
    let (f_train, f_val, f_test) = fractions;
    if num_folds == 0 {
        return argument("need at least one fold");
    }
    if [f_train, f_val, f_test].iter().any(|f| !(0.0..=1.0).contains(f)) {
        return argument(format!("fractions {fractions:?} must lie in [0, 1]"));
    }
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return argument(format!("fractions {fractions:?} do not sum to 1"));
    }
    if f_test <= 0.0 || num_folds as f64 * f_test > 1.0 + 1e-9 {
        return argument(format!("{num_folds} folds with test fraction {f_test} do not tile the data"));
    }
    let n = dataset.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let groups: Vec<Vec<usize>> = if stratified {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &perm {
            by_class.entry(dataset.samples[i].label).or_default().push(i);
        }
        by_class.into_values().collect()
    } else {
        vec![perm]
    };

    let mut folds = Vec::with_capacity(num_folds);
    for k in 0..num_folds {
        let mut test = Vec::new();
        let mut rests = Vec::with_capacity(groups.len());
        // (group, forced val count, optional free +1 priority)
        let mut val_counts = Vec::with_capacity(groups.len());
        let mut free = Vec::new();
        for (gi, list) in groups.iter().enumerate() {
            let nc = list.len();
            let bound = |j: usize| ((j as f64 * nc as f64 * f_test).round() as usize).min(nc);
            let (lo, hi) = (bound(k), bound(k + 1));
            test.extend_from_slice(&list[lo..hi]);
            let rest: Vec<usize> = list[hi..].iter().chain(&list[..lo]).copied().collect();

            // Pick the validation count so that both it and the training count
            // are the floor or ceiling of their share of the class.
            let (v_floor, v_frac) = split_real(nc as f64 * f_val);
            let (t_floor, t_frac) = split_real(nc as f64 * f_train);
            let fits = |v: usize| {
                v <= rest.len() && {
                    let t = rest.len() - v;
                    t == t_floor || (t_frac > 0.0 && t == t_floor + 1)
                }
            };
            let lo_ok = fits(v_floor);
            let hi_ok = v_frac > 0.0 && fits(v_floor + 1);
            let v = match (lo_ok, hi_ok) {
                (true, true) => {
                    free.push((gi, v_frac));
                    v_floor
                }
                (true, false) => v_floor,
                (false, true) => v_floor + 1,
                (false, false) => {
                    let share = if f_train + f_val > 0.0 { f_val / (f_train + f_val) } else { 0.0 };
                    ((rest.len() as f64 * share).round() as usize).min(rest.len())
                }
            };
            val_counts.push(v);
            rests.push(rest);
        }
        // Hand the remaining validation slots to the classes with the largest
        // fractional shares.
        let target = split_real(n as f64 * f_val).0 + usize::from(split_real(n as f64 * f_val).1 >= 0.5);
        let mut current: usize = val_counts.iter().sum();
        free.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (gi, _) in free {
            if current >= target {
                break;
            }
            val_counts[gi] += 1;
            current += 1;
        }
        let mut val = Vec::new();
        let mut train = Vec::new();
        for (rest, v) in rests.iter().zip(val_counts) {
            val.extend_from_slice(&rest[..v]);
            train.extend_from_slice(&rest[v..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        folds.push(Fold { train, val, test });
    }
    let plan = SplitPlan { folds, seed, fractions, stratified, num_samples: n };
    plan.validate(n)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn toy(labels: &[usize], len: usize) -> Dataset {
        let k = labels.iter().max().map_or(1, |m| m + 1);
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Sample::new(Array2::from_shape_fn((3, len), |(c, t)| (i * 7 + c * 3 + t) as f64 * 0.25), l))
            .collect();
        Dataset::new(samples, generic_class_names(k), default_channel_names(3), 10_000.0).unwrap()
    }

    #[test]
    fn rejects_invalid_datasets() {
        let s = Sample::new(Array2::zeros((3, 4)), 2);
        assert!(Dataset::new(vec![s.clone()], generic_class_names(2), default_channel_names(3), 1.0).is_err());
        assert!(Dataset::new(vec![s.clone()], generic_class_names(3), default_channel_names(2), 1.0).is_err());
        let mut bad = s.clone();
        bad.values[[0, 0]] = f64::NAN;
        assert!(Dataset::new(vec![bad], generic_class_names(3), default_channel_names(3), 1.0).is_err());
        let short = Sample::new(Array2::zeros((3, 5)), 0);
        assert!(Dataset::new(vec![s, short], generic_class_names(3), default_channel_names(3), 1.0).is_err());
    }

    #[test]
    fn resample_two_points_to_three() {
        let s = Sample::new(array![[0.0, 1.0]], 4);
        let r = resample_linear(&s, 3).unwrap();
        assert_eq!(r.values, array![[0.0, 0.5, 1.0]]);
        assert_eq!(r.label, 4);
        assert!(resample_linear(&s, 1).is_err());
    }

    #[test]
    fn resample_to_same_length_is_identity() {
        let s = Sample::new(Array2::from_shape_fn((3, 200), |(c, t)| ((c * 200 + t) as f64).sin()), 0);
        assert_eq!(resample_linear(&s, 200).unwrap(), s);
    }

    proptest! {
        #[test]
        fn resample_is_bounded_and_keeps_endpoints(values in prop::collection::vec(-1e3f64..1e3, 200)) {
            let s = Sample::new(Array2::from_shape_vec((1, 200), values.clone()).unwrap(), 0);
            let r = resample_linear(&s, 512).unwrap();
            let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            prop_assert_eq!(r.values[[0, 0]], values[0]);
            prop_assert_eq!(r.values[[0, 511]], values[199]);
            prop_assert!(r.values.iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn split_plans_partition(n in 5usize..120, k in 1usize..6, seed in 0u64..1000, stratified: bool, classes in 1usize..5) {
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % classes).collect();
            let ds = toy(&labels, 2);
            let test = 1.0 / k as f64;
            let rest = 1.0 - test;
            let plan = make_split_plan(&ds, k, (rest * 0.875, rest * 0.125, test), seed, stratified).unwrap();
            prop_assert_eq!(plan.folds.len(), k);
            prop_assert!(plan.validate(n).is_ok());
            if k > 1 || !stratified {
                let tested: usize = plan.folds.iter().map(|f| f.test.len()).sum();
                prop_assert_eq!(tested, n);
            }
            if stratified {
                let hist = ds.class_histogram();
                for fold in &plan.folds {
                    for (set, frac) in [(&fold.train, rest * 0.875), (&fold.val, rest * 0.125), (&fold.test, test)] {
                        for (&c, &nc) in &hist {
                            let got = set.iter().filter(|&&i| labels[i] == c).count() as f64;
                            prop_assert!((got - nc as f64 * frac).abs() <= 1.0 + 1e-9,
                                "class {} has {} of {} in a subset of fraction {}", c, got, nc, frac);
                        }
                    }
                }
            }
        }

        #[test]
        fn noise_stays_within_amplitude(seed in 0u64..100, amp in 0.0f64..0.5) {
            let ds = toy(&[0, 1, 0, 1], 8);
            let noisy = augment_bounded_noise(&ds, amp, seed).unwrap();
            for (a, b) in ds.samples().iter().zip(noisy.samples()) {
                prop_assert_eq!(a.label, b.label);
                for (x, y) in a.values.iter().zip(b.values.iter()) {
                    prop_assert!((x - y).abs() <= amp + 1e-12);
                }
            }
        }
    }

    #[test]
    fn noise_is_seeded_and_zero_amplitude_is_exact() {
        let ds = toy(&[0, 1, 2], 10);
        assert_eq!(augment_bounded_noise(&ds, 0.0, 5).unwrap(), ds);
        let a = augment_bounded_noise(&ds, 0.1, 5).unwrap();
        assert_eq!(a, augment_bounded_noise(&ds, 0.1, 5).unwrap());
        assert_ne!(a, augment_bounded_noise(&ds, 0.1, 6).unwrap());
        let max = ds
            .samples()
            .iter()
            .zip(a.samples())
            .flat_map(|(x, y)| x.values.iter().zip(y.values.iter()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        assert!(max <= 0.1 && max > 0.0);
        assert!(augment_bounded_noise(&ds, -1.0, 0).is_err());
    }

    #[test]
    fn seventy_ten_twenty_on_one_hundred() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let ds = toy(&labels, 2);
        for stratified in [false, true] {
            let plan = make_split_plan(&ds, 5, (0.7, 0.1, 0.2), 42, stratified).unwrap();
            let mut all_test = Vec::new();
            for fold in &plan.folds {
                assert_eq!((fold.train.len(), fold.val.len(), fold.test.len()), (70, 10, 20));
                all_test.extend_from_slice(&fold.test);
                if stratified {
                    for c in 0..5 {
                        assert_eq!(fold.test.iter().filter(|&&i| labels[i] == c).count(), 4);
                        assert_eq!(fold.val.iter().filter(|&&i| labels[i] == c).count(), 2);
                        assert_eq!(fold.train.iter().filter(|&&i| labels[i] == c).count(), 14);
                    }
                }
            }
            all_test.sort_unstable();
            assert_eq!(all_test, (0..100).collect::<Vec<_>>());
        }
    }

    #[test]
    fn split_plan_argument_errors() {
        let ds = toy(&[0; 10], 2);
        assert!(make_split_plan(&ds, 5, (0.7, 0.1, 0.1), 0, false).is_err());
        assert!(make_split_plan(&ds, 6, (0.7, 0.1, 0.2), 0, false).is_err());
        assert!(make_split_plan(&ds, 0, (0.7, 0.1, 0.2), 0, false).is_err());
        let a = make_split_plan(&ds, 5, (0.7, 0.1, 0.2), 3, true).unwrap();
        assert_eq!(a, make_split_plan(&ds, 5, (0.7, 0.1, 0.2), 3, true).unwrap());
    }
}
