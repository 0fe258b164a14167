//! Exploratory statistics: per-sample channel summaries and class-conditional
//! mean/variance curves, exported as long-format CSV.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{argument, Error, Result};
use crate::io::{format_f64, write_atomic};

/// Per-sample statistics, each shaped `(samples, channels)`. Variances are
/// population variances over the time axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channel_names: Vec<String>,
    pub per_sample_mean: Array2<f64>,
    pub per_sample_variance: Array2<f64>,
    pub per_sample_range: Array2<f64>,
}

/// Mean and population variance across the samples of each class at every
/// time index, shaped `(classes, channels, length)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub channel_names: Vec<String>,
    pub class_mean_curves: Array3<f64>,
    pub class_var_curves: Array3<f64>,
}

fn mean_var(v: ArrayView1<f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn channel_stats(dataset: &Dataset) -> Result<ChannelStats> {
    if dataset.is_empty() {
        return argument("channel statistics need a non-empty dataset");
    }
    let (n, c) = (dataset.len(), dataset.num_channels());
    let mut mean = Array2::zeros((n, c));
    let mut var = Array2::zeros((n, c));
    let mut range = Array2::zeros((n, c));
    for (i, s) in dataset.samples().iter().enumerate() {
        for (ch, row) in s.values.rows().into_iter().enumerate() {
            let (m, v) = mean_var(row);
            let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            mean[[i, ch]] = m;
            var[[i, ch]] = v;
            range[[i, ch]] = hi - lo;
        }
    }
    Ok(ChannelStats {
        channel_names: dataset.channel_names().to_vec(),
        per_sample_mean: mean,
        per_sample_variance: var,
        per_sample_range: range,
    })
}

pub fn class_stats(dataset: &Dataset) -> Result<ClassStats> {
    let (k, c, l) = (dataset.num_classes(), dataset.num_channels(), dataset.series_length());
    let hist = dataset.class_histogram();
    for class in 0..k {
        let count = hist.get(&class).copied().unwrap_or(0);
        if count < 2 {
            return argument(format!("class {class} has {count} samples, need at least 2"));
        }
    }
    let mut mean = Array3::zeros((k, c, l));
    for s in dataset.samples() {
        let mut slot = mean.index_axis_mut(ndarray::Axis(0), s.label);
        slot += &s.values;
    }
    for class in 0..k {
        let mut slot = mean.index_axis_mut(ndarray::Axis(0), class);
        slot /= hist[&class] as f64;
    }
    let mut var = Array3::zeros((k, c, l));
    for s in dataset.samples() {
        let centred = &s.values - &mean.index_axis(ndarray::Axis(0), s.label);
        let mut slot = var.index_axis_mut(ndarray::Axis(0), s.label);
        slot += &centred.mapv(|d| d * d);
    }
    for class in 0..k {
        let mut slot = var.index_axis_mut(ndarray::Axis(0), class);
        slot /= hist[&class] as f64;
    }
    Ok(ClassStats { channel_names: dataset.channel_names().to_vec(), class_mean_curves: mean, class_var_curves: var })
}

/// One line of the long-format statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub entity: String,
    pub channel: String,
    pub index: usize,
    pub statistic: String,
    pub value: f64,
}

pub trait LongTable {
    fn rows(&self) -> Vec<StatRow>;
}

impl LongTable for ChannelStats {
    /// `entity` is `sample`, `index` the sample index.
    fn rows(&self) -> Vec<StatRow> {
        let mut out = Vec::new();
        for i in 0..self.per_sample_mean.nrows() {
            for (ch, name) in self.channel_names.iter().enumerate() {
                for (stat, m) in
                    [("mean", &self.per_sample_mean), ("variance", &self.per_sample_variance), ("range", &self.per_sample_range)]
                {
                    out.push(StatRow {
                        entity: "sample".into(),
                        channel: name.clone(),
                        index: i,
                        statistic: stat.into(),
                        value: m[[i, ch]],
                    });
                }
            }
        }
        out
    }
}

impl LongTable for ClassStats {
    /// `entity` is `class_<k>`, `index` the time index.
    fn rows(&self) -> Vec<StatRow> {
        let (k, c, l) = self.class_mean_curves.dim();
        let mut out = Vec::with_capacity(2 * k * c * l);
        for class in 0..k {
            for ch in 0..c {
                for t in 0..l {
                    for (stat, m) in [("mean", &self.class_mean_curves), ("variance", &self.class_var_curves)] {
                        out.push(StatRow {
                            entity: format!("class_{class}"),
                            channel: self.channel_names[ch].clone(),
                            index: t,
                            statistic: stat.into(),
                            value: m[[class, ch, t]],
                        });
                    }
                }
            }
        }
        out
    }
}

pub const STATS_HEADER: &str = "entity,channel,index,statistic,value";

pub fn export_stats(stats: &dyn LongTable, path: &Path) -> Result<()> {
    let rows = stats.rows();
    write_atomic(path, |w| {
        writeln!(w, "{STATS_HEADER}")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{}", r.entity, r.channel, r.index, r.statistic, format_f64(r.value))?;
        }
        Ok(())
    })
}

pub fn read_stats(path: &Path) -> Result<Vec<StatRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(STATS_HEADER) {
        return Err(Error::Format(format!("expected header {STATS_HEADER:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Dimension(format!("line {row} has {} fields, expected 5", f.len())));
            }
            let parse_err = |column: usize| Error::Parse { row, column, message: format!("bad field {:?}", f[column - 1]) };
            Ok(StatRow {
                entity: f[0].to_string(),
                channel: f[1].to_string(),
                index: f[2].parse().map_err(|_| parse_err(3))?,
                statistic: f[3].to_string(),
                value: f[4].parse().map_err(|_| parse_err(5))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{default_channel_names, generic_class_names, Sample};
    use ndarray::array;

    fn ds(samples: Vec<Sample>, k: usize) -> Dataset {
        let c = samples[0].num_channels();
        Dataset::new(samples, generic_class_names(k), default_channel_names(c), 1.0).unwrap()
    }

    #[test]
    fn constant_and_two_point_samples() {
        let d = ds(vec![Sample::new(array![[3.0, 3.0, 3.0]], 0), Sample::new(array![[1.0, -1.0, 1.0]], 0)], 1);
        let s = channel_stats(&d).unwrap();
        assert_eq!((s.per_sample_mean[[0, 0]], s.per_sample_variance[[0, 0]], s.per_sample_range[[0, 0]]), (3.0, 0.0, 0.0));
        let two = ds(vec![Sample::new(array![[1.0, -1.0]], 0)], 1);
        let s = channel_stats(&two).unwrap();
        assert_eq!((s.per_sample_mean[[0, 0]], s.per_sample_variance[[0, 0]], s.per_sample_range[[0, 0]]), (0.0, 1.0, 2.0));
    }

    #[test]
    fn class_curves_two_point_case() {
        let d = ds(vec![Sample::new(array![[0.0, 5.0]], 0), Sample::new(array![[2.0, 5.0]], 0)], 1);
        let s = class_stats(&d).unwrap();
        assert_eq!(s.class_mean_curves[[0, 0, 0]], 1.0);
        assert_eq!(s.class_var_curves[[0, 0, 0]], 1.0);
        assert_eq!(s.class_var_curves[[0, 0, 1]], 0.0);
        let lonely = ds(vec![Sample::new(array![[0.0, 1.0]], 0), Sample::new(array![[0.0, 1.0]], 1)], 2);
        assert!(matches!(class_stats(&lonely), Err(Error::Argument(_))));
    }

    #[test]
    fn one_sample_exports_nine_rows() {
        let d = ds(vec![Sample::new(Array2::from_elem((3, 4), 1.5), 0)], 1);
        assert_eq!(channel_stats(&d).unwrap().rows().len(), 9);
    }
}
