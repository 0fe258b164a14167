//! Probability matrices, the average and max combination rules, and the
//! per-fold probability CSV format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{argument, dimension, Error, Result};
use crate::io::{format_f64, write_atomic};

/// Samples by classes. Produced models emit row-stochastic matrices; the
/// combination rules also accept unnormalised scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub values: Array2<f64>,
    pub model_tag: String,
}

impl ProbabilityMatrix {
    /// Checked constructor: entries in `[0, 1]`, rows summing to 1 within 1e-6.
    pub fn new(values: Array2<f64>, model_tag: impl Into<String>) -> Result<Self> {
        for (i, row) in values.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return argument(format!("row {i} has an entry outside [0, 1]"));
            }
            let s = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return argument(format!("row {i} sums to {s}"));
            }
        }
        Ok(Self { values, model_tag: model_tag.into() })
    }

    /// Row-wise softmax of `scores / temperature`.
    pub fn softmax(scores: &Array2<f64>, temperature: f64, model_tag: impl Into<String>) -> Self {
        let mut values = scores / temperature;
        for mut row in values.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        Self { values, model_tag: model_tag.into() }
    }

    pub fn num_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn predict(&self) -> Vec<usize> {
        predict(&self.values)
    }
}

/// Row argmax; ties go to the lowest class index.
pub fn predict(values: &Array2<f64>) -> Vec<usize> {
    values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_aligned(mats: &[ProbabilityMatrix]) -> Result<(usize, usize)> {
    let Some(first) = mats.first() else {
        return argument("need at least one probability matrix");
    };
    let shape = first.values.dim();
    for m in mats {
        if m.values.dim() != shape {
            return dimension(format!("matrix {:?} has shape {:?}, expected {:?}", m.model_tag, m.values.dim(), shape));
        }
    }
    Ok(shape)
}

/// Combine entry by entry with `f` over the models' values, sorted so the
/// result does not depend on the order of the inputs.
fn combine(mats: &[ProbabilityMatrix], f: impl Fn(&[f64]) -> f64) -> Result<Array2<f64>> {
    let shape = check_aligned(mats)?;
    let mut buf = vec![0.0; mats.len()];
    Ok(Array2::from_shape_fn(shape, |ij| {
        for (b, m) in buf.iter_mut().zip(mats) {
            *b = m.values[ij];
        }
        buf.sort_by(f64::total_cmp);
        f(&buf)
    }))
}

pub fn ensemble_average(mats: &[ProbabilityMatrix]) -> Result<ProbabilityMatrix> {
    let k = mats.len() as f64;
    let values = combine(mats, |v| v.iter().sum::<f64>() / k)?;
    Ok(ProbabilityMatrix { values, model_tag: "ensemble_average".into() })
}

/// Per-class maximum over models (not renormalised) and its row argmax.
pub fn ensemble_max(mats: &[ProbabilityMatrix]) -> Result<(Array2<f64>, Vec<usize>)> {
    let scores = combine(mats, |v| v[v.len() - 1])?;
    let pred = predict(&scores);
    Ok((scores, pred))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleRule {
    Average,
    Max,
}

impl EnsembleRule {
    pub fn tag(self) -> &'static str {
        match self {
            EnsembleRule::Average => "ensemble_average",
            EnsembleRule::Max => "ensemble_max",
        }
    }
}

impl fmt::Display for EnsembleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleRule::Average => "average",
            EnsembleRule::Max => "max",
        })
    }
}

impl FromStr for EnsembleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(EnsembleRule::Average),
            "max" => Ok(EnsembleRule::Max),
            _ => argument(format!("unknown ensemble rule {s:?} (expected average or max)")),
        }
    }
}

/// Combine persisted per-model tables that cover the same samples in the
/// same order.
pub fn combine_tables(tables: &[ProbabilityTable], rule: EnsembleRule) -> Result<ProbabilityTable> {
    let first = tables.first().ok_or_else(|| Error::Argument("no probability tables to combine".into()))?;
    for t in &tables[1..] {
        if t.values.dim() != first.values.dim() {
            return dimension(format!("{} is {:?} but {} is {:?}", first.model_tag, first.values.dim(), t.model_tag, t.values.dim()));
        }
        if t.sample_indices != first.sample_indices || t.truth != first.truth {
            return dimension(format!("{} and {} list different samples", first.model_tag, t.model_tag));
        }
    }
    let mats: Vec<ProbabilityMatrix> = tables.iter().map(ProbabilityTable::matrix).collect();
    let (values, predictions) = match rule {
        EnsembleRule::Average => {
            let m = ensemble_average(&mats)?;
            let p = m.predict();
            (m.values, p)
        }
        EnsembleRule::Max => ensemble_max(&mats)?,
    };
    ProbabilityTable::from_scores(first.sample_indices.clone(), values, predictions, first.truth.clone(), rule.tag().into())
}

/// Contents of a probability CSV: `sample_index,p_0..p_{K-1},pred,true`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    pub sample_indices: Vec<usize>,
    pub values: Array2<f64>,
    pub predictions: Vec<usize>,
    pub truth: Vec<usize>,
    pub model_tag: String,
}

impl ProbabilityTable {
    pub fn new(sample_indices: Vec<usize>, mat: &ProbabilityMatrix, truth: Vec<usize>) -> Result<Self> {
        Self::from_scores(sample_indices, mat.values.clone(), mat.predict(), truth, mat.model_tag.clone())
    }

    pub fn from_scores(
        sample_indices: Vec<usize>,
        values: Array2<f64>,
        predictions: Vec<usize>,
        truth: Vec<usize>,
        model_tag: String,
    ) -> Result<Self> {
        let n = values.nrows();
        if sample_indices.len() != n || predictions.len() != n || truth.len() != n {
            return dimension(format!(
                "{} rows but {} indices, {} predictions, {} labels",
                n,
                sample_indices.len(),
                predictions.len(),
                truth.len()
            ));
        }
        Ok(Self { sample_indices, values, predictions, truth, model_tag })
    }

    pub fn matrix(&self) -> ProbabilityMatrix {
        ProbabilityMatrix { values: self.values.clone(), model_tag: self.model_tag.clone() }
    }

    pub fn accuracy_percent(&self) -> f64 {
        let hits = self.predictions.iter().zip(&self.truth).filter(|(p, t)| p == t).count();
        100.0 * hits as f64 / self.truth.len().max(1) as f64
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let k = self.values.ncols();
        write_atomic(path, |w| {
            let mut header = String::from("sample_index");
            for j in 0..k {
                header.push_str(&format!(",p_{j}"));
            }
            writeln!(w, "{header},pred,true")?;
            for (i, row) in self.values.rows().into_iter().enumerate() {
                let mut line = self.sample_indices[i].to_string();
                for v in row {
                    line.push(',');
                    line.push_str(&format_f64(*v));
                }
                writeln!(w, "{line},{},{}", self.predictions[i], self.truth[i])?;
            }
            Ok(())
        })
    }

    /// Parse a probability CSV; the model tag becomes the file stem.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let k = header.len().saturating_sub(3);
        let well_formed = header.len() >= 4
            && header[0] == "sample_index"
            && header[header.len() - 2] == "pred"
            && header[header.len() - 1] == "true"
            && (0..k).all(|j| header[1 + j] == format!("p_{j}"));
        if !well_formed {
            return Err(Error::Format(format!("{}: expected header sample_index,p_0..p_K-1,pred,true", path.display())));
        }
        let (mut idx, mut vals, mut pred, mut truth) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let row = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != k + 3 {
                return dimension(format!("{}: line {row} has {} fields, expected {}", path.display(), f.len(), k + 3));
            }
            let parse_int = |column: usize| {
                f[column].parse::<usize>().map_err(|_| Error::Parse {
                    row,
                    column: column + 1,
                    message: format!("{:?} is not an index", f[column]),
                })
            };
            idx.push(parse_int(0)?);
            for (j, cell) in f[1..=k].iter().enumerate() {
                vals.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: j + 2,
                    message: format!("{cell:?} is not a number"),
                })?);
            }
            pred.push(parse_int(k + 1)?);
            truth.push(parse_int(k + 2)?);
        }
        let values = Array2::from_shape_vec((idx.len(), k), vals).expect("rows checked");
        let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_scores(idx, values, pred, truth, tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pm(values: Array2<f64>) -> ProbabilityMatrix {
        ProbabilityMatrix::new(values, "m").unwrap()
    }

    #[test]
    fn worked_example() {
        let a = pm(array![[0.6, 0.4]]);
        let b = pm(array![[0.2, 0.8]]);
        let avg = ensemble_average(&[a.clone(), b.clone()]).unwrap();
        assert!((avg.values[[0, 0]] - 0.4).abs() < 1e-15 && (avg.values[[0, 1]] - 0.6).abs() < 1e-15);
        assert_eq!(avg.predict(), vec![1]);
        let (scores, pred) = ensemble_max(&[a, b]).unwrap();
        assert_eq!(scores, array![[0.6, 0.8]]);
        assert_eq!(pred, vec![1]);
    }

    #[test]
    fn ties_and_one_hot() {
        assert_eq!(predict(&array![[0.25, 0.25, 0.25, 0.25]]), vec![0]);
        assert_eq!(predict(&array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), vec![1, 2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ensemble_average(&[]).is_err());
        let a = pm(array![[0.5, 0.5]]);
        let b = pm(array![[0.5, 0.5], [1.0, 0.0]]);
        assert!(matches!(ensemble_max(&[a, b]), Err(Error::Dimension(_))));
        assert!(ProbabilityMatrix::new(array![[0.7, 0.7]], "x").is_err());
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let p = ProbabilityMatrix::softmax(&array![[1000.0, 1000.0], [0.0, -3.0]], 1.0, "s");
        assert_eq!(p.values.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((p.values.row(1).sum() - 1.0).abs() < 1e-12);
    }
}
