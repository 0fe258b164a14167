//! Cross-validation driver, confusion matrices, fold summaries and report
//! files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{MiniRocketConfig, RunConfig};
use crate::dataset::{Dataset, Fold, SplitPlan};
use crate::ensemble::{combine_tables, EnsembleRule, ProbabilityMatrix, ProbabilityTable};
use crate::error::{argument, dimension, Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::linear::{self, RidgeModel};
use crate::minirocket::{self, FittedTransform};
use crate::models::{self, ModelSpec, TrainedModel};

/// Axis convention of every confusion matrix produced here.
pub const CONFUSION_AXES: &str = "rows=predicted,columns=truth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    MsResNet,
    LstmFcn,
    MiniRocket,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::MsResNet, Method::LstmFcn, Method::MiniRocket];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::MsResNet => "msresnet",
            Method::LstmFcn => "lstmfcn",
            Method::MiniRocket => "minirocket",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown model {s:?} (expected msresnet, lstmfcn or minirocket)")))
    }
}

/// Anything the cross-validation driver can fit and query.
pub trait Classifier {
    /// `val` may be used for model selection but never as test data.
    fn fit(&mut self, train: &Dataset, val: &Dataset) -> Result<()>;
    fn predict_proba(&self, test: &Dataset) -> Result<ProbabilityMatrix>;
    fn train_seconds(&self) -> Option<f64>;
    fn save(&self, path: &Path) -> Result<()>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MiniRocketArtifact {
    format: String,
    transform: FittedTransform,
    ridge: RidgeModel,
}

const MINIROCKET_FORMAT: &str = "minirocket-ridge/1";

/// MiniRocket features with a ridge head. Without temperature tuning the
/// transform and ridge see train and validation together; with it, the
/// validation split only picks the softmax temperature.
pub struct MiniRocketClassifier {
    pub config: MiniRocketConfig,
    fitted: Option<(FittedTransform, RidgeModel)>,
    seconds: Option<f64>,
}

impl MiniRocketClassifier {
    pub fn new(config: MiniRocketConfig) -> Self {
        Self { config, fitted: None, seconds: None }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let art: MiniRocketArtifact = read_json(path)?;
        if art.format != MINIROCKET_FORMAT {
            return Err(Error::Format(format!("{}: unsupported model format {:?}", path.display(), art.format)));
        }
        let config =
            MiniRocketConfig { transform: art.transform.config.clone(), temperature: art.ridge.temperature, ..MiniRocketConfig::default() };
        Ok(Self { config, fitted: Some((art.transform, art.ridge)), seconds: None })
    }

    pub fn fitted(&self) -> Option<(&FittedTransform, &RidgeModel)> {
        self.fitted.as_ref().map(|(t, r)| (t, r))
    }
}

fn not_fitted<T>() -> Result<T> {
    argument("classifier has not been fitted")
}

impl Classifier for MiniRocketClassifier {
    fn fit(&mut self, train: &Dataset, val: &Dataset) -> Result<()> {
        let start = Instant::now();
        let fit_set = if self.config.tune_temperature || val.is_empty() { train.clone() } else { train.concatenate(val)? };
        let transform = minirocket::fit(&fit_set, &self.config.transform)?;
        let features = minirocket::transform(&transform, &fit_set)?;
        let mut ridge = linear::fit_ridge(&features, &fit_set.labels(), fit_set.num_classes(), &self.config.alphas)?;
        ridge.temperature = if self.config.tune_temperature && !val.is_empty() {
            let vf = minirocket::transform(&transform, val)?;
            linear::tune_temperature(&ridge, &vf, &val.labels(), &linear::default_temperature_grid())?
        } else {
            self.config.temperature
        };
        self.fitted = Some((transform, ridge));
        self.seconds = Some(start.elapsed().as_secs_f64());
        Ok(())
    }

    fn predict_proba(&self, test: &Dataset) -> Result<ProbabilityMatrix> {
        let Some((transform, ridge)) = &self.fitted else { return not_fitted() };
        linear::predict_proba(ridge, &minirocket::transform(transform, test)?)
    }

    fn train_seconds(&self) -> Option<f64> {
        self.seconds
    }

    fn save(&self, path: &Path) -> Result<()> {
        let Some((transform, ridge)) = &self.fitted else { return not_fitted() };
        let art = MiniRocketArtifact { format: MINIROCKET_FORMAT.into(), transform: transform.clone(), ridge: ridge.clone() };
        write_json(path, &art)
    }
}

/// One of the deep networks, checkpointed on validation accuracy.
pub struct DeepClassifier {
    pub spec: ModelSpec,
    model: Option<TrainedModel>,
}

impl DeepClassifier {
    pub fn new(spec: ModelSpec) -> Self {
        Self { spec, model: None }
    }

    pub fn model(&self) -> Option<&TrainedModel> {
        self.model.as_ref()
    }
}

impl Classifier for DeepClassifier {
    fn fit(&mut self, train: &Dataset, val: &Dataset) -> Result<()> {
        self.model = Some(models::train(&self.spec, train, val)?);
        Ok(())
    }

    fn predict_proba(&self, test: &Dataset) -> Result<ProbabilityMatrix> {
        let Some(model) = &self.model else { return not_fitted() };
        models::predict_proba(model, test)
    }

    fn train_seconds(&self) -> Option<f64> {
        self.model.as_ref().map(|m| m.train_seconds)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let Some(model) = &self.model else { return not_fitted() };
        model.save(path)
    }
}

pub fn make_classifier(method: Method, config: &RunConfig) -> Box<dyn Classifier> {
    match method {
        Method::MsResNet => Box::new(DeepClassifier::new(ModelSpec::MsResNet(config.msresnet.clone()))),
        Method::LstmFcn => Box::new(DeepClassifier::new(ModelSpec::LstmFcn(config.lstmfcn.clone()))),
        Method::MiniRocket => Box::new(MiniRocketClassifier::new(config.minirocket.clone())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub method: String,
    pub accuracy_percent: f64,
    /// `confusion[predicted][truth]`, see `confusion_axes`.
    pub confusion: Vec<Vec<usize>>,
    pub confusion_axes: String,
    /// Absent for methods that are not trained (ensembles).
    pub train_seconds: Option<f64>,
    pub seed: String,
    pub config_hash: String,
}

impl FoldReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn test_size(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Counts indexed `[predicted][truth]`.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != pred.len() {
        return dimension(format!("{} labels but {} predictions", truth.len(), pred.len()));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= num_classes || p >= num_classes {
            return argument(format!("entry {i}: label {t} or prediction {p} is not below {num_classes}"));
        }
        m[p][t] += 1;
    }
    Ok(m)
}

pub fn confusion_accuracy_percent(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let hits: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    100.0 * hits as f64 / total.max(1) as f64
}

/// Provenance attached to every fold report.
#[derive(Debug, Clone, Default)]
pub struct RunContext<'a> {
    pub seed: u64,
    pub config_hash: String,
    /// Where `probs_<method>_<fold>.csv` files go, if anywhere.
    pub out_dir: Option<&'a Path>,
}

pub fn probs_file_name(method: &str, fold: usize) -> String {
    format!("probs_{method}_{fold}.csv")
}

fn report_from_table(fold_index: usize, table: &ProbabilityTable, k: usize, seconds: Option<f64>, ctx: &RunContext) -> Result<FoldReport> {
    let confusion = confusion_matrix(&table.truth, &table.predictions, k)?;
    Ok(FoldReport {
        fold_index,
        method: table.model_tag.clone(),
        accuracy_percent: confusion_accuracy_percent(&confusion),
        confusion,
        confusion_axes: CONFUSION_AXES.into(),
        train_seconds: seconds,
        seed: ctx.seed.to_string(),
        config_hash: ctx.config_hash.clone(),
    })
}

/// Fit on the fold's training (and validation) samples, score its test
/// samples.
pub fn run_fold(
    dataset: &Dataset,
    fold_index: usize,
    fold: &Fold,
    method: &str,
    classifier: &mut dyn Classifier,
    ctx: &RunContext,
) -> Result<(FoldReport, ProbabilityTable)> {
    let train = dataset.subset(&fold.train);
    let val = dataset.subset(&fold.val);
    let test = dataset.subset(&fold.test);
    classifier.fit(&train, &val)?;
    let mut probs = classifier.predict_proba(&test)?;
    probs.model_tag = method.into();
    let table = ProbabilityTable::new(fold.test.clone(), &probs, test.labels())?;
    if let Some(dir) = ctx.out_dir {
        table.write(&dir.join(probs_file_name(method, fold_index)))?;
    }
    let report = report_from_table(fold_index, &table, dataset.num_classes(), classifier.train_seconds(), ctx)?;
    Ok((report, table))
}

/// Cross-validate with a fresh classifier per fold from `make`.
pub fn run_cv_with(
    dataset: &Dataset,
    plan: &SplitPlan,
    method: &str,
    mut make: impl FnMut(usize) -> Box<dyn Classifier>,
    ctx: &RunContext,
) -> Result<Vec<FoldReport>> {
    plan.validate(dataset.len())?;
    plan.folds
        .iter()
        .enumerate()
        .map(|(k, fold)| {
            let mut clf = make(k);
            run_fold(dataset, k, fold, method, clf.as_mut(), ctx).map(|(r, _)| r).map_err(|e| e.in_fold(k))
        })
        .collect()
}

pub fn run_cv(dataset: &Dataset, method: Method, plan: &SplitPlan, config: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<FoldReport>> {
    let ctx = RunContext { seed: plan.seed, config_hash: config.hash(), out_dir };
    run_cv_with(dataset, plan, method.as_str(), |_| make_classifier(method, config), &ctx)
}

/// Ensemble reports rebuilt from the persisted `probs_<method>_<fold>.csv`
/// files in `dir`; the combined tables are written back next to them.
pub fn ensemble_cv(
    dir: &Path,
    methods: &[&str],
    num_folds: usize,
    num_classes: usize,
    rule: EnsembleRule,
    ctx: &RunContext,
) -> Result<Vec<FoldReport>> {
    (0..num_folds)
        .map(|k| {
            let tables = methods
                .iter()
                .map(|m| ProbabilityTable::read(&dir.join(probs_file_name(m, k))))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_fold(k))?;
            let combined = combine_tables(&tables, rule).map_err(|e| e.in_fold(k))?;
            combined.write(&dir.join(probs_file_name(rule.tag(), k)))?;
            report_from_table(k, &combined, num_classes, None, ctx)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub method: String,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator) of the fold accuracies.
    pub std: f64,
    pub mean_train_seconds: Option<f64>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard deviation with an `n - 1` denominator; 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn summarize_accuracies(method: &str, fold_accuracies: Vec<f64>, seconds: Option<f64>) -> Result<CvSummary> {
    if fold_accuracies.is_empty() {
        return argument("no fold accuracies to summarise");
    }
    Ok(CvSummary {
        method: method.into(),
        mean: mean(&fold_accuracies),
        std: sample_std(&fold_accuracies),
        fold_accuracies,
        mean_train_seconds: seconds,
    })
}

pub fn summarize(reports: &[FoldReport]) -> Result<CvSummary> {
    let Some(first) = reports.first() else {
        return argument("no fold reports to summarise");
    };
    if let Some(other) = reports.iter().find(|r| r.method != first.method) {
        return argument(format!("cannot summarise {} together with {}", first.method, other.method));
    }
    let seconds: Option<Vec<f64>> = reports.iter().map(|r| r.train_seconds).collect();
    let accs = reports.iter().map(|r| r.accuracy_percent).collect();
    summarize_accuracies(&first.method, accs, seconds.map(|s| mean(&s)))
}

pub const SUMMARY_HEADER: &str = "method,fold_accuracies,mean,std,mean_seconds";

pub fn confusion_file_name(method: &str, fold: usize) -> String {
    format!("confusion_{method}_{fold}.csv")
}

fn write_confusion(path: &Path, confusion: &[Vec<usize>]) -> Result<()> {
    write_atomic(path, |w| {
        let mut header = String::from("predicted\\truth");
        for j in 0..confusion.len() {
            header.push_str(&format!(",{j}"));
        }
        writeln!(w, "{header}")?;
        for (i, row) in confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(w, "{i},{}", cells.join(","))?;
        }
        Ok(())
    })
}

/// Writes `summary.csv`, `summary.md` and one confusion CSV per report into
/// `dir`. Output bytes depend only on the inputs.
pub fn render_report(summaries: &[CvSummary], reports: &[FoldReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seconds = |s: &CvSummary, prec: bool| match s.mean_train_seconds {
        Some(t) if prec => format!("{t:.1}"),
        Some(t) => format!("{t}"),
        None => "-".into(),
    };
    write_atomic(&dir.join("summary.csv"), |w| {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for s in summaries {
            let accs: Vec<String> = s.fold_accuracies.iter().map(|a| format!("{a}")).collect();
            writeln!(w, "{},{},{},{},{}", s.method, accs.join(";"), s.mean, s.std, seconds(s, false))?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join("summary.md"), |w| {
        writeln!(w, "| Method | Average Accuracy (%) | Training Time (s) |")?;
        writeln!(w, "|---|---|---|")?;
        for s in summaries {
            writeln!(w, "| {} | {:.3} ± {:.3} | {} |", s.method, s.mean, s.std, seconds(s, true))?;
        }
        writeln!(w)?;
        writeln!(w, "Spread is the sample standard deviation (n - 1) over folds.")?;
        writeln!(w, "Confusion matrices: {CONFUSION_AXES}.")?;
        Ok(())
    })?;
    for r in reports {
        write_confusion(&dir.join(confusion_file_name(&r.method, r.fold_index)), &r.confusion)?;
    }
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<CvSummary>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Format(format!("{}: expected header {SUMMARY_HEADER}", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return dimension(format!("{}: line {row} has {} fields, expected 5", path.display(), f.len()));
            }
            let num = |column: usize, s: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse { row, column, message: format!("{s:?} is not a number") })
            };
            let fold_accuracies = f[1].split(';').map(|a| num(2, a)).collect::<Result<Vec<_>>>()?;
            Ok(CvSummary {
                method: f[0].into(),
                fold_accuracies,
                mean: num(3, f[2])?,
                std: num(4, f[3])?,
                mean_train_seconds: if f[4] == "-" { None } else { Some(num(5, f[4])?) },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("resnet".parse::<Method>().is_err());
    }

    #[test]
    fn confusion_rows_are_predictions() {
        let m = confusion_matrix(&[0, 1, 1], &[1, 1, 0], 2).unwrap();
        assert_eq!(m, vec![vec![0, 1], vec![1, 1]]);
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn summary_std_conventions() {
        let accs = [98.50, 98.56, 98.59, 98.44, 98.51];
        assert!((sample_std(&accs) - 0.0585).abs() < 1e-3);
        assert!((population_std(&accs) - 0.0523).abs() < 1e-3);
    }
}
