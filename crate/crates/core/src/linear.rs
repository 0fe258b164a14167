//! One-vs-rest ridge classifier on standardised features, with alpha chosen
//! by leave-one-out error and softmax calibration of the decision scores.

use faer::prelude::Solve;
use faer::{Mat, Side};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::ensemble::ProbabilityMatrix;
use crate::error::{argument, dimension, Error, Result};

pub const DEFAULT_ALPHAS: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// Classes by features, acting on standardised features.
    pub weights: Array2<f64>,
    pub intercepts: Array1<f64>,
    pub feature_means: Array1<f64>,
    pub feature_stds: Array1<f64>,
    pub alpha: f64,
    pub temperature: f64,
    /// Mean squared leave-one-out residual for every candidate alpha.
    pub loo_errors: Vec<(f64, f64)>,
}

fn to_faer(a: &Array2<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_faer(m: &Mat<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Population mean and standard deviation per column; zero spread becomes 1.
pub fn standardization(features: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = features.nrows() as f64;
    let means = features.sum_axis(Axis(0)) / n;
    let mut stds = Array1::zeros(features.ncols());
    for row in features.rows() {
        for ((s, &x), &m) in stds.iter_mut().zip(row).zip(&means) {
            *s += (x - m) * (x - m);
        }
    }
    stds.mapv_inplace(|s: f64| {
        let sd = (s / n).sqrt();
        if sd == 0.0 {
            1.0
        } else {
            sd
        }
    });
    (means, stds)
}

fn standardize(features: &Array2<f64>, means: &Array1<f64>, stds: &Array1<f64>) -> Array2<f64> {
    (features - means) / stds
}

/// Fit on `labels` in `0..num_classes`. Targets are `+1` for the class and
/// `-1` otherwise; the intercept is the mean target and the weights solve
/// `(X'X + alpha I) w = X'(y - mean)` on the standardised features. The
/// smaller of the two Gram forms is factorised.
pub fn fit_ridge(features: &Array2<f64>, labels: &[usize], num_classes: usize, alphas: &[f64]) -> Result<RidgeModel> {
    fit_ridge_form(features, labels, num_classes, alphas, None)
}

fn fit_ridge_form(
    features: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    alphas: &[f64],
    force_dual: Option<bool>,
) -> Result<RidgeModel> {
    let (n, p) = features.dim();
    if labels.len() != n {
        return dimension(format!("{n} feature rows but {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return argument(format!("label {bad} outside 0..{num_classes}"));
    }
    if n < 2 || labels.iter().all(|&l| l == labels[0]) {
        return argument("ridge classifier needs at least two classes");
    }
    if features.iter().any(|v| !v.is_finite()) {
        return argument("features contain non-finite values");
    }
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
        return argument(format!("alpha grid {alphas:?} must be non-empty and positive"));
    }
    let (means, stds) = standardization(features);
    let xs = to_faer(&standardize(features, &means, &stds));
    let mut intercepts = Array1::zeros(num_classes);
    let yc = {
        let mut y = Mat::<f64>::from_fn(n, num_classes, |i, c| if labels[i] == c { 1.0 } else { -1.0 });
        for c in 0..num_classes {
            let mean = (0..n).map(|i| y[(i, c)]).sum::<f64>() / n as f64;
            intercepts[c] = mean;
            for i in 0..n {
                y[(i, c)] -= mean;
            }
        }
        y
    };

    let dual = force_dual.unwrap_or(n <= p);
    let gram = if dual { &xs * xs.transpose() } else { xs.transpose() * &xs };
    let eig = gram.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Argument(format!("eigendecomposition failed: {e:?}")))?;
    let u = eig.U();
    let s: Vec<f64> = (0..gram.nrows()).map(|j| eig.S().column_vector()[j]).collect();

    // Leave-one-out residuals. Dual: e = c / diag((G + aI)^-1) with
    // c = (G + aI)^-1 y. Primal: e = r / (1 - diag(H)) with the hat matrix
    // H = X (X'X + aI)^-1 X'.
    let (proj, rot_y) = if dual {
        (u.to_owned(), u.transpose() * &yc)
    } else {
        let xu = &xs * u;
        let rot = xu.transpose() * &yc;
        (xu, rot)
    };
    let mut loo_errors = Vec::with_capacity(alphas.len());
    let mut best: Option<(f64, f64)> = None;
    for &alpha in alphas {
        let mut err = 0.0;
        let mut scaled = rot_y.clone();
        for (j, &sj) in s.iter().enumerate() {
            for c in 0..num_classes {
                scaled[(j, c)] /= sj + alpha;
            }
        }
        let fitted = &proj * &scaled;
        for i in 0..n {
            let h: f64 = s.iter().enumerate().map(|(j, &sj)| proj[(i, j)] * proj[(i, j)] / (sj + alpha)).sum();
            for c in 0..num_classes {
                let e = if dual { fitted[(i, c)] / h } else { (yc[(i, c)] - fitted[(i, c)]) / (1.0 - h) };
                err += e * e;
            }
        }
        err /= (n * num_classes) as f64;
        loo_errors.push((alpha, err));
        if best.is_none_or(|(_, b)| err < b) {
            best = Some((alpha, err));
        }
    }
    let alpha = best.expect("alpha grid is non-empty").0;

    let mut reg = gram.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += alpha;
    }
    let llt = reg.llt(Side::Lower).map_err(|e| Error::Argument(format!("Cholesky failed: {e:?}")))?;
    let w = if dual { xs.transpose() * llt.solve(&yc) } else { llt.solve(xs.transpose() * &yc) };
    let weights = from_faer(&w).reversed_axes().as_standard_layout().to_owned();
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("ridge solution is not finite".into()));
    }
    Ok(RidgeModel { weights, intercepts, feature_means: means, feature_stds: stds, alpha, temperature: 1.0, loo_errors })
}

pub fn decision_scores(model: &RidgeModel, features: &Array2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != model.weights.ncols() {
        return dimension(format!("model expects {} features, got {}", model.weights.ncols(), features.ncols()));
    }
    let xs = standardize(features, &model.feature_means, &model.feature_stds);
    Ok(xs.dot(&model.weights.t()) + &model.intercepts)
}

pub fn predict_proba(model: &RidgeModel, features: &Array2<f64>) -> Result<ProbabilityMatrix> {
    let scores = decision_scores(model, features)?;
    Ok(ProbabilityMatrix::softmax(&scores, model.temperature, "minirocket"))
}

/// Temperature from `grid` minimising validation negative log-likelihood
/// (first minimum wins).
pub fn tune_temperature(model: &RidgeModel, features: &Array2<f64>, labels: &[usize], grid: &[f64]) -> Result<f64> {
    let scores = decision_scores(model, features)?;
    if labels.len() != scores.nrows() || labels.is_empty() {
        return dimension(format!("{} score rows but {} labels", scores.nrows(), labels.len()));
    }
    let mut best = (f64::NAN, f64::INFINITY);
    for &t in grid {
        if !(t > 0.0) {
            return argument(format!("temperature {t} must be positive"));
        }
        let p = ProbabilityMatrix::softmax(&scores, t, "");
        let nll = -labels.iter().enumerate().map(|(i, &l)| p.values[[i, l]].max(f64::MIN_POSITIVE).ln()).sum::<f64>();
        if nll < best.1 {
            best = (t, nll);
        }
    }
    if best.0.is_nan() {
        return argument("empty temperature grid");
    }
    Ok(best.0)
}

/// 41 log-spaced temperatures from 0.01 to 100.
pub fn default_temperature_grid() -> Vec<f64> {
    (0..=40).map(|i| 10f64.powf(-2.0 + 0.1 * i as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_class_is_rejected() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(matches!(fit_ridge(&x, &[1, 1], 2, &[1.0]), Err(Error::Argument(_))));
        let mut bad = x.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(fit_ridge(&bad, &[0, 1], 2, &[1.0]).is_err());
    }

    #[test]
    fn zero_variance_features_get_unit_std() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let (m, s) = standardization(&x);
        assert_eq!(m[1], 5.0);
        assert_eq!(s[1], 1.0);
    }

    #[test]
    fn primal_and_dual_agree() {
        let x = Array2::from_shape_fn((12, 6), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0 + 0.1 * (i * j) as f64);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let primal = fit_ridge_form(&x, &labels, 3, &DEFAULT_ALPHAS, Some(false)).unwrap();
        let dual = fit_ridge_form(&x, &labels, 3, &DEFAULT_ALPHAS, Some(true)).unwrap();
        assert_eq!(primal.alpha, dual.alpha);
        for ((a, ea), (_, eb)) in primal.loo_errors.iter().zip(&dual.loo_errors) {
            assert!((ea - eb).abs() <= 1e-8 * ea.max(1.0), "alpha {a}: {ea} vs {eb}");
        }
        for (a, b) in primal.weights.iter().zip(dual.weights.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn probabilities_follow_score_argmax() {
        let x = Array2::from_shape_fn((30, 4), |(i, j)| ((i * 13 + j * 5) % 17) as f64 + if j == i % 3 { 6.0 } else { 0.0 });
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut model = fit_ridge(&x, &labels, 3, &DEFAULT_ALPHAS).unwrap();
        model.temperature = tune_temperature(&model, &x, &labels, &default_temperature_grid()).unwrap();
        let p = predict_proba(&model, &x).unwrap();
        let s = decision_scores(&model, &x).unwrap();
        assert_eq!(p.predict(), crate::ensemble::predict(&s));
        assert!(p.values.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
    }
}
