//! L2-regularized binary logistic regression and contiguous k-fold
//! cross-fitting.
//!
//! Features are standardized internally and the standardization is stored
//! with the model, so callers always pass raw feature values. Training uses
//! full-batch Newton steps with backtracking and falls back to a gradient
//! step when the Hessian cannot be factorized. No randomness is involved.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = "lm-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub l2_penalty: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_penalty: 1.0,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
    /// Constant columns carry no signal; their weight is pinned to zero.
    pub constant: bool,
}

impl Standardization {
    pub fn apply(&self, x: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (x - self.mean) / self.std
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub n: usize,
    pub folds: Option<usize>,
    pub deterministic: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub version: String,
    pub feature_names: Vec<String>,
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardization: Vec<Standardization>,
    pub train_meta: TrainMeta,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LinearModel {
    /// A model with explicit parameters and identity standardization.
    pub fn from_parts(feature_names: Vec<String>, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if feature_names.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: feature_names.len(),
                right: weights.len(),
            });
        }
        let standardization = vec![
            Standardization {
                mean: 0.0,
                std: 1.0,
                constant: false,
            };
            weights.len()
        ];
        Ok(LinearModel {
            version: ARTIFACT_VERSION.into(),
            feature_names,
            weights,
            bias,
            standardization,
            train_meta: TrainMeta {
                n: 0,
                folds: None,
                deterministic: true,
                iterations: 0,
                final_grad_norm: 0.0,
                config: TrainConfig::default(),
            },
        })
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: x.len(),
                context: "feature vector".into(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.standardization)
            .zip(x)
            .map(|((w, s), v)| w * s.apply(*v))
            .sum::<f64>()
            + self.bias)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        self.decision_value(x).map(sigmoid)
    }

    /// Bernoulli log-likelihood of `y` under the model (no penalty term).
    pub fn log_likelihood(&self, x: &[Vec<f64>], y: &[u8]) -> Result<f64> {
        let mut ll = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let z = self.decision_value(row)?;
            ll -= softplus(z) - f64::from(label) * z;
        }
        Ok(ll)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: LinearModel = serde_json::from_str(&raw)?;
        if model.version != ARTIFACT_VERSION {
            return Err(Error::Model(format!(
                "unsupported artifact version '{}', expected '{ARTIFACT_VERSION}'",
                model.version
            )));
        }
        let d = model.feature_names.len();
        if model.weights.len() != d || model.standardization.len() != d {
            return Err(Error::Model("weights, standardization and feature names differ in length".into()));
        }
        Ok(model)
    }

    /// Errors unless the model's features are exactly `names`, in order.
    pub fn expect_features(&self, names: &[&str]) -> Result<()> {
        if self.feature_names.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::Model(format!(
                "model features {:?} do not match expected {:?}",
                self.feature_names, names
            )));
        }
        Ok(())
    }
}

fn standardize_columns(x: &[Vec<f64>], d: usize) -> Vec<Standardization> {
    let n = x.len() as f64;
    (0..d)
        .map(|j| {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let constant = std <= 1e-12 * (1.0 + mean.abs());
            Standardization {
                mean,
                std: if constant { 1.0 } else { std },
                constant,
            }
        })
        .collect()
}

/// Penalized negative log-likelihood over the design matrix `z` whose last
/// column is the intercept. The intercept is not penalized.
struct Objective<'a> {
    design: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    l2: f64,
}

impl Objective<'_> {
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let eta = self.design * theta;
        let nll: f64 = eta.iter().zip(self.y.iter()).map(|(e, y)| softplus(*e) - y * e).sum();
        let p = theta.len() - 1;
        nll + 0.5 * self.l2 * theta.rows(0, p).norm_squared()
    }

    fn gradient_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let eta = self.design * theta;
        let probs = eta.map(sigmoid);
        let resid = &probs - self.y;
        let mut grad = self.design.transpose() * resid;
        let w = probs.map(|p| p * (1.0 - p));
        let mut weighted = self.design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let mut hess = self.design.transpose() * weighted;
        let p = theta.len() - 1;
        for j in 0..p {
            grad[j] += self.l2 * theta[j];
            hess[(j, j)] += self.l2;
        }
        (grad, hess)
    }
}

/// Fits the model. `x` holds raw feature rows; `y` holds 0/1 labels.
pub fn train(x: &[Vec<f64>], y: &[u8], feature_names: &[&str], cfg: &TrainConfig) -> Result<LinearModel> {
    let n = x.len();
    let d = feature_names.len();
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
                context: "training row".into(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training features".into()));
        }
    }
    if let Some(bad) = y.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!("label {bad} is not 0 or 1")));
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass(y.first().copied().unwrap_or(0)));
    }

    let standardization = standardize_columns(x, d);
    let active: Vec<usize> = (0..d).filter(|&j| !standardization[j].constant).collect();
    let p = active.len();
    let design = DMatrix::from_fn(n, p + 1, |i, c| {
        if c == p {
            1.0
        } else {
            let j = active[c];
            standardization[j].apply(x[i][j])
        }
    });
    let yv = DVector::from_iterator(n, y.iter().map(|&l| f64::from(l)));
    let obj = Objective {
        design: &design,
        y: &yv,
        l2: cfg.l2_penalty,
    };

    let mut theta = DVector::zeros(p + 1);
    let mut value = obj.value(&theta);
    let mut iterations = 0;
    let (mut grad, mut hess) = obj.gradient_hessian(&theta);
    while grad.norm() > cfg.tol {
        if iterations >= cfg.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: grad.norm(),
            });
        }
        iterations += 1;
        let direction = match hess.clone().cholesky() {
            Some(ch) => {
                let step = ch.solve(&grad);
                if step.dot(&grad) > 0.0 {
                    step
                } else {
                    grad.clone()
                }
            }
            None => grad.clone(),
        };
        let slope = direction.dot(&grad);
        let grad_norm = grad.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &theta - t * &direction;
            let cand_value = obj.value(&candidate);
            let armijo = cand_value <= value - 1e-4 * t * slope;
            // Near the optimum the objective is flat to rounding; accept a
            // step that still shrinks the gradient.
            let flat = (cand_value - value).abs() <= 1e-12 * value.abs().max(1.0);
            if armijo || flat {
                let (g, h) = obj.gradient_hessian(&candidate);
                if armijo || g.norm() < grad_norm {
                    theta = candidate;
                    value = cand_value;
                    grad = g;
                    hess = h;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm,
            });
        }
    }

    let mut weights = vec![0.0; d];
    for (c, &j) in active.iter().enumerate() {
        weights[j] = theta[c];
    }
    Ok(LinearModel {
        version: ARTIFACT_VERSION.into(),
        feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
        weights,
        bias: theta[p],
        standardization,
        train_meta: TrainMeta {
            n,
            folds: None,
            deterministic: true,
            iterations,
            final_grad_norm: grad.norm(),
            config: *cfg,
        },
    })
}

/// Contiguous folds over `0..n` in input order; the first `n % k` folds
/// hold one extra element.
pub fn contiguous_folds(n: usize, k: usize) -> Vec<Range<usize>> {
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    (0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitResult {
    pub folds: Vec<Range<usize>>,
    /// Probability for each example from the model that excluded its fold.
    pub out_of_fold_probs: Vec<f64>,
    pub fold_models: Vec<LinearModel>,
    pub full_model: LinearModel,
}

pub fn cross_fit(
    x: &[Vec<f64>],
    y: &[u8],
    feature_names: &[&str],
    k: usize,
    cfg: &TrainConfig,
) -> Result<CrossFitResult> {
    let n = x.len();
    if k < 2 || n < k {
        return Err(Error::Invalid(format!("cross-fitting needs 2 <= k <= n (k={k}, n={n})")));
    }
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    let folds = contiguous_folds(n, k);
    let fold_models: Vec<LinearModel> = folds
        .par_iter()
        .enumerate()
        .map(|(f, held_out)| {
            let (tx, ty): (Vec<Vec<f64>>, Vec<u8>) = (0..n)
                .filter(|i| !held_out.contains(i))
                .map(|i| (x[i].clone(), y[i]))
                .unzip();
            train(&tx, &ty, feature_names, cfg)
                .map(|mut m| {
                    m.train_meta.folds = Some(k);
                    m
                })
                .map_err(|e| Error::Fold {
                    fold: f,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;

    let mut out_of_fold_probs = vec![0.0; n];
    for (held_out, model) in folds.iter().zip(&fold_models) {
        for i in held_out.clone() {
            out_of_fold_probs[i] = model.predict_proba(&x[i])?;
        }
    }
    let mut full_model = train(x, y, feature_names, cfg)?;
    full_model.train_meta.folds = Some(k);
    Ok(CrossFitResult {
        folds,
        out_of_fold_probs,
        fold_models,
        full_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_predicts_half() {
        let m = LinearModel::from_parts(vec!["a".into(), "b".into()], vec![0.0, 0.0], 0.0).unwrap();
        assert_eq!(m.predict_proba(&[3.0, -7.0]).unwrap(), 0.5);
    }

    #[test]
    fn large_margin_saturates() {
        let m = LinearModel::from_parts(vec!["a".into()], vec![10.0], 0.0).unwrap();
        assert!(m.predict_proba(&[1.0]).unwrap() > 0.99);
    }

    #[test]
    fn toy_model_matches_hand_computation() {
        let mut m = LinearModel::from_parts(vec!["a".into(), "b".into()], vec![0.5, -1.25], 0.1).unwrap();
        m.standardization[1] = Standardization {
            mean: 2.0,
            std: 4.0,
            constant: false,
        };
        // z = 0.5*3 + (-1.25)*((10-2)/4) + 0.1 = -0.9
        let expected = 1.0 / (1.0 + 0.9f64.exp());
        assert!((m.predict_proba(&[3.0, 10.0]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn predict_rejects_bad_input() {
        let m = LinearModel::from_parts(vec!["a".into()], vec![1.0], 0.0).unwrap();
        assert!(matches!(m.predict_proba(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.predict_proba(&[f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn separable_one_dimensional() {
        let x: Vec<Vec<f64>> = [-3.0, -2.0, -1.5, -1.0, 1.0, 1.5, 2.0, 3.0].iter().map(|v| vec![*v]).collect();
        let y = [0, 0, 0, 0, 1, 1, 1, 1];
        let m = train(&x, &y, &["x"], &TrainConfig::default()).unwrap();
        for (row, label) in x.iter().zip(y) {
            let p = m.predict_proba(row).unwrap();
            assert_eq!(p >= 0.5, label == 1, "x={row:?} p={p}");
        }
        assert!(m.predict_proba(&[-0.25]).unwrap() < 0.5 || m.predict_proba(&[0.25]).unwrap() > 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train(&x, &[1, 1], &["x"], &TrainConfig::default()),
            Err(Error::SingleClass(1))
        ));
    }

    #[test]
    fn constant_column_gets_zero_weight() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![f64::from(i), 0.1]).collect();
        let y: Vec<u8> = (0..20).map(|i| u8::from(i % 3 == 0 || i > 12)).collect();
        let m = train(&x, &y, &["x", "c"], &TrainConfig::default()).unwrap();
        assert!(m.standardization[1].constant);
        assert_eq!(m.weights[1], 0.0);
    }

    #[test]
    fn unregularized_separable_does_not_converge() {
        let x: Vec<Vec<f64>> = [-2.0, -1.0, 1.0, 2.0].iter().map(|v| vec![*v]).collect();
        let cfg = TrainConfig {
            l2_penalty: 0.0,
            max_iter: 3,
            ..Default::default()
        };
        assert!(matches!(
            train(&x, &[0, 0, 1, 1], &["x"], &cfg),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn fold_partition() {
        let f = contiguous_folds(10, 5);
        assert_eq!(f, vec![0..2, 2..4, 4..6, 6..8, 8..10]);
        let sizes: Vec<usize> = contiguous_folds(881, 5).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![177, 176, 176, 176, 176]);
    }

    #[test]
    fn artifact_round_trip() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![f64::from(i), f64::from(i % 4)]).collect();
        let y: Vec<u8> = (0..30).map(|i| u8::from(i % 4 >= 2 || i > 20)).collect();
        let m = train(&x, &y, &["a", "b"], &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = LinearModel::load(&path).unwrap();
        assert_eq!(back, m);
        for row in &x {
            assert_eq!(
                back.predict_proba(row).unwrap().to_bits(),
                m.predict_proba(row).unwrap().to_bits()
            );
        }
        let mut bad = m.clone();
        bad.version = "lm-v0".into();
        bad.save(&path).unwrap();
        assert!(matches!(LinearModel::load(&path), Err(Error::Model(_))));
    }
}
