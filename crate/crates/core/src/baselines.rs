//! CSP and CSSP spatial filters with an LDA classifier on log-variance
//! features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{normalized_covariance, FeatureError};
use crate::signal::ClassLabel;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("covariance is singular (smallest eigenvalue {min_eigenvalue:e}); try a ridge of {suggested_ridge:e}")]
    SingularCovariance { min_eigenvalue: f64, suggested_ridge: f64 },
    #[error("need at least 2 epochs per class, got {class1} and {class2}")]
    TooFewEpochs { class1: usize, class2: usize },
    #[error("{pairs} filter pairs requested but only {channels} channels")]
    TooManyPairs { pairs: usize, channels: usize },
    #[error("CSSP delay must be at least 1 sample and shorter than the epoch ({len} samples), got {delay}")]
    InvalidDelay { delay: usize, len: usize },
    #[error("projected variance is zero")]
    DegenerateWindow,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CspConfig {
    /// Filters kept from each end of the eigenvalue spectrum.
    pub pairs: usize,
    /// Added to the diagonal of each class covariance before solving.
    pub ridge: f64,
}

impl Default for CspConfig {
    fn default() -> Self {
        CspConfig { pairs: 3, ridge: 0.0 }
    }
}

/// Spatial filters `[2m, C]` (or `[2m, 2C]` with a delay), ordered by
/// descending eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct CspModel {
    pub filters: Array2<f64>,
    /// Eigenvalue `λ` of each filter row: its share of class-1 variance.
    pub eigenvalues: Vec<f64>,
    /// CSSP delay in samples; `None` for plain CSP.
    pub delay: Option<usize>,
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Sign so that the first nonzero entry is positive.
fn sign_normalize(v: &mut DVector<f64>) {
    let scale = v.amax();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

fn class_average(epochs: &[Array2<f64>], ridge: f64) -> Result<Array2<f64>, BaselineError> {
    let channels = epochs[0].nrows();
    let mut sum = Array2::<f64>::zeros((channels, channels));
    for e in epochs {
        if e.nrows() != channels {
            return Err(BaselineError::ShapeMismatch(format!("epoch with {} channels, expected {channels}", e.nrows())));
        }
        sum += &normalized_covariance(e.view(), true)?;
    }
    let trace = sum.diag().sum();
    sum *= channels as f64 / trace;
    sum.diag_mut().iter_mut().for_each(|d| *d += ridge);
    Ok(sum)
}

impl CspModel {
    /// Solves `Σ₁ w = λ (Σ₁ + Σ₂) w` and keeps the `pairs` largest and
    /// smallest `λ`. Rows satisfy `w (Σ₁ + Σ₂) wᵀ = 1`.
    pub fn from_covariances(sigma1: &Array2<f64>, sigma2: &Array2<f64>, pairs: usize) -> Result<Self, BaselineError> {
        let c = sigma1.nrows();
        if sigma1.dim() != (c, c) || sigma2.dim() != (c, c) {
            return Err(BaselineError::ShapeMismatch(format!(
                "covariances {:?} and {:?}",
                sigma1.dim(),
                sigma2.dim()
            )));
        }
        if pairs == 0 || 2 * pairs > c {
            return Err(BaselineError::TooManyPairs { pairs, channels: c });
        }
        let s1 = to_dmatrix(sigma1);
        let composite = &s1 + to_dmatrix(sigma2);

        let eig = SymmetricEigen::new(composite.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 1e-10 * max.abs()) {
            return Err(BaselineError::SingularCovariance {
                min_eigenvalue: min,
                suggested_ridge: 1e-8 * composite.trace() / c as f64,
            });
        }
        // P = Λ^{-1/2} Uᵀ whitens the composite covariance.
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let p = inv_sqrt * eig.eigenvectors.transpose();
        let mut white = &p * &s1 * p.transpose();
        white = (&white + white.transpose()) * 0.5;
        let inner = SymmetricEigen::new(white);

        let mut candidates: Vec<(f64, DVector<f64>)> = (0..c)
            .map(|k| {
                let mut w = p.transpose() * inner.eigenvectors.column(k);
                sign_normalize(&mut w);
                (inner.eigenvalues[k], w)
            })
            .collect();
        candidates.sort_by(|a, b| {
            let by_lambda = if (a.0 - b.0).abs() <= 1e-12 { std::cmp::Ordering::Equal } else { b.0.total_cmp(&a.0) };
            by_lambda.then_with(|| {
                a.1.iter()
                    .zip(b.1.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });

        let keep: Vec<&(f64, DVector<f64>)> = candidates[..pairs].iter().chain(&candidates[c - pairs..]).collect();
        let filters = Array2::from_shape_fn((2 * pairs, c), |(i, j)| keep[i].1[j]);
        Ok(CspModel {
            filters,
            eigenvalues: keep.iter().map(|k| k.0).collect(),
            delay: None,
        })
    }
}

/// CSP on `[C, S]` epochs of two classes.
pub fn fit_csp(class1: &[Array2<f64>], class2: &[Array2<f64>], config: &CspConfig) -> Result<CspModel, BaselineError> {
    if class1.len() < 2 || class2.len() < 2 {
        return Err(BaselineError::TooFewEpochs {
            class1: class1.len(),
            class2: class2.len(),
        });
    }
    let s1 = class_average(class1, config.ridge)?;
    let s2 = class_average(class2, config.ridge)?;
    if s1.dim() != s2.dim() {
        return Err(BaselineError::ShapeMismatch("classes differ in channel count".into()));
    }
    CspModel::from_covariances(&s1, &s2, config.pairs)
}

/// Stacks an epoch on its `delay`-shifted copy: `[2C, S - delay]`, with
/// `x(t)` in the first `C` rows and `x(t - delay)` in the rest.
pub fn delay_embed(epoch: ArrayView2<'_, f64>, delay: usize) -> Result<Array2<f64>, BaselineError> {
    let (c, n) = epoch.dim();
    if delay == 0 || delay >= n {
        return Err(BaselineError::InvalidDelay { delay, len: n });
    }
    let mut out = Array2::zeros((2 * c, n - delay));
    out.slice_mut(s![..c, ..]).assign(&epoch.slice(s![.., delay..]));
    out.slice_mut(s![c.., ..]).assign(&epoch.slice(s![.., ..n - delay]));
    Ok(out)
}

pub fn fit_cssp(
    class1: &[Array2<f64>],
    class2: &[Array2<f64>],
    delay: usize,
    config: &CspConfig,
) -> Result<CspModel, BaselineError> {
    let embed = |xs: &[Array2<f64>]| -> Result<Vec<Array2<f64>>, BaselineError> {
        xs.iter().map(|x| delay_embed(x.view(), delay)).collect()
    };
    let mut model = fit_csp(&embed(class1)?, &embed(class2)?, config)?;
    model.delay = Some(delay);
    Ok(model)
}

/// `f_j = log(var(w_j x) / Σ_k var(w_k x))`.
pub fn csp_features(epoch: ArrayView2<'_, f64>, model: &CspModel) -> Result<Vec<f64>, BaselineError> {
    let embedded;
    let x = match model.delay {
        Some(d) => {
            embedded = delay_embed(epoch, d)?;
            embedded.view()
        }
        None => epoch,
    };
    if x.nrows() != model.filters.ncols() {
        return Err(BaselineError::ShapeMismatch(format!(
            "epoch has {} rows, filters expect {}",
            x.nrows(),
            model.filters.ncols()
        )));
    }
    let projected = model.filters.dot(&x);
    let var = projected.var_axis(Axis(1), 0.0);
    let total = var.sum();
    if !(total > 0.0) || var.iter().any(|&v| v <= 0.0) {
        return Err(BaselineError::DegenerateWindow);
    }
    Ok(var.iter().map(|v| (v / total).ln()).collect())
}

/// Fisher discriminant; positive scores mean class 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub weight: Vec<f64>,
    pub bias: f64,
    /// Returned when the weight vector is identically zero.
    pub majority: ClassLabel,
}

fn mean_of(rows: &[Vec<f64>], dim: usize) -> DVector<f64> {
    let mut m = DVector::zeros(dim);
    for r in rows {
        m += DVector::from_column_slice(r);
    }
    m / rows.len() as f64
}

/// `w = Σ⁻¹(μ₁ − μ₂)`, `b = −wᵀ(μ₁ + μ₂)/2`, with a `1e-6 · trace/dim`
/// ridge on the pooled covariance.
pub fn fit_lda(class1: &[Vec<f64>], class2: &[Vec<f64>], labels: [ClassLabel; 2]) -> Result<LdaModel, BaselineError> {
    if class1.len() < 2 || class2.len() < 2 {
        return Err(BaselineError::TooFewEpochs {
            class1: class1.len(),
            class2: class2.len(),
        });
    }
    let dim = class1[0].len();
    if class1.iter().chain(class2).any(|r| r.len() != dim) {
        return Err(BaselineError::ShapeMismatch("feature vectors differ in length".into()));
    }
    let (m1, m2) = (mean_of(class1, dim), mean_of(class2, dim));
    let mut pooled = DMatrix::<f64>::zeros(dim, dim);
    for (rows, mean) in [(class1, &m1), (class2, &m2)] {
        for r in rows {
            let d = DVector::from_column_slice(r) - mean;
            pooled += &d * d.transpose();
        }
    }
    pooled /= (class1.len() + class2.len() - 2) as f64;
    let ridge = 1e-6 * pooled.trace() / dim as f64;
    for i in 0..dim {
        pooled[(i, i)] += ridge;
    }
    let diff = &m1 - &m2;
    let w = if diff.iter().all(|&d| d == 0.0) {
        DVector::zeros(dim)
    } else {
        let chol = pooled.clone().cholesky().ok_or_else(|| BaselineError::SingularCovariance {
            min_eigenvalue: SymmetricEigen::new(pooled.clone()).eigenvalues.min(),
            suggested_ridge: 1e-6 * pooled.trace() / dim as f64,
        })?;
        chol.solve(&diff)
    };
    let bias = -w.dot(&(&m1 + &m2)) / 2.0;
    let majority = if class2.len() > class1.len() { labels[1] } else { labels[0] };
    Ok(LdaModel {
        weight: w.iter().copied().collect(),
        bias,
        majority,
    })
}

impl LdaModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

/// Class 1 (`labels[0]` at fit time) when the score is positive.
pub fn predict_lda(model: &LdaModel, x: &[f64], labels: [ClassLabel; 2]) -> ClassLabel {
    if model.weight.iter().all(|&w| w == 0.0) {
        return model.majority;
    }
    if model.score(x) > 0.0 {
        labels[0]
    } else {
        labels[1]
    }
}

/// Spatial filtering followed by LDA; class 1 is [`ClassLabel::Left`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPipeline {
    pub csp: CspModel,
    pub lda: LdaModel,
}

const LABELS: [ClassLabel; 2] = [ClassLabel::Left, ClassLabel::Right];

impl LinearPipeline {
    /// `delay = None` fits CSP, `Some(τ)` fits CSSP.
    pub fn fit(epochs: &[(Array2<f64>, ClassLabel)], delay: Option<usize>, config: &CspConfig) -> Result<Self, BaselineError> {
        let split = |c: ClassLabel| -> Vec<Array2<f64>> {
            epochs.iter().filter(|e| e.1 == c).map(|e| e.0.clone()).collect()
        };
        let (left, right) = (split(ClassLabel::Left), split(ClassLabel::Right));
        let csp = match delay {
            Some(d) => fit_cssp(&left, &right, d, config)?,
            None => fit_csp(&left, &right, config)?,
        };
        let feats = |xs: &[Array2<f64>]| -> Result<Vec<Vec<f64>>, BaselineError> {
            xs.iter().map(|x| csp_features(x.view(), &csp)).collect()
        };
        let lda = fit_lda(&feats(&left)?, &feats(&right)?, LABELS)?;
        Ok(LinearPipeline { csp, lda })
    }

    pub fn predict(&self, epoch: ArrayView2<'_, f64>) -> Result<ClassLabel, BaselineError> {
        Ok(predict_lda(&self.lda, &csp_features(epoch, &self.csp)?, LABELS))
    }
}
