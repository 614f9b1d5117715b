//! Normalized sample covariance matrices and the `C x C x T` feature tensor.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use thiserror::Error;

use crate::signal::{ClassLabel, EpochWindow};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("window energy {energy:e} is too small to normalize")]
    DegenerateWindow { energy: f64 },
    #[error("window needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("band {expected} missing from window list (found band {found:?})")]
    MissingBand { expected: usize, found: Option<usize> },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Trace-normalized spatial covariance of one window: `trace = C`.
#[derive(Debug, Clone, PartialEq)]
pub struct NscmMatrix {
    pub values: Array2<f64>,
    pub band_index: usize,
}

/// Stack of `T` NSCM matrices, indexed `[channel, channel, band]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub values: Array3<f64>,
    pub trial_id: usize,
    pub label: ClassLabel,
}

impl FeatureTensor {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn bands(&self) -> usize {
        self.values.dim().2
    }

    pub fn slice(&self, band: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![.., .., band])
    }

    /// A single-band tensor holding band `band` of this one.
    pub fn band(&self, band: usize) -> FeatureTensor {
        FeatureTensor {
            values: self.values.slice(s![.., .., band..band + 1]).to_owned(),
            trial_id: self.trial_id,
            label: self.label,
        }
    }
}

/// NSCM of a `[C, S]` block: `C * X X^T / trace(X X^T)` after removing
/// each row's mean.
pub fn nscm_of(samples: ArrayView2<'_, f64>) -> Result<Array2<f64>, FeatureError> {
    normalized_covariance(samples, true)
}

/// `C * X X^T / trace(X X^T)`, optionally on row-centered data.
pub fn normalized_covariance(samples: ArrayView2<'_, f64>, center: bool) -> Result<Array2<f64>, FeatureError> {
    let n = samples.ncols();
    if n < 2 {
        return Err(FeatureError::TooShort(n));
    }
    let centered = if center {
        let mean = samples.mean_axis(Axis(1)).expect("nonempty");
        &samples - &mean.insert_axis(Axis(1))
    } else {
        samples.to_owned()
    };
    let mut cov = centered.dot(&centered.t());
    let trace = cov.diag().sum();
    if !(trace >= 1e-300) {
        return Err(FeatureError::DegenerateWindow { energy: trace });
    }
    let channels = cov.nrows();
    cov *= channels as f64 / trace;
    // Exact symmetry; the product is symmetric only up to rounding order.
    for i in 0..channels {
        for j in 0..i {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(cov)
}

pub fn nscm(window: &EpochWindow) -> Result<NscmMatrix, FeatureError> {
    Ok(NscmMatrix {
        values: nscm_of(window.samples.view())?,
        band_index: window.band_index,
    })
}

/// Stack one trial's windows, which must arrive ordered `0..T`.
pub fn build_tensor(windows: &[EpochWindow]) -> Result<FeatureTensor, FeatureError> {
    let first = windows.first().ok_or(FeatureError::MissingBand {
        expected: 0,
        found: None,
    })?;
    let channels = first.samples.nrows();
    let mut values = Array3::zeros((channels, channels, windows.len()));
    for (t, w) in windows.iter().enumerate() {
        if w.band_index != t {
            return Err(FeatureError::MissingBand {
                expected: t,
                found: Some(w.band_index),
            });
        }
        if w.samples.nrows() != channels {
            return Err(FeatureError::ShapeMismatch(format!(
                "band {t} has {} channels, expected {channels}",
                w.samples.nrows()
            )));
        }
        if w.trial_id != first.trial_id || w.label != first.label {
            return Err(FeatureError::ShapeMismatch(format!(
                "band {t} belongs to trial {} but band 0 to trial {}",
                w.trial_id, first.trial_id
            )));
        }
        values.slice_mut(s![.., .., t]).assign(&nscm(w)?.values);
    }
    Ok(FeatureTensor {
        values,
        trial_id: first.trial_id,
        label: first.label,
    })
}
