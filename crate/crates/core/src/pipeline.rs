//! Recording-to-feature glue shared by the harness and the demo.

use ndarray::Array2;
use thiserror::Error;

use crate::features::{build_tensor, FeatureError, FeatureTensor};
use crate::signal::{apply_filter, design_bandpass, local_average_reference, segment, BandSpec, ClassLabel, RawRecording, SignalError, WindowGrid};

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("reference channel {0:?} not in montage")]
    MissingReference(String),
}

/// Label of the reference electrode used before the common average.
pub const REFERENCE_CHANNEL: &str = "Cz";

/// Bandpass, cut `grid.count` windows per hand cue, re-reference each window
/// and stack NSCMs. Trial ids start at `first_id`.
pub fn feature_tensors(
    rec: &RawRecording,
    band: &BandSpec,
    grid: &WindowGrid,
    first_id: usize,
) -> Result<Vec<FeatureTensor>, PipelineError> {
    let reference = rec
        .channel_index(REFERENCE_CHANNEL)
        .ok_or_else(|| PipelineError::MissingReference(REFERENCE_CHANNEL.into()))?;
    let filtered = apply_filter(rec, &design_bandpass(band, rec.fs)?);
    segment(&filtered, grid)?
        .into_iter()
        .map(|mut windows| {
            for w in &mut windows {
                w.samples = local_average_reference(w.samples.view(), reference)?;
                w.trial_id += first_id;
            }
            Ok(build_tensor(&windows)?)
        })
        .collect()
}

/// Bandpassed single-window epochs for the linear baselines. No
/// re-referencing: a common average makes the channel covariance singular.
pub fn baseline_epochs(
    rec: &RawRecording,
    band: &BandSpec,
    start_s: f64,
    len_s: f64,
) -> Result<Vec<(Array2<f64>, ClassLabel)>, PipelineError> {
    let filtered = apply_filter(rec, &design_bandpass(band, rec.fs)?);
    Ok(segment(&filtered, &WindowGrid::single(start_s, len_s))?
        .into_iter()
        .map(|mut w| {
            let w = w.remove(0);
            (w.samples, w.label)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn tensors_per_hand_trial() {
        let rec = generate_synthetic(&SyntheticSpec {
            n_trials: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let grid = WindowGrid {
            count: 4,
            ..WindowGrid::sliding_16()
        };
        let t = feature_tensors(&rec, &BandSpec::sensorimotor(), &grid, 10).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0].values.dim(), (8, 8, 4));
        assert_eq!(t.iter().map(|t| t.trial_id).collect::<Vec<_>>(), vec![10, 11, 12, 13]);
        let e = baseline_epochs(&rec, &BandSpec::mu(), 0.5, 2.0).unwrap();
        assert_eq!(e[0].0.dim(), (8, 500));
    }

    #[test]
    fn reference_required() {
        let mut rec = generate_synthetic(&SyntheticSpec {
            n_trials: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        rec.channel_labels[2] = "X".into();
        assert!(matches!(
            feature_tensors(&rec, &BandSpec::sensorimotor(), &WindowGrid::sliding_16(), 0),
            Err(PipelineError::MissingReference(_))
        ));
    }
}
