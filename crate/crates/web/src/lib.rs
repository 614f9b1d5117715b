//! WebAssembly bindings for the static demo page in `www/`.
//!
//! All functions return flat `Float64Array`s; the page knows the layout.

use mi_decode::data::{generate_synthetic, synthetic_channel_labels, SyntheticSpec};
use mi_decode::pipeline::feature_tensors;
use mi_decode::signal::{design_bandpass, BandSpec, ClassLabel, WindowGrid};
use ndarray::Array2;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Zero-phase gain of the bandpass at `points` frequencies from 0 to
/// Nyquist, interleaved as `[f0, g0, f1, g1, ...]`.
#[wasm_bindgen]
pub fn filter_response(low: f64, high: f64, order: usize, fs: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let coeffs = design_bandpass(&BandSpec::new(low, high, order), fs).map_err(js_err)?;
    let n = points.max(2);
    Ok((0..n)
        .flat_map(|i| {
            let f = 0.5 * fs * i as f64 / (n - 1) as f64;
            [f, coeffs.zero_phase_gain(f, fs)]
        })
        .collect())
}

fn spec(seed: u64, erd_depth: f64, noise_sigma: f64, channels: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        erd_depth,
        noise_sigma,
        channels,
        n_trials: 10,
        ..SyntheticSpec::default()
    }
}

/// First trial of a synthetic session on one channel: the raw trace followed
/// by its 8-30 Hz filtered version (equal halves). The cue class comes last.
#[wasm_bindgen]
pub fn synthetic_trace(seed: u64, erd_depth: f64, noise_sigma: f64, channel: usize) -> Result<Vec<f64>, JsError> {
    let s = spec(seed, erd_depth, noise_sigma, 8);
    let rec = generate_synthetic(&s).map_err(js_err)?;
    if channel >= rec.n_channels() {
        return Err(JsError::new("channel out of range"));
    }
    let len = (s.trial_len_s * s.fs).round() as usize;
    let raw = rec.samples.row(channel).to_vec();
    let filtered = design_bandpass(&BandSpec::sensorimotor(), s.fs).map_err(js_err)?.filtfilt(&raw);
    let class = rec.events[0].cue.hand_class().map_or(-1.0, |c| c.index() as f64);
    let mut out = raw[..len].to_vec();
    out.extend_from_slice(&filtered[..len]);
    out.push(class);
    Ok(out)
}

/// Class-average normalized covariance in one window: `C*C` values for the
/// left-cue mean, then `C*C` for the right-cue mean.
#[wasm_bindgen]
pub fn nscm_by_class(seed: u64, erd_depth: f64, noise_sigma: f64, window_start_s: f64) -> Result<Vec<f64>, JsError> {
    let s = spec(seed, erd_depth, noise_sigma, 8);
    let rec = generate_synthetic(&s).map_err(js_err)?;
    let grid = WindowGrid::single(window_start_s, 2.0);
    let tensors = feature_tensors(&rec, &BandSpec::sensorimotor(), &grid, 0).map_err(js_err)?;
    let c = s.channels;
    let mut out = Vec::with_capacity(2 * c * c);
    for class in ClassLabel::ALL {
        let mut acc = Array2::<f64>::zeros((c, c));
        let mut n = 0.0;
        for t in tensors.iter().filter(|t| t.label == class) {
            acc += &t.slice(0);
            n += 1.0;
        }
        out.extend(acc.iter().map(|v| v / n));
    }
    Ok(out)
}

/// Montage labels for the demo's 8 channels, comma separated.
#[wasm_bindgen]
pub fn channel_labels() -> String {
    synthetic_channel_labels(8).join(",")
}
