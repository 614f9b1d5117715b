//! Preprocessing of continuous EEG.
//!
//! Butterworth bandpass design (bilinear transform of the analog prototype,
//! stored as second-order sections), zero-phase forward-backward filtering,
//! cue-locked sliding-window segmentation and Cz/common-average referencing.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("invalid band {low_hz}-{high_hz} Hz (order {order}) at fs {fs} Hz: {reason}")]
    InvalidBand {
        low_hz: f64,
        high_hz: f64,
        order: usize,
        fs: f64,
        reason: &'static str,
    },
    #[error("filter pole magnitude {magnitude} is not strictly inside the unit circle")]
    NumericalInstability { magnitude: f64 },
    #[error("window {band} of trial {trial} spans samples {start}..{end} but the recording has {len}")]
    OutOfRange {
        trial: usize,
        band: usize,
        start: i64,
        end: i64,
        len: usize,
    },
    #[error("invalid window grid: {0}")]
    InvalidGrid(&'static str),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("reference channel {index} out of range for {channels} channels")]
    BadReference { index: usize, channels: usize },
}

/// Two-class motor-imagery label. `Left` maps to class index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Left,
    Right,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Left, ClassLabel::Right];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Left => 0,
            ClassLabel::Right => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(ClassLabel::Left),
            1 => Some(ClassLabel::Right),
            _ => None,
        }
    }
}

/// Cue type as stored in a recording. Four-class sessions carry feet and
/// tongue cues, which the two-class protocol drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cue {
    Left,
    Right,
    Feet,
    Tongue,
}

impl Cue {
    pub fn hand_class(self) -> Option<ClassLabel> {
        match self {
            Cue::Left => Some(ClassLabel::Left),
            Cue::Right => Some(ClassLabel::Right),
            Cue::Feet | Cue::Tongue => None,
        }
    }
}

impl From<ClassLabel> for Cue {
    fn from(label: ClassLabel) -> Self {
        match label {
            ClassLabel::Left => Cue::Left,
            ClassLabel::Right => Cue::Right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueEvent {
    pub onset: usize,
    pub cue: Cue,
}

/// Continuous multichannel EEG, `samples` is `[channels, time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub samples: Array2<f64>,
    pub fs: f64,
    pub channel_labels: Vec<String>,
    pub events: Vec<CueEvent>,
}

impl RawRecording {
    pub fn new(
        samples: Array2<f64>,
        fs: f64,
        channel_labels: Vec<String>,
        events: Vec<CueEvent>,
    ) -> Result<Self, SignalError> {
        let rec = RawRecording {
            samples,
            fs,
            channel_labels,
            events,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(SignalError::InvalidRecording(format!(
                "sampling rate must be positive, got {}",
                self.fs
            )));
        }
        if self.channel_labels.len() != self.samples.nrows() {
            return Err(SignalError::InvalidRecording(format!(
                "{} channel labels for {} channels",
                self.channel_labels.len(),
                self.samples.nrows()
            )));
        }
        for (i, label) in self.channel_labels.iter().enumerate() {
            if self.channel_labels[..i].contains(label) {
                return Err(SignalError::InvalidRecording(format!(
                    "duplicate channel label {label:?}"
                )));
            }
        }
        if let Some(ev) = self.events.iter().find(|e| e.onset >= self.n_samples()) {
            return Err(SignalError::InvalidRecording(format!(
                "cue onset {} beyond {} samples",
                ev.onset,
                self.n_samples()
            )));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn channel_index(&self, label: &str) -> Option<usize> {
        self.channel_labels.iter().position(|l| l == label)
    }

    /// Events carrying a left/right hand cue, in recording order.
    pub fn hand_events(&self) -> impl Iterator<Item = (usize, ClassLabel)> + '_ {
        self.events
            .iter()
            .filter_map(|e| e.cue.hand_class().map(|c| (e.onset, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Total bandpass order (number of poles); the lowpass prototype has half of it.
    pub order: usize,
}

impl BandSpec {
    pub const fn new(low_hz: f64, high_hz: f64, order: usize) -> Self {
        BandSpec {
            low_hz,
            high_hz,
            order,
        }
    }

    /// 8-30 Hz, the network input band.
    pub const fn sensorimotor() -> Self {
        BandSpec::new(8.0, 30.0, 4)
    }

    /// 8-13 Hz mu band used by the linear baselines.
    pub const fn mu() -> Self {
        BandSpec::new(8.0, 13.0, 4)
    }

    pub fn validate(&self, fs: f64) -> Result<(), SignalError> {
        let err = |reason| SignalError::InvalidBand {
            low_hz: self.low_hz,
            high_hz: self.high_hz,
            order: self.order,
            fs,
            reason,
        };
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(err("sampling rate must be positive"));
        }
        if !(self.low_hz > 0.0) {
            return Err(err("low edge must be positive"));
        }
        if !(self.low_hz < self.high_hz) {
            return Err(err("low edge must be below high edge"));
        }
        if !(self.high_hz < fs / 2.0) {
            return Err(err("high edge must be below Nyquist"));
        }
        if self.order < 2 || self.order % 2 != 0 {
            return Err(err("order must be even and at least 2"));
        }
        Ok(())
    }
}

/// Direct-form II transposed biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }

    fn run(&self, data: &mut [f64]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let (mut s1, mut s2) = (0.0, 0.0);
        for x in data.iter_mut() {
            let y = b0 * *x + s1;
            s1 = b1 * *x - a1 * y + s2;
            s2 = b2 * *x - a2 * y;
            *x = y;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoefficients {
    sections: Vec<Biquad>,
    poles: Vec<Complex64>,
    numerator: Vec<f64>,
    denominator: Vec<f64>,
}

impl FilterCoefficients {
    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    /// Digital poles (z-plane), one per pole of the transfer function.
    pub fn poles(&self) -> &[Complex64] {
        &self.poles
    }

    /// Transfer-function numerator in powers of z^-1.
    pub fn numerator(&self) -> &[f64] {
        &self.numerator
    }

    /// Transfer-function denominator in powers of z^-1, leading 1.
    pub fn denominator(&self) -> &[f64] {
        &self.denominator
    }

    /// Complex response of one forward pass at frequency `f_hz`.
    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f_hz / fs);
        self.sections
            .iter()
            .map(|s| s.response(z_inv))
            .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
    }

    /// Magnitude of the forward-backward (zero-phase) response: `|H|^2`.
    pub fn zero_phase_gain(&self, f_hz: f64, fs: f64) -> f64 {
        self.response(f_hz, fs).norm_sqr()
    }

    fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// One causal pass over `data` in place.
    pub fn filter_in_place(&self, data: &mut [f64]) {
        for s in &self.sections {
            s.run(data);
        }
    }

    /// Zero-phase filtering of one channel. The signal is extended at both
    /// ends by odd reflection before the forward and backward passes.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

        self.filter_in_place(&mut ext);
        ext.reverse();
        self.filter_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Butterworth bandpass of total order `band.order`.
pub fn design_bandpass(band: &BandSpec, fs: f64) -> Result<FilterCoefficients, SignalError> {
    band.validate(fs)?;
    let proto_order = band.order / 2;

    // Prewarped analog edges.
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (w1, w2) = (warp(band.low_hz), warp(band.high_hz));
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    // Analog lowpass prototype poles on the unit circle, left half-plane.
    let proto: Vec<Complex64> = (0..proto_order)
        .map(|k| {
            let theta = PI * (2 * k + 1 + proto_order) as f64 / (2 * proto_order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();

    // Lowpass -> bandpass: each prototype pole splits into two.
    let mut analog = Vec::with_capacity(band.order);
    for p in &proto {
        let pb = p * (bw / 2.0);
        let disc = (pb * pb - w0 * w0).sqrt();
        analog.push(pb + disc);
        analog.push(pb - disc);
    }

    // Bilinear transform.
    let two_fs = 2.0 * fs;
    let digital: Vec<Complex64> = analog
        .iter()
        .map(|s| (two_fs + s) / (two_fs - s))
        .collect();

    if let Some(m) = digital
        .iter()
        .map(|p| p.norm())
        .find(|&m| !(m < 1.0 - 1e-10))
    {
        return Err(SignalError::NumericalInstability { magnitude: m });
    }

    // Pair conjugates: upper-half-plane poles with their mirror, then the
    // remaining real poles two at a time.
    let mut complex_upper: Vec<Complex64> = digital.iter().copied().filter(|p| p.im > 1e-12).collect();
    complex_upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(a.arg().total_cmp(&b.arg())));
    let mut reals: Vec<f64> = digital
        .iter()
        .filter(|p| p.im.abs() <= 1e-12)
        .map(|p| p.re)
        .collect();
    reals.sort_by(f64::total_cmp);

    let mut sections: Vec<Biquad> = complex_upper
        .iter()
        .map(|p| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        })
        .collect();
    for pair in reals.chunks(2) {
        let (r1, r2) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(r1 + r2), r1 * r2],
        });
    }

    let mut coeffs = FilterCoefficients {
        sections,
        poles: digital,
        numerator: Vec::new(),
        denominator: Vec::new(),
    };

    // Unit gain at the digital image of the analog centre frequency.
    let f_center = fs / PI * (w0 / two_fs).atan();
    let gain = coeffs.response(f_center, fs).norm();
    let scale = gain.powf(-1.0 / coeffs.sections.len() as f64);
    for s in &mut coeffs.sections {
        for b in &mut s.b {
            *b *= scale;
        }
    }

    coeffs.numerator = coeffs.sections.iter().fold(vec![1.0], |acc, s| poly_mul(&acc, &s.b));
    coeffs.denominator = coeffs.sections.iter().fold(vec![1.0], |acc, s| poly_mul(&acc, &s.a));
    Ok(coeffs)
}

/// Zero-phase filtering of every channel.
pub fn apply_filter(x: &RawRecording, coeffs: &FilterCoefficients) -> RawRecording {
    let mut out = x.clone();
    for (mut row_out, row_in) in out.samples.rows_mut().into_iter().zip(x.samples.rows()) {
        let filtered = coeffs.filtfilt(&row_in.to_vec());
        row_out.assign(&ndarray::ArrayView1::from(&filtered));
    }
    out
}

/// Subtract the reference channel from every channel, then subtract the
/// per-sample mean across channels.
pub fn local_average_reference(
    x: ArrayView2<'_, f64>,
    ref_channel: usize,
) -> Result<Array2<f64>, SignalError> {
    let channels = x.nrows();
    if ref_channel >= channels {
        return Err(SignalError::BadReference {
            index: ref_channel,
            channels,
        });
    }
    let reference = x.row(ref_channel).to_owned();
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        row -= &reference;
    }
    let mean = out.mean_axis(Axis(0)).expect("at least one channel");
    for mut row in out.rows_mut() {
        row -= &mean;
    }
    Ok(out)
}

/// Cue-relative sliding windows. `count` is the number of temporal bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowGrid {
    pub start_offset_s: f64,
    pub window_len_s: f64,
    pub step_s: f64,
    pub count: usize,
}

impl WindowGrid {
    /// 16 windows of 2 s starting 0.5 s to 2.0 s after the cue.
    pub const fn sliding_16() -> Self {
        WindowGrid {
            start_offset_s: 0.5,
            window_len_s: 2.0,
            step_s: 0.1,
            count: 16,
        }
    }

    /// Single 2 s window 0.5-2.5 s after the cue, used by the baselines.
    pub const fn single(start_offset_s: f64, window_len_s: f64) -> Self {
        WindowGrid {
            start_offset_s,
            window_len_s,
            step_s: 1.0,
            count: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.count == 0 {
            return Err(SignalError::InvalidGrid("count must be at least 1"));
        }
        if !(self.step_s > 0.0 && self.step_s.is_finite()) {
            return Err(SignalError::InvalidGrid("step must be positive"));
        }
        if !(self.window_len_s > 0.0 && self.window_len_s.is_finite()) {
            return Err(SignalError::InvalidGrid("window length must be positive"));
        }
        if !self.start_offset_s.is_finite() {
            return Err(SignalError::InvalidGrid("start offset must be finite"));
        }
        Ok(())
    }

    pub fn window_samples(&self, fs: f64) -> usize {
        (self.window_len_s * fs).round() as usize
    }

    /// Cue-relative start sample of window `band`.
    pub fn start_sample(&self, band: usize, fs: f64) -> i64 {
        ((self.start_offset_s + band as f64 * self.step_s) * fs).round() as i64
    }

    /// Band edges in seconds relative to the cue.
    pub fn band_bounds_s(&self, band: usize) -> (f64, f64) {
        let start = self.start_offset_s + band as f64 * self.step_s;
        (start, start + self.window_len_s)
    }

    /// Latest sample after the cue touched by any window.
    pub fn extent_samples(&self, fs: f64) -> i64 {
        self.start_sample(self.count - 1, fs) + self.window_samples(fs) as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochWindow {
    /// `[channels, window samples]`
    pub samples: Array2<f64>,
    pub band_index: usize,
    pub trial_id: usize,
    pub label: ClassLabel,
}

/// Cut `grid.count` windows per hand-cue event; the outer list follows
/// event order and trial ids count hand events from zero.
pub fn segment(x: &RawRecording, grid: &WindowGrid) -> Result<Vec<Vec<EpochWindow>>, SignalError> {
    grid.validate()?;
    let len = grid.window_samples(x.fs);
    if len == 0 {
        return Err(SignalError::InvalidGrid("window shorter than one sample"));
    }
    x.hand_events()
        .enumerate()
        .map(|(trial, (onset, label))| {
            (0..grid.count)
                .map(|band| {
                    let start = onset as i64 + grid.start_sample(band, x.fs);
                    let end = start + len as i64;
                    if start < 0 || end > x.n_samples() as i64 {
                        return Err(SignalError::OutOfRange {
                            trial,
                            band,
                            start,
                            end,
                            len: x.n_samples(),
                        });
                    }
                    let samples = x.samples.slice(s![.., start as usize..end as usize]).to_owned();
                    Ok(EpochWindow {
                        samples,
                        band_index: band,
                        trial_id: trial,
                        label,
                    })
                })
                .collect()
        })
        .collect()
}
