//! Dataset I/O, the two-session train/test protocol and a synthetic
//! sensorimotor-rhythm generator.
//!
//! # Container layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | content                                         |
//! |--------|------|-------------------------------------------------|
//! | 0      | 4    | magic `EEGT`                                    |
//! | 4      | 2    | version (`u16`, currently 1)                    |
//! | 6      | 4    | header length `L` in bytes (`u32`)              |
//! | 10     | L    | UTF-8 JSON header                               |
//! | 10 + L | ...  | payloads, `f64` row-major, in header order      |
//!
//! The header carries `kind`, `fs`, `channel_labels`, `events`
//! (`{"onset": sample, "cue": "left"|"right"|"feet"|"tongue"}`, sorted by
//! onset), `payloads` (`{"name", "dtype": "f64", "shape"}`) and a free-form
//! `meta` object. The file length must equal the header plus the declared
//! payload sizes exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::baselines::{CspModel, LdaModel, LinearPipeline};
use crate::features::FeatureTensor;
use crate::model::{check_params, Architecture, CnnGruConfig, TrainedModel};
use crate::nn::{ParamSet, Tensor};
use crate::signal::{design_bandpass, BandSpec, ClassLabel, Cue, CueEvent, RawRecording, SignalError};

pub const MAGIC: &[u8; 4] = b"EEGT";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"EEGT\"")]
    BadMagic([u8; 4]),
    #[error("container version {0} is not supported (expected {VERSION})")]
    VersionUnsupported(u16),
    #[error("payload truncated: header declares {expected} bytes, file holds {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{extra} unexpected bytes after the declared payloads")]
    TrailingData { extra: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("missing {0} session")]
    MissingSession(&'static str),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadSpec {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl PayloadSpec {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>) -> Self {
        PayloadSpec {
            name: name.into(),
            dtype: "f64".into(),
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fs: Option<f64>,
    #[serde(default)]
    pub channel_labels: Vec<String>,
    #[serde(default)]
    pub events: Vec<CueEvent>,
    pub payloads: Vec<PayloadSpec>,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

impl ContainerHeader {
    pub fn new(kind: impl Into<String>) -> Self {
        ContainerHeader {
            kind: kind.into(),
            fs: None,
            channel_labels: Vec::new(),
            events: Vec::new(),
            payloads: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if let Some(fs) = self.fs {
            if !(fs > 0.0 && fs.is_finite()) {
                return Err(DataError::MalformedHeader(format!("fs must be positive, got {fs}")));
            }
        }
        if self.events.windows(2).any(|w| w[0].onset > w[1].onset) {
            return Err(DataError::MalformedHeader("events are not sorted by onset".into()));
        }
        if let Some(p) = self.payloads.iter().find(|p| p.dtype != "f64") {
            return Err(DataError::MalformedHeader(format!(
                "payload {} has unsupported dtype {}",
                p.name, p.dtype
            )));
        }
        Ok(())
    }
}

/// A parsed container: header plus one flat buffer per declared payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub payloads: Vec<Vec<f64>>,
}

impl Container {
    pub fn new(header: ContainerHeader) -> Self {
        Container {
            header,
            payloads: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.header.payloads.push(PayloadSpec::f64(name, shape));
        self.payloads.push(values);
    }

    pub fn payload(&self, name: &str) -> Option<(&PayloadSpec, &[f64])> {
        self.header
            .payloads
            .iter()
            .position(|p| p.name == name)
            .map(|i| (&self.header.payloads[i], self.payloads[i].as_slice()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        self.header.validate()?;
        if self.header.payloads.len() != self.payloads.len()
            || self.header.payloads.iter().zip(&self.payloads).any(|(s, p)| s.len() != p.len())
        {
            return Err(DataError::MalformedHeader("payload buffers do not match their specs".into()));
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| DataError::MalformedHeader(e.to_string()))?;
        let header_len = u32::try_from(header.len()).map_err(|_| DataError::MalformedHeader("header too large".into()))?;
        let body: usize = self.payloads.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(10 + header.len() + 8 * body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.payloads {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses only the magic, version and header.
    pub fn header_from_bytes(bytes: &[u8]) -> Result<(ContainerHeader, usize), DataError> {
        if bytes.len() < 10 {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(DataError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
            }
            return Err(DataError::MalformedHeader(format!("file is only {} bytes", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(DataError::VersionUnsupported(version));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let header_end = 10usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| DataError::MalformedHeader(format!("header length {header_len} exceeds file size")))?;
        let header: ContainerHeader = serde_json::from_slice(&bytes[10..header_end])
            .map_err(|e| DataError::MalformedHeader(e.to_string()))?;
        header.validate()?;
        Ok((header, header_end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let (header, mut offset) = Self::header_from_bytes(bytes)?;
        let expected: usize = header.payloads.iter().map(|p| 8 * p.len()).sum();
        let found = bytes.len() - offset;
        if found < expected {
            return Err(DataError::TruncatedPayload { expected, found });
        }
        if found > expected {
            return Err(DataError::TrailingData {
                extra: found - expected,
            });
        }
        let payloads = header
            .payloads
            .iter()
            .map(|p| {
                let n = p.len();
                let values = bytes[offset..offset + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                offset += 8 * n;
                values
            })
            .collect();
        Ok(Container { header, payloads })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

pub fn recording_to_container(rec: &RawRecording) -> Container {
    let mut header = ContainerHeader::new("recording");
    header.fs = Some(rec.fs);
    header.channel_labels = rec.channel_labels.clone();
    header.events = rec.events.clone();
    let mut c = Container::new(header);
    let (channels, samples) = rec.samples.dim();
    c.push("samples", vec![channels, samples], rec.samples.iter().copied().collect());
    c
}

pub fn recording_from_container(c: Container) -> Result<RawRecording, DataError> {
    let (spec, values) = c
        .payload("samples")
        .ok_or_else(|| DataError::MalformedHeader("no \"samples\" payload".into()))?;
    let [channels, n] = spec.shape[..] else {
        return Err(DataError::MalformedHeader(format!("samples payload has shape {:?}", spec.shape)));
    };
    let fs = c
        .header
        .fs
        .ok_or_else(|| DataError::MalformedHeader("recording without fs".into()))?;
    let samples = Array2::from_shape_vec((channels, n), values.to_vec())
        .map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    Ok(RawRecording::new(samples, fs, c.header.channel_labels, c.header.events)?)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<RawRecording, DataError> {
    recording_from_container(Container::read(path)?)
}

pub fn write_container(rec: &RawRecording, path: impl AsRef<Path>) -> Result<(), DataError> {
    rec.validate()?;
    recording_to_container(rec).write(path)
}

/// One rank-3 payload per trial, named `trial_<id>`.
pub fn features_to_container(tensors: &[FeatureTensor]) -> Container {
    let mut header = ContainerHeader::new("features");
    header.meta.insert(
        "labels".into(),
        Value::Array(tensors.iter().map(|t| serde_json::to_value(t.label).expect("label")).collect()),
    );
    let mut c = Container::new(header);
    for t in tensors {
        let (a, b, d) = t.values.dim();
        c.push(format!("trial_{}", t.trial_id), vec![a, b, d], t.values.iter().copied().collect());
    }
    c
}

pub fn features_from_container(c: &Container) -> Result<Vec<FeatureTensor>, DataError> {
    let labels: Vec<ClassLabel> = c
        .header
        .meta
        .get("labels")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .map_err(|e| DataError::MalformedHeader(e.to_string()))?
        .ok_or_else(|| DataError::MalformedHeader("feature container without labels".into()))?;
    if labels.len() != c.payloads.len() {
        return Err(DataError::MalformedHeader("label count differs from payload count".into()));
    }
    c.header
        .payloads
        .iter()
        .zip(&c.payloads)
        .zip(labels)
        .map(|((spec, values), label)| {
            let trial_id = spec
                .name
                .strip_prefix("trial_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DataError::MalformedHeader(format!("bad payload name {}", spec.name)))?;
            let [a, b, d] = spec.shape[..] else {
                return Err(DataError::MalformedHeader(format!("{} is not rank 3", spec.name)));
            };
            let values = Array3::from_shape_vec((a, b, d), values.clone())
                .map_err(|e| DataError::MalformedHeader(e.to_string()))?;
            Ok(FeatureTensor {
                values,
                trial_id,
                label,
            })
        })
        .collect()
}

fn meta_json<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("serializable metadata")
}

fn meta_field<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T, DataError> {
    let v = c
        .header
        .meta
        .get(key)
        .ok_or_else(|| DataError::MalformedHeader(format!("missing meta.{key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| DataError::MalformedHeader(format!("meta.{key}: {e}")))
}

fn expect_kind(c: &Container, kind: &str) -> Result<(), DataError> {
    if c.header.kind != kind {
        return Err(DataError::MalformedHeader(format!(
            "container kind is {:?}, expected {kind:?}",
            c.header.kind
        )));
    }
    Ok(())
}

fn payload_vec(c: &Container, name: &str) -> Result<(Vec<usize>, Vec<f64>), DataError> {
    c.payload(name)
        .map(|(spec, v)| (spec.shape.clone(), v.to_vec()))
        .ok_or_else(|| DataError::MalformedHeader(format!("missing payload {name:?}")))
}

/// Network checkpoint: one payload per parameter tensor plus the training
/// curve; configuration and architecture in `meta`.
pub fn model_to_container(model: &TrainedModel) -> Container {
    let mut header = ContainerHeader::new("cnn_checkpoint");
    header.meta.insert("config".into(), meta_json(&model.config));
    header.meta.insert("architecture".into(), meta_json(&model.architecture));
    let mut c = Container::new(header);
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        c.push(name.clone(), t.shape.clone(), t.values.clone());
    }
    c.push("training_curve", vec![model.training_curve.len()], model.training_curve.clone());
    c
}

pub fn model_from_container(c: &Container) -> Result<TrainedModel, DataError> {
    expect_kind(c, "cnn_checkpoint")?;
    let config: CnnGruConfig = meta_field(c, "config")?;
    let architecture: Architecture = meta_field(c, "architecture")?;
    let mut params = ParamSet::default();
    let mut curve = None;
    for (spec, values) in c.header.payloads.iter().zip(&c.payloads) {
        if spec.name == "training_curve" {
            curve = Some(values.clone());
        } else {
            let t = Tensor::new(values.clone(), spec.shape.clone())
                .map_err(|e| DataError::MalformedHeader(e.to_string()))?;
            params.push(&spec.name, t);
        }
    }
    check_params(&params, &config, architecture).map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    Ok(TrainedModel {
        params,
        config,
        architecture,
        training_curve: curve.ok_or_else(|| DataError::MalformedHeader("missing training curve".into()))?,
    })
}

/// CSP/CSSP filters with their LDA classifier.
pub fn linear_to_container(model: &LinearPipeline) -> Container {
    let mut header = ContainerHeader::new("linear_checkpoint");
    header.meta.insert("delay".into(), meta_json(&model.csp.delay));
    header.meta.insert("majority".into(), meta_json(&model.lda.majority));
    let mut c = Container::new(header);
    let (rows, cols) = model.csp.filters.dim();
    c.push("csp.filters", vec![rows, cols], model.csp.filters.iter().copied().collect());
    c.push("csp.eigenvalues", vec![rows], model.csp.eigenvalues.clone());
    c.push("lda.weight", vec![model.lda.weight.len()], model.lda.weight.clone());
    c.push("lda.bias", vec![1], vec![model.lda.bias]);
    c
}

pub fn linear_from_container(c: &Container) -> Result<LinearPipeline, DataError> {
    expect_kind(c, "linear_checkpoint")?;
    let (shape, filters) = payload_vec(c, "csp.filters")?;
    let [rows, cols] = shape[..] else {
        return Err(DataError::MalformedHeader("csp.filters is not rank 2".into()));
    };
    let filters = Array2::from_shape_vec((rows, cols), filters).map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    let (_, eigenvalues) = payload_vec(c, "csp.eigenvalues")?;
    let (_, weight) = payload_vec(c, "lda.weight")?;
    let (_, bias) = payload_vec(c, "lda.bias")?;
    if eigenvalues.len() != rows || weight.len() != rows || bias.len() != 1 {
        return Err(DataError::MalformedHeader("linear checkpoint sizes disagree".into()));
    }
    Ok(LinearPipeline {
        csp: CspModel {
            filters,
            eigenvalues,
            delay: meta_field(c, "delay")?,
        },
        lda: LdaModel {
            weight,
            bias: bias[0],
            majority: meta_field(c, "majority")?,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitWarning {
    ClassImbalance {
        session: &'static str,
        left: usize,
        right: usize,
    },
}

/// Hand-cue trials of one subject, split by session.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSplit {
    /// Training session with only left/right cues retained.
    pub train: RawRecording,
    /// Evaluation session with only left/right cues retained.
    pub test: RawRecording,
    /// Trial ids, parallel to `train.events`.
    pub train_ids: Vec<usize>,
    /// Trial ids, parallel to `test.events`, continuing after the training ids.
    pub test_ids: Vec<usize>,
    /// Non-hand cues removed across both sessions.
    pub dropped: usize,
    pub warnings: Vec<SplitWarning>,
}

fn hand_only(rec: &RawRecording, session: &'static str, warnings: &mut Vec<SplitWarning>) -> (RawRecording, usize) {
    let mut out = rec.clone();
    out.events.retain(|e| e.cue.hand_class().is_some());
    let dropped = rec.events.len() - out.events.len();
    let left = out.events.iter().filter(|e| e.cue == Cue::Left).count();
    let right = out.events.len() - left;
    if dropped > 0 {
        log::info!("{session} session: dropped {dropped} non-hand cues");
    }
    if left != right {
        log::warn!("{session} session is imbalanced: {left} left vs {right} right");
        warnings.push(SplitWarning::ClassImbalance { session, left, right });
    }
    (out, dropped)
}

/// Training session to train, evaluation session to test, left/right only.
pub fn make_split(training: Option<&RawRecording>, evaluation: Option<&RawRecording>) -> Result<SubjectSplit, DataError> {
    let training = training.ok_or(DataError::MissingSession("training"))?;
    let evaluation = evaluation.ok_or(DataError::MissingSession("evaluation"))?;
    let mut warnings = Vec::new();
    let (train, d1) = hand_only(training, "training", &mut warnings);
    let (test, d2) = hand_only(evaluation, "evaluation", &mut warnings);
    let n_train = train.events.len();
    Ok(SubjectSplit {
        train_ids: (0..n_train).collect(),
        test_ids: (n_train..n_train + test.events.len()).collect(),
        train,
        test,
        dropped: d1 + d2,
        warnings,
    })
}

/// How the μ attenuation evolves during the imagery period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErdModulation {
    /// Constant attenuation `1 - erd_depth` on the cued class's channels.
    Sustained,
    /// Both classes modulate the union of the ERD channel sets with a
    /// sawtooth of random phase: attenuation rises over each period for
    /// left cues and falls for right cues. At any fixed time the attenuation
    /// has the same distribution for both classes; only its direction of
    /// change differs.
    Sawtooth { period_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Trials per class.
    pub n_trials: usize,
    pub fs: f64,
    pub channels: usize,
    pub trial_len_s: f64,
    /// Cue time within each trial.
    pub cue_s: f64,
    /// Length of the imagery period after the cue.
    pub mi_len_s: f64,
    pub mu_freq_hz: f64,
    pub mu_amplitude: f64,
    pub erd_depth: f64,
    /// ERD channel indices for left and right cues. Empty means the default
    /// contralateral sets from [`default_erd_channels`].
    pub erd_channels: [Vec<usize>; 2],
    /// Standard deviation of the 1-40 Hz background.
    pub noise_sigma: f64,
    pub modulation: ErdModulation,
    /// Seeds the subject: the spatial structure of the rhythm.
    pub seed: u64,
    /// Seeds one recording session of that subject: trial order, noise and
    /// modulation phases. Sessions of one seed share their spatial structure.
    pub session: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_trials: 20,
            fs: 250.0,
            channels: 8,
            trial_len_s: 7.5,
            cue_s: 2.0,
            mi_len_s: 4.0,
            mu_freq_hz: 10.0,
            mu_amplitude: 1.0,
            erd_depth: 0.8,
            erd_channels: [Vec::new(), Vec::new()],
            noise_sigma: 0.5,
            modulation: ErdModulation::Sustained,
            seed: 0,
            session: 0,
        }
    }
}

// Montage of the 22-channel competition cap, reordered so that small subsets
// keep the sensorimotor sites and Cz.
const MONTAGE: [&str; 22] = [
    "C3", "C4", "Cz", "FC3", "FC4", "CP3", "CP4", "C1", "C2", "C5", "C6", "FC1", "FC2", "CP1", "CP2", "FCz",
    "CPz", "Fz", "P1", "Pz", "P2", "POz",
];

pub fn synthetic_channel_labels(channels: usize) -> Vec<String> {
    (0..channels)
        .map(|i| MONTAGE.get(i).map_or_else(|| format!("X{i}"), |s| s.to_string()))
        .collect()
}

/// Contralateral sites: left-hand imagery attenuates the right hemisphere
/// (C4, FC4, CP4) and vice versa.
pub fn default_erd_channels(channels: usize) -> [Vec<usize>; 2] {
    let labels = synthetic_channel_labels(channels);
    let pick = |names: &[&str]| -> Vec<usize> {
        names
            .iter()
            .filter_map(|n| labels.iter().position(|l| l == n))
            .collect()
    };
    [pick(&["C4", "FC4", "CP4"]), pick(&["C3", "FC3", "CP3"])]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.erd_depth) {
            return Err(format!("erd_depth must lie in [0, 1], got {}", self.erd_depth));
        }
        if self.channels < 3 {
            return Err("need at least 3 channels".into());
        }
        if self.n_trials == 0 {
            return Err("need at least one trial per class".into());
        }
        if !(self.fs > 80.0) {
            return Err(format!("fs must exceed 80 Hz for the 1-40 Hz background, got {}", self.fs));
        }
        if !(self.cue_s >= 0.0 && self.mi_len_s > 0.0 && self.cue_s + self.mi_len_s <= self.trial_len_s) {
            return Err("cue and imagery period must fit inside the trial".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.mu_amplitude >= 0.0) {
            return Err("amplitudes must be non-negative".into());
        }
        if let Some(&bad) = self.erd_channels.iter().flatten().find(|&&c| c >= self.channels) {
            return Err(format!("ERD channel {bad} out of range for {} channels", self.channels));
        }
        if let ErdModulation::Sawtooth { period_s } = self.modulation {
            if !(period_s > 0.0) {
                return Err("sawtooth period must be positive".into());
            }
        }
        Ok(())
    }

    fn resolved_erd_channels(&self) -> [Vec<usize>; 2] {
        let defaults = default_erd_channels(self.channels);
        [0, 1].map(|i| {
            if self.erd_channels[i].is_empty() {
                defaults[i].clone()
            } else {
                self.erd_channels[i].clone()
            }
        })
    }
}

/// Gain applied to the μ rhythm `t` seconds after the cue.
fn erd_gain(spec: &SyntheticSpec, class: ClassLabel, in_set: [bool; 2], t: f64, phase: f64) -> f64 {
    if t < 0.0 || t >= spec.mi_len_s {
        return 1.0;
    }
    match spec.modulation {
        ErdModulation::Sustained => {
            if in_set[class.index()] {
                1.0 - spec.erd_depth
            } else {
                1.0
            }
        }
        ErdModulation::Sawtooth { period_s } => {
            if !(in_set[0] || in_set[1]) {
                return 1.0;
            }
            let ramp = (phase + t / period_s).fract();
            let ramp = match class {
                ClassLabel::Left => ramp,
                ClassLabel::Right => 1.0 - ramp,
            };
            1.0 - spec.erd_depth * ramp
        }
    }
}

/// Continuous recording of `2 * n_trials` back-to-back trials in shuffled
/// class order, with one cue event per trial.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RawRecording, DataError> {
    spec.validate().map_err(DataError::MalformedHeader)?;
    let mut subject_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.session.wrapping_add(1));
    let fs = spec.fs;
    let trial_len = (spec.trial_len_s * fs).round() as usize;
    let cue_offset = (spec.cue_s * fs).round() as usize;

    let mut classes: Vec<ClassLabel> = ClassLabel::ALL
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, spec.n_trials))
        .collect();
    classes.shuffle(&mut rng);
    let n = classes.len() * trial_len;

    // Background: white noise shaped to 1-40 Hz, rescaled to noise_sigma.
    let shaping = design_bandpass(&BandSpec::new(1.0, 40.0, 4), fs)?;
    let mut samples = Array2::<f64>::zeros((spec.channels, n));
    for mut row in samples.rows_mut() {
        let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let shaped = shaping.filtfilt(&white);
        let std = (shaped.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let scale = if std > 0.0 { spec.noise_sigma / std } else { 0.0 };
        row.iter_mut().zip(&shaped).for_each(|(r, s)| *r = s * scale);
    }

    let erd = spec.resolved_erd_channels();
    let omega = 2.0 * PI * spec.mu_freq_hz / fs;
    // One continuous rhythm per channel with a fixed phase, so the spatial
    // covariance of the rhythm is the same in every trial.
    let phases: Vec<f64> = (0..spec.channels).map(|_| subject_rng.random_range(0.0..2.0 * PI)).collect();
    let mut events = Vec::with_capacity(classes.len());
    for (trial, &class) in classes.iter().enumerate() {
        let start = trial * trial_len;
        let onset = start + cue_offset;
        events.push(CueEvent {
            onset,
            cue: class.into(),
        });
        let saw_phase: f64 = rng.random();
        for ch in 0..spec.channels {
            let in_set = [erd[0].contains(&ch), erd[1].contains(&ch)];
            for k in 0..trial_len {
                let t_cue = (k as f64 - cue_offset as f64) / fs;
                let gain = erd_gain(spec, class, in_set, t_cue, saw_phase);
                let n = (start + k) as f64;
                samples[[ch, start + k]] += spec.mu_amplitude * gain * (omega * n + phases[ch]).sin();
            }
        }
    }

    Ok(RawRecording::new(samples, fs, synthetic_channel_labels(spec.channels), events)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_recording(seed: u64) -> RawRecording {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = Array2::from_shape_fn((3, 40), |_| rng.sample::<f64, _>(StandardNormal));
        RawRecording::new(
            samples,
            250.0,
            vec!["C3".into(), "Cz".into(), "C4".into()],
            vec![
                CueEvent { onset: 2, cue: Cue::Left },
                CueEvent { onset: 10, cue: Cue::Feet },
                CueEvent { onset: 20, cue: Cue::Right },
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let rec = tiny_recording(1);
        let bytes = recording_to_container(&rec).to_bytes().unwrap();
        let back = recording_from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, rec);
        assert_eq!(recording_to_container(&back).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.eegt");
        let rec = tiny_recording(2);
        write_container(&rec, &path).unwrap();
        assert_eq!(read_container(&path).unwrap(), rec);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = recording_to_container(&tiny_recording(1)).to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Container::from_bytes(&bytes), Err(DataError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = recording_to_container(&tiny_recording(1)).to_bytes().unwrap();
        bytes[4..6].copy_from_slice(&7u16.to_le_bytes());
        assert!(matches!(Container::from_bytes(&bytes), Err(DataError::VersionUnsupported(7))));
    }

    #[test]
    fn truncated_payload() {
        // Header declares 100 samples, the file holds 50.
        let rec = RawRecording::new(Array2::zeros((1, 100)), 250.0, vec!["Cz".into()], vec![]).unwrap();
        let bytes = recording_to_container(&rec).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 50 * 8];
        assert!(matches!(
            Container::from_bytes(cut),
            Err(DataError::TruncatedPayload { expected: 800, found: 400 })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Container::from_bytes(&long), Err(DataError::TrailingData { extra: 1 })));
    }

    #[test]
    fn malformed_header() {
        let mut bytes = recording_to_container(&tiny_recording(1)).to_bytes().unwrap();
        bytes[10] = b'[';
        assert!(matches!(Container::from_bytes(&bytes), Err(DataError::MalformedHeader(_))));
        assert!(matches!(Container::from_bytes(b"EEGT\x01\x00\xff\xff\x00\x00{}"), Err(DataError::MalformedHeader(_))));
    }

    #[test]
    fn unsorted_events_rejected() {
        let mut c = recording_to_container(&tiny_recording(1));
        c.header.events.swap(0, 2);
        assert!(matches!(c.to_bytes(), Err(DataError::MalformedHeader(_))));
    }

    #[test]
    fn feature_round_trip() {
        let tensors: Vec<FeatureTensor> = (0..3)
            .map(|i| FeatureTensor {
                values: Array3::from_shape_fn((2, 2, 4), |(a, b, c)| (a + 10 * b + 100 * c + i) as f64 * 0.1),
                trial_id: 40 + i,
                label: ClassLabel::from_index(i % 2).unwrap(),
            })
            .collect();
        let bytes = features_to_container(&tensors).to_bytes().unwrap();
        let back = features_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, tensors);
    }

    #[test]
    fn checkpoint_round_trip() {
        let config = CnnGruConfig {
            channels: 4,
            bands: 2,
            conv1_filters: 3,
            gru_hidden: 2,
            ..CnnGruConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for arch in [Architecture::CnnGru, Architecture::CnnOnly] {
            let model = TrainedModel {
                params: crate::model::init_params(&config, arch, &mut rng),
                config: config.clone(),
                architecture: arch,
                training_curve: vec![0.7, 0.65, 0.1 + 0.2],
            };
            let bytes = model_to_container(&model).to_bytes().unwrap();
            let back = model_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn linear_checkpoint_round_trip() {
        let model = LinearPipeline {
            csp: CspModel {
                filters: Array2::from_shape_fn((2, 3), |(i, j)| (i as f64 + 0.1) / (j as f64 + 0.3)),
                eigenvalues: vec![0.9, 0.1],
                delay: Some(5),
            },
            lda: LdaModel {
                weight: vec![1.0 / 3.0, -2.5],
                bias: 0.1 + 0.2,
                majority: ClassLabel::Right,
            },
        };
        let bytes = linear_to_container(&model).to_bytes().unwrap();
        let c = Container::from_bytes(&bytes).unwrap();
        assert_eq!(linear_from_container(&c).unwrap(), model);
        assert!(model_from_container(&c).is_err());
    }

    fn session(left: usize, right: usize, extra: usize) -> RawRecording {
        let mut cues: Vec<Cue> = std::iter::repeat_n(Cue::Left, left)
            .chain(std::iter::repeat_n(Cue::Right, right))
            .chain(std::iter::repeat_n(Cue::Tongue, extra))
            .collect();
        cues.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let events = cues
            .into_iter()
            .enumerate()
            .map(|(i, cue)| CueEvent { onset: i * 10, cue })
            .collect::<Vec<_>>();
        let n = events.len() * 10 + 10;
        RawRecording::new(Array2::zeros((2, n)), 250.0, vec!["Cz".into(), "C3".into()], events).unwrap()
    }

    #[test]
    fn competition_split() {
        let (a, b) = (session(72, 72, 0), session(72, 72, 0));
        let split = make_split(Some(&a), Some(&b)).unwrap();
        assert_eq!(split.train.events.len(), 144);
        assert_eq!(split.test.events.len(), 144);
        assert!(split.warnings.is_empty());
        assert!(split.train_ids.iter().all(|id| !split.test_ids.contains(id)));
    }

    #[test]
    fn four_class_sessions_keep_hands_only() {
        let (a, b) = (session(72, 72, 144), session(72, 72, 144));
        let split = make_split(Some(&a), Some(&b)).unwrap();
        assert_eq!(split.dropped, 288);
        assert_eq!(split.train.events.len(), 144);
        assert!(split.test.events.iter().all(|e| e.cue.hand_class().is_some()));
    }

    #[test]
    fn imbalance_warns_but_splits() {
        let (a, b) = (session(10, 0, 0), session(5, 5, 0));
        let split = make_split(Some(&a), Some(&b)).unwrap();
        assert_eq!(
            split.warnings,
            vec![SplitWarning::ClassImbalance {
                session: "training",
                left: 10,
                right: 0
            }]
        );
        assert!(matches!(make_split(Some(&a), None), Err(DataError::MissingSession("evaluation"))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n_trials: 3,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.events.len(), 6);
        assert_eq!(a.channel_index("Cz"), Some(2));
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a.samples, c.samples);
        let d = generate_synthetic(&SyntheticSpec { session: 1, ..spec }).unwrap();
        assert_ne!(a.samples, d.samples);
    }

    #[test]
    fn synthetic_spec_validation() {
        let bad = SyntheticSpec {
            erd_depth: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec {
            erd_channels: [vec![9], vec![]],
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_sets_are_contralateral() {
        let sets = default_erd_channels(8);
        let labels = synthetic_channel_labels(8);
        assert!(sets[0].iter().all(|&i| labels[i].ends_with('4')));
        assert!(sets[1].iter().all(|&i| labels[i].ends_with('3')));
    }
}
