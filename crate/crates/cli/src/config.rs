//! Experiment configuration: TOML in, canonical JSON digest out.

use std::fmt;
use std::path::{Path, PathBuf};

use mi_decode::baselines::CspConfig;
use mi_decode::data::SyntheticSpec;
use mi_decode::model::CnnGruConfig;
use mi_decode::signal::{BandSpec, WindowGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CnnGru,
    CnnOnly,
    CspLda,
    CsspLda,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::CnnGru => "cnn_gru",
            Method::CnnOnly => "cnn_only",
            Method::CspLda => "csp_lda",
            Method::CsspLda => "cssp_lda",
        }
    }

    pub fn is_network(self) -> bool {
        matches!(self, Method::CnnGru | Method::CnnOnly)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One subject's two sessions as container files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectFiles {
    pub id: String,
    pub train: PathBuf,
    pub test: PathBuf,
}

/// `subjects` synthetic subjects; subject `i` uses `spec.seed + i` for its
/// spatial structure, session 0 for training and session 1 for testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub subjects: usize,
    #[serde(default)]
    pub spec: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "BandSpec::mu")]
    pub band: BandSpec,
    /// Window start after the cue, seconds.
    #[serde(default = "default_baseline_start")]
    pub window_start_s: f64,
    #[serde(default = "default_baseline_len")]
    pub window_len_s: f64,
    #[serde(default)]
    pub csp: CspConfig,
    /// CSSP delay in samples. Required when `cssp_lda` is selected.
    #[serde(default)]
    pub delay: Option<usize>,
    /// Extra CSSP runs, one report column `cssp_lda_d<τ>` per delay.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delay_sweep: Vec<usize>,
}

fn default_baseline_start() -> f64 {
    0.5
}

fn default_baseline_len() -> f64 {
    2.0
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            band: BandSpec::mu(),
            window_start_s: default_baseline_start(),
            window_len_s: default_baseline_len(),
            csp: CspConfig::default(),
            delay: None,
            delay_sweep: Vec::new(),
        }
    }
}

fn default_grid() -> WindowGrid {
    WindowGrid::sliding_16()
}

fn default_cue_latency() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Report columns, in order.
    pub methods: Vec<Method>,
    /// Master seed; per-subject seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Cue onset relative to trial start, used only to label ablation rows
    /// with trial-relative times.
    #[serde(default = "default_cue_latency")]
    pub cue_latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, rename = "subject", skip_serializing_if = "Vec::is_empty")]
    pub subjects: Vec<SubjectFiles>,
    /// Network input band.
    #[serde(default = "BandSpec::sensorimotor")]
    pub band: BandSpec,
    #[serde(default = "default_grid")]
    pub grid: WindowGrid,
    /// `model.seed` is replaced by the per-subject seed at run time.
    #[serde(default)]
    pub model: CnnGruConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{} invalid field(s):\n{}", .0.len(), .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Every problem found, each tagged with its field path.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut err = |field: &str, message: String| {
            out.push(Diagnostic {
                field: field.into(),
                message,
            })
        };

        if self.methods.is_empty() {
            err("methods", "at least one method is required".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                err("methods", format!("{m} listed twice"));
            }
        }
        match (&self.synthetic, self.subjects.is_empty()) {
            (None, true) => err("subject", "no data: give [synthetic] or at least one [[subject]]".into()),
            (Some(_), false) => err("synthetic", "use either [synthetic] or [[subject]], not both".into()),
            _ => {}
        }
        if let Some(syn) = &self.synthetic {
            if syn.subjects == 0 {
                err("synthetic.subjects", "must be at least 1".into());
            }
            if let Err(m) = syn.spec.validate() {
                err("synthetic.spec", m);
            }
            if syn.spec.channels != self.model.channels && self.methods.iter().any(|m| m.is_network()) {
                err(
                    "model.channels",
                    format!("is {} but the synthetic montage has {} channels", self.model.channels, syn.spec.channels),
                );
            }
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if self.subjects[..i].iter().any(|o| o.id == s.id) {
                err(&format!("subject[{i}].id"), format!("duplicate id {:?}", s.id));
            }
        }
        if let Err(e) = self.grid.validate() {
            err("grid", e.to_string());
        }
        if let Err(e) = self.model.validate() {
            let msg = e.to_string();
            let field = ["kernel", "p_drop", "epochs", "strict", "classes", "band"]
                .iter()
                .find(|k| msg.contains(*k))
                .map_or("model".to_string(), |k| match *k {
                    "classes" => "model.n_classes".into(),
                    "band" => "model.bands".into(),
                    k => format!("model.{k}"),
                });
            err(&field, msg);
        }
        if self.methods.contains(&Method::CnnGru) && self.model.bands != self.grid.count {
            err(
                "model.bands",
                format!("is {} but grid.count is {}", self.model.bands, self.grid.count),
            );
        }
        if self.methods.contains(&Method::CsspLda) {
            match self.baseline.delay {
                None => err("baseline.delay", "required for cssp_lda".into()),
                Some(0) => err("baseline.delay", "must be at least 1 sample".into()),
                Some(_) => {}
            }
        }
        if self.baseline.delay_sweep.contains(&0) {
            err("baseline.delay_sweep", "delays must be at least 1 sample".into());
        }
        let pairs = self.baseline.csp.pairs;
        if pairs == 0 {
            err("baseline.csp.pairs", "must be at least 1".into());
        }
        if !(self.baseline.csp.ridge >= 0.0) {
            err("baseline.csp.ridge", "must be non-negative".into());
        }
        if !(self.baseline.window_len_s > 0.0) {
            err("baseline.window_len_s", "must be positive".into());
        }
        if !(self.cue_latency_s >= 0.0) {
            err("cue_latency_s", "must be non-negative".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(d))
        }
    }

    /// Key-sorted compact JSON of the full, defaults-expanded config. The
    /// output directory is left out since it cannot change any result.
    pub fn canonical_json(&self) -> String {
        // serde_json maps are ordered by key, so the re-serialized value is
        // canonical regardless of field declaration order.
        let effective = ExperimentConfig {
            out: None,
            ..self.clone()
        };
        let value = serde_json::to_value(&effective).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Report columns of `run`, in order.
    pub fn report_columns(&self) -> Vec<String> {
        self.methods
            .iter()
            .map(|m| m.name().to_string())
            .chain(self.baseline.delay_sweep.iter().map(|d| format!("cssp_lda_d{d}")))
            .collect()
    }

    /// Subject identifiers in report order.
    pub fn subject_ids(&self) -> Vec<String> {
        match &self.synthetic {
            Some(syn) => (1..=syn.subjects).map(|i| format!("S{i:02}")).collect(),
            None => self.subjects.iter().map(|s| s.id.clone()).collect(),
        }
    }
}

/// `hash(master_seed, subject_id)`: first 8 bytes of SHA-256, little-endian.
pub fn subject_seed(master: u64, subject: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(subject.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
