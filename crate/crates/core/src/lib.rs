//! Motor-imagery EEG decoding with spatio-temporal covariance features.
//!
//! ```text
//! RawRecording --bandpass 8-30 Hz--> segment (T sliding windows per cue)
//!   --> Cz / common-average reference --> NSCM per window
//!   --> FeatureTensor [C, C, T] --> CNN (per band, shared) --> GRU --> logits
//! ```
//!
//! CSP and CSSP with LDA on a single 8-13 Hz window serve as linear
//! baselines, and a CNN-only model on one band at a time serves as the
//! ablation.

pub mod baselines;
pub mod data;
pub mod features;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod signal;
