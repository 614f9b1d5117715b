//! `synth` and `convert-check`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mi_decode::data::{
    features_from_container, linear_from_container, model_from_container, recording_from_container, write_container,
    Container, SyntheticSpec,
};
use mi_decode::signal::Cue;
use sha2::{Digest, Sha256};

use crate::runner::synthetic_sessions;
use crate::HarnessError;

/// Writes `S<i>T.eegt` (training) and `S<i>E.eegt` (evaluation) for each
/// synthetic subject and returns a `[[subject]]` TOML block listing them.
pub fn synth(spec: &SyntheticSpec, subjects: usize, out: &Path) -> Result<String, HarnessError> {
    fs::create_dir_all(out).map_err(|e| HarnessError::Runtime(format!("{}: {e}", out.display())))?;
    let mut toml = String::new();
    for i in 0..subjects {
        let id = format!("S{:02}", i + 1);
        let (train, test) = synthetic_sessions(spec, i)?;
        let paths: [PathBuf; 2] = [out.join(format!("{id}T.eegt")), out.join(format!("{id}E.eegt"))];
        for (rec, path) in [&train, &test].into_iter().zip(&paths) {
            write_container(rec, path).map_err(HarnessError::runtime)?;
        }
        writeln!(
            toml,
            "[[subject]]\nid = {id:?}\ntrain = {:?}\ntest = {:?}\n",
            paths[0].display().to_string(),
            paths[1].display().to_string()
        )
        .expect("string write");
    }
    Ok(toml)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What `convert-check` found in one file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub kind: String,
    pub sha256: String,
    /// Re-encoding reproduces the input byte for byte.
    pub canonical: bool,
    pub lines: Vec<String>,
}

/// Decodes a container, checks it against its kind, re-encodes it and
/// confirms every payload survives bit for bit.
pub fn convert_check(path: &Path) -> Result<CheckReport, HarnessError> {
    let fail = |e: &dyn std::fmt::Display| HarnessError::Data(format!("{}: {e}", path.display()));
    let bytes = fs::read(path).map_err(|e| fail(&e))?;
    let container = Container::from_bytes(&bytes).map_err(|e| fail(&e))?;
    let reencoded = container.to_bytes().map_err(|e| fail(&e))?;
    let again = Container::from_bytes(&reencoded).map_err(|e| fail(&e))?;
    let bits = |c: &Container| -> Vec<Vec<u64>> { c.payloads.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect() };
    if bits(&again) != bits(&container) || again.header != container.header {
        return Err(fail(&"re-encoded container differs from the input"));
    }

    let h = &container.header;
    let mut lines = vec![format!("kind {}", h.kind)];
    match h.kind.as_str() {
        "recording" => {
            let rec = recording_from_container(container.clone()).map_err(|e| fail(&e))?;
            let count = |c: Cue| rec.events.iter().filter(|e| e.cue == c).count();
            lines.push(format!(
                "{} channels x {} samples at {} Hz ({:.1} s)",
                rec.n_channels(),
                rec.n_samples(),
                rec.fs,
                rec.n_samples() as f64 / rec.fs
            ));
            lines.push(format!(
                "events: {} left, {} right, {} feet, {} tongue",
                count(Cue::Left),
                count(Cue::Right),
                count(Cue::Feet),
                count(Cue::Tongue)
            ));
            if rec.channel_index("Cz").is_none() {
                lines.push("warning: no Cz channel; the network pipeline needs it".into());
            }
        }
        "features" => {
            let t = features_from_container(&container).map_err(|e| fail(&e))?;
            lines.push(format!("{} feature tensors", t.len()));
        }
        "cnn_checkpoint" => {
            let m = model_from_container(&container).map_err(|e| fail(&e))?;
            lines.push(format!(
                "{:?} model, {} parameter tensors, {} epochs",
                m.architecture,
                m.params.tensors.len(),
                m.training_curve.len()
            ));
        }
        "linear_checkpoint" => {
            let m = linear_from_container(&container).map_err(|e| fail(&e))?;
            lines.push(format!("{} spatial filters, delay {:?}", m.csp.filters.nrows(), m.csp.delay));
        }
        other => lines.push(format!("unknown kind {other:?}; only the framing was checked")),
    }
    for (spec, _) in h.payloads.iter().zip(&container.payloads) {
        lines.push(format!("payload {} {:?}", spec.name, spec.shape));
    }
    Ok(CheckReport {
        kind: h.kind.clone(),
        sha256: sha256_hex(&bytes),
        canonical: reencoded == bytes,
        lines,
    })
}
