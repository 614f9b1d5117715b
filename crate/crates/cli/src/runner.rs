//! Experiment execution: load subjects, train every method, collect results.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mi_decode::baselines::LinearPipeline;
use mi_decode::data::{
    generate_synthetic, linear_to_container, make_split, model_to_container, read_container, Container, SubjectSplit,
    SyntheticSpec,
};
use mi_decode::features::FeatureTensor;
use mi_decode::model::{evaluate, train_with_progress, Architecture, CnnGruConfig, TrainedModel};
use mi_decode::pipeline::{baseline_epochs, feature_tensors};
use mi_decode::signal::RawRecording;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{subject_seed, ExperimentConfig, Method};
use crate::report::{band_label, write_ablation, write_curve, write_report, Preamble, Table};
use crate::HarnessError;

pub struct Subject {
    pub id: String,
    pub split: SubjectSplit,
}

/// Synthetic subject `index` (0-based): both sessions of one simulated person.
pub fn synthetic_sessions(spec: &SyntheticSpec, index: usize) -> Result<(RawRecording, RawRecording), HarnessError> {
    let session = |s: u64| {
        generate_synthetic(&SyntheticSpec {
            seed: spec.seed.wrapping_add(index as u64),
            session: s,
            ..spec.clone()
        })
        .map_err(HarnessError::data)
    };
    Ok((session(0)?, session(1)?))
}

pub fn load_subjects(config: &ExperimentConfig) -> Result<Vec<Subject>, HarnessError> {
    let ids = config.subject_ids();
    let mut out = Vec::with_capacity(ids.len());
    for (i, id) in ids.into_iter().enumerate() {
        let (train, test) = match &config.synthetic {
            Some(syn) => synthetic_sessions(&syn.spec, i)?,
            None => {
                let files = &config.subjects[i];
                let read = |p: &Path| {
                    read_container(p).map_err(|e| HarnessError::Data(format!("{}: {e}", p.display())))
                };
                (read(&files.train)?, read(&files.test)?)
            }
        };
        let split = make_split(Some(&train), Some(&test)).map_err(HarnessError::data)?;
        out.push(Subject { id, split });
    }
    Ok(out)
}

fn tensors(config: &ExperimentConfig, split: &SubjectSplit) -> Result<(Vec<FeatureTensor>, Vec<FeatureTensor>), HarnessError> {
    let train = feature_tensors(&split.train, &config.band, &config.grid, 0).map_err(HarnessError::data)?;
    let test = feature_tensors(&split.test, &config.band, &config.grid, train.len()).map_err(HarnessError::data)?;
    Ok((train, test))
}

fn fit_network(
    subject: &str,
    label: &str,
    train: &[FeatureTensor],
    test: &[FeatureTensor],
    config: &CnnGruConfig,
    arch: Architecture,
) -> Result<(TrainedModel, f64), HarnessError> {
    let log_every = (config.epochs / 10).max(1);
    let model = train_with_progress(train, config, arch, |epoch, loss| {
        if epoch % log_every == 0 || epoch + 1 == config.epochs {
            log::debug!("{subject} {label}: epoch {epoch} loss {loss:.6}");
        }
    })
    .map_err(HarnessError::runtime)?;
    let acc = evaluate(&model, test).map_err(HarnessError::runtime)?.accuracy;
    log::info!("{subject} {label}: accuracy {acc}");
    Ok((model, acc))
}

fn single_band(tensors: &[FeatureTensor], band: usize) -> Vec<FeatureTensor> {
    tensors.iter().map(|t| t.band(band)).collect()
}

/// Accuracies for one subject plus the checkpoints that produced them.
pub struct SubjectOutcome {
    pub id: String,
    pub accuracies: Vec<f64>,
    pub checkpoints: Vec<(String, Container)>,
    /// Per-epoch mean training loss of each network, keyed like the checkpoints.
    pub curves: Vec<(String, Vec<f64>)>,
}

fn run_subject(config: &ExperimentConfig, subject: &Subject) -> Result<SubjectOutcome, HarnessError> {
    let seed = subject_seed(config.seed, &subject.id);
    let net_config = CnnGruConfig {
        seed,
        ..config.model.clone()
    };
    let needs_tensors = config.methods.iter().any(|m| m.is_network());
    let (train, test) = if needs_tensors {
        tensors(config, &subject.split)?
    } else {
        (Vec::new(), Vec::new())
    };

    let mut accuracies = Vec::new();
    let mut checkpoints = Vec::new();
    let mut curves = Vec::new();
    for &method in &config.methods {
        let name = format!("{}_{}", subject.id, method.name());
        let (acc, ckpt) = match method {
            Method::CnnGru => {
                let (m, acc) = fit_network(&subject.id, method.name(), &train, &test, &net_config, Architecture::CnnGru)?;
                curves.push((name.clone(), m.training_curve.clone()));
                (acc, model_to_container(&m))
            }
            Method::CnnOnly => {
                let (m, acc) = fit_network(
                    &subject.id,
                    method.name(),
                    &single_band(&train, 0),
                    &single_band(&test, 0),
                    &net_config,
                    Architecture::CnnOnly,
                )?;
                curves.push((name.clone(), m.training_curve.clone()));
                (acc, model_to_container(&m))
            }
            Method::CspLda | Method::CsspLda => {
                let delay = if method == Method::CsspLda { config.baseline.delay } else { None };
                let (acc, m) = run_linear(config, &subject.split, delay)?;
                log::info!("{} {method}: accuracy {acc}", subject.id);
                (acc, linear_to_container(&m))
            }
        };
        accuracies.push(acc);
        checkpoints.push((name, ckpt));
    }
    for &d in &config.baseline.delay_sweep {
        let (acc, m) = run_linear(config, &subject.split, Some(d))?;
        log::info!("{} cssp_lda delay {d}: accuracy {acc}", subject.id);
        accuracies.push(acc);
        checkpoints.push((format!("{}_cssp_lda_d{d}", subject.id), linear_to_container(&m)));
    }
    Ok(SubjectOutcome {
        id: subject.id.clone(),
        accuracies,
        checkpoints,
        curves,
    })
}

fn run_linear(config: &ExperimentConfig, split: &SubjectSplit, delay: Option<usize>) -> Result<(f64, LinearPipeline), HarnessError> {
    let b = &config.baseline;
    let epochs = |rec| baseline_epochs(rec, &b.band, b.window_start_s, b.window_len_s).map_err(HarnessError::data);
    let train = epochs(&split.train)?;
    let test = epochs(&split.test)?;
    let model = LinearPipeline::fit(&train, delay, &b.csp).map_err(HarnessError::runtime)?;
    let mut correct = 0;
    for (x, label) in &test {
        if model.predict(x.view()).map_err(HarnessError::runtime)? == *label {
            correct += 1;
        }
    }
    Ok((correct as f64 / test.len() as f64, model))
}

/// One CNN-only model per window of the grid, plus the full CNN-GRU model
/// when the config lists it.
fn ablate_subject(config: &ExperimentConfig, subject: &Subject) -> Result<SubjectOutcome, HarnessError> {
    let seed = subject_seed(config.seed, &subject.id);
    let net_config = CnnGruConfig {
        seed,
        ..config.model.clone()
    };
    let (train, test) = tensors(config, &subject.split)?;
    let mut accuracies = Vec::new();
    let mut checkpoints = Vec::new();
    let mut curves = Vec::new();
    for band in 0..config.grid.count {
        let label = format!("cnn_only_band{band:02}");
        let (m, acc) = fit_network(
            &subject.id,
            &label,
            &single_band(&train, band),
            &single_band(&test, band),
            &net_config,
            Architecture::CnnOnly,
        )?;
        accuracies.push(acc);
        curves.push((format!("{}_{label}", subject.id), m.training_curve.clone()));
        checkpoints.push((format!("{}_{label}", subject.id), model_to_container(&m)));
    }
    if config.methods.contains(&Method::CnnGru) {
        let (m, acc) = fit_network(&subject.id, "cnn_gru", &train, &test, &net_config, Architecture::CnnGru)?;
        accuracies.push(acc);
        curves.push((format!("{}_cnn_gru", subject.id), m.training_curve.clone()));
        checkpoints.push((format!("{}_cnn_gru", subject.id), model_to_container(&m)));
    }
    Ok(SubjectOutcome {
        id: subject.id.clone(),
        accuracies,
        checkpoints,
        curves,
    })
}

/// Runs `f` for every subject on a pool of `jobs` threads (0 = all cores).
/// Results come back in subject order whatever the scheduling.
fn per_subject(
    subjects: &[Subject],
    jobs: usize,
    f: impl Fn(&Subject) -> Result<SubjectOutcome, HarnessError> + Sync,
) -> Result<Vec<SubjectOutcome>, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    pool.install(|| subjects.par_iter().map(&f).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Run,
    Ablate,
}

#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    tool_version: &'a str,
    mode: &'a str,
    report_schema: u32,
    seed: u64,
    config_sha256: &'a str,
    jobs: usize,
    subjects: Vec<&'a str>,
    columns: &'a [String],
    wall_time_s: f64,
}

pub struct Summary {
    pub table: Table,
    pub report_path: PathBuf,
}

/// Runs the experiment and writes `report.csv` or `ablation.csv`, the
/// checkpoints, the effective config (`config.json`) and `run.json` under
/// `out`.
pub fn execute(config: &ExperimentConfig, mode: Mode, out: &Path, jobs: usize) -> Result<Summary, HarnessError> {
    let started = Instant::now();
    let hash = config.hash();
    log::info!("config sha256 {hash}, seed {}", config.seed);
    let subjects = load_subjects(config)?;

    let (columns, outcomes) = match mode {
        Mode::Run => {
            (config.report_columns(), per_subject(&subjects, jobs, |s| run_subject(config, s))?)
        }
        Mode::Ablate => {
            let mut cols: Vec<String> = (0..config.grid.count)
                .map(|b| band_label(config.cue_latency_s, config.grid.band_bounds_s(b)))
                .collect();
            if config.methods.contains(&Method::CnnGru) {
                cols.push("cnn_gru".into());
            }
            (cols, per_subject(&subjects, jobs, |s| ablate_subject(config, s))?)
        }
    };

    let table = Table {
        columns,
        rows: outcomes.iter().map(|o| (o.id.clone(), o.accuracies.clone())).collect(),
    };

    let io = |e: std::io::Error| HarnessError::Runtime(format!("{}: {e}", out.display()));
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io)?;
    for o in &outcomes {
        for (name, c) in &o.checkpoints {
            c.write(ckpt_dir.join(format!("{name}.eegt"))).map_err(HarnessError::runtime)?;
        }
    }

    let curve_dir = out.join("curves");
    if outcomes.iter().any(|o| !o.curves.is_empty()) {
        fs::create_dir_all(&curve_dir).map_err(io)?;
    }
    for o in &outcomes {
        for (name, losses) in &o.curves {
            let mut buf = Vec::new();
            write_curve(&mut buf, losses).map_err(HarnessError::runtime)?;
            fs::write(curve_dir.join(format!("{name}.csv")), buf).map_err(io)?;
        }
    }

    let preamble = Preamble {
        kind: match mode {
            Mode::Run => "report",
            Mode::Ablate => "ablation",
        },
        seed: config.seed,
        config_sha256: &hash,
        methods: &config.methods,
    };
    let mut buf = Vec::new();
    let report_path = match mode {
        Mode::Run => {
            write_report(&mut buf, &preamble, &table).map_err(HarnessError::runtime)?;
            out.join("report.csv")
        }
        Mode::Ablate => {
            write_ablation(&mut buf, &preamble, &table).map_err(HarnessError::runtime)?;
            out.join("ablation.csv")
        }
    };
    fs::write(&report_path, buf).map_err(io)?;

    let info = RunInfo {
        tool_version: env!("CARGO_PKG_VERSION"),
        mode: preamble.kind,
        report_schema: crate::report::SCHEMA_VERSION,
        seed: config.seed,
        config_sha256: &hash,
        jobs,
        subjects: outcomes.iter().map(|o| o.id.as_str()).collect(),
        columns: &table.columns,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let echo = serde_json::to_value(config).and_then(|v| serde_json::to_string_pretty(&v)).map_err(HarnessError::runtime)?;
    fs::write(out.join("config.json"), echo + "\n").map_err(io)?;
    let json = serde_json::to_string_pretty(&info).map_err(HarnessError::runtime)?;
    fs::write(out.join("run.json"), json + "\n").map_err(io)?;

    Ok(Summary { table, report_path })
}
