use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mi_decode::data::SyntheticSpec;
use mi_decode_cli::config::ExperimentConfig;
use mi_decode_cli::inspect::{convert_check, synth};
use mi_decode_cli::runner::{execute, Mode};
use mi_decode_cli::HarnessError;

/// Motor-imagery decoding experiments.
///
/// Logging is controlled by MI_DECODE_LOG (env_logger syntax, default "info").
#[derive(Parser)]
#[command(name = "mi-decode", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for subjects and trials (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured method; writes report.csv.
    Run(RunArgs),
    /// One CNN-only model per time window; writes ablation.csv.
    Ablate(RunArgs),
    /// Check a config and print its hash.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write synthetic two-session recordings as containers.
    Synth {
        /// Config whose [synthetic] table is used; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects when no config is given.
        #[arg(long, default_value_t = 1)]
        subjects: usize,
    },
    /// Decode containers, verify their framing and payloads, print a summary.
    ConvertCheck {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(args: RunArgs, mode: Mode) -> Result<(), HarnessError> {
    let mut config = load(&args.config, args.seed)?;
    if let Some(out) = args.out {
        config.out = Some(out);
    }
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let summary = execute(&config, mode, &out, args.jobs)?;
    let means = summary.table.column_means();
    for (c, m) in summary.table.columns.iter().zip(means) {
        println!("{c:>12}  {m:.4}");
    }
    println!("wrote {}", summary.report_path.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run(a) => run(a, Mode::Run),
        Command::Ablate(a) => run(a, Mode::Ablate),
        Command::Validate { config, seed } => {
            let c = load(&config, seed)?;
            println!("ok {}", c.hash());
            Ok(())
        }
        Command::Synth {
            config,
            seed,
            out,
            subjects,
        } => {
            let (mut spec, n) = match config {
                Some(p) => {
                    let c = ExperimentConfig::load(&p)?;
                    let syn = c
                        .synthetic
                        .ok_or_else(|| HarnessError::Data(format!("{} has no [synthetic] table", p.display())))?;
                    (syn.spec, syn.subjects)
                }
                None => (SyntheticSpec::default(), subjects),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            print!("{}", synth(&spec, n, &out)?);
            Ok(())
        }
        Command::ConvertCheck { files } => {
            for f in files {
                let r = convert_check(&f)?;
                println!("{}  sha256 {}", f.display(), r.sha256);
                for l in &r.lines {
                    println!("  {l}");
                }
                if !r.canonical {
                    println!("  note: header encoding differs from this tool's; payloads are identical");
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MI_DECODE_LOG", "info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command).context("mi-decode failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
