//! `beef`: generate synthetic data, train, evaluate, explain, sweep and
//! gradient-check.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beef_core::explain::DecodeConfig;
use beef_core::gradsuite;
use beef_core::synthworld::{generate, Dataset, WorldConfig};
use beef_core::trainer::{evaluate_trainer, explain_episode, ExperimentKind, ExperimentRunner, TrainConfig, Trainer};
use clap::{Parser, Subcommand};
use serde_json::json;

use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "beef", version, about = "Driving backbone with fused cause explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a synthetic dataset.
    GenData {
        /// World config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        /// Training config JSON.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named preset: desk, tiny, hdd-paper, bddx-paper.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print the metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the report and run manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-frame cause distributions, trajectories and a sentence.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episode: usize,
        /// Sampling temperature; 0 is greedy.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment grid over several seeds.
    Sweep {
        /// layer, fusion or baseline.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Coordinates probed per tensor.
        #[arg(long, default_value_t = 64)]
        max_coords: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Core(beef_core::Error),
    /// Ran to completion but the result is out of tolerance.
    Numerical(String),
}

impl From<beef_core::Error> for Failure {
    fn from(e: beef_core::Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, beef_core::Error> {
    std::fs::read_to_string(path).map_err(|e| beef_core::Error::Io {
        path: path.into(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), beef_core::Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| beef_core::Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| beef_core::Error::Io {
        path: path.into(),
        source: e,
    })
}

fn train_config(config: Option<&Path>, preset: Option<&str>) -> Result<(TrainConfig, Vec<PathBuf>), beef_core::Error> {
    match (config, preset) {
        (Some(p), _) => Ok((TrainConfig::from_json(&read_text(p)?, p)?, vec![p.into()])),
        (None, Some(name)) => Ok((TrainConfig::preset(name)?, vec![])),
        (None, None) => Ok((TrainConfig::default(), vec![])),
    }
}

fn run(cmd: Command, argv: &[String]) -> Outcome {
    match cmd {
        Command::GenData { config, out } => {
            let (world, inputs) = match &config {
                Some(p) => (WorldConfig::from_json(&read_text(p)?, p)?, vec![p.clone()]),
                None => (WorldConfig::default(), vec![]),
            };
            let data = generate(&world)?;
            data.save(&out)?;
            let causes: Vec<_> = data.episodes.iter().map(|e| e.cause).collect();
            let counts = beef_core::synthworld::cause_counts(&causes);
            RunManifest::new("gen-data", argv, json!(world), &inputs)?.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&json!({"episodes": data.episodes.len(), "causes": counts})).unwrap());
        }
        Command::Train {
            config,
            preset,
            data,
            out,
        } => {
            let (cfg, mut inputs) = train_config(config.as_deref(), preset.as_deref())?;
            let dataset = Dataset::load(&data)?;
            inputs.push(data);
            let manifest = RunManifest::new("train", argv, json!(cfg), &inputs)?;
            manifest.write(&out)?;
            let mut t = Trainer::new(cfg)?;
            t.fit(&dataset, Some(&out))?;
            if t.config().checkpoint_path.is_none() {
                log::info!("checkpoint at {}", out.join("checkpoint.beef").display());
            }
        }
        Command::Eval { ckpt, data, split, out } => {
            let t = Trainer::load(&ckpt)?;
            let dataset = Dataset::load(&data)?;
            let (report, sentences) = evaluate_trainer(&t, &dataset, &split)?;
            let body = serde_json::to_string_pretty(&json!({"report": report, "sentences": sentences})).unwrap();
            println!("{body}");
            if let Some(dir) = out {
                let cfg = json!({"split": split, "checkpoint_config": t.config()});
                RunManifest::new("eval", argv, cfg, &[ckpt, data])?.write(&dir)?;
                write_text(&dir.join("report.json"), &body)?;
            }
        }
        Command::Explain {
            ckpt,
            data,
            episode,
            temperature,
            seed,
            out,
        } => {
            let decode = DecodeConfig::with_temperature(temperature, seed)?;
            let t = Trainer::load(&ckpt)?;
            let dataset = Dataset::load(&data)?;
            let e = explain_episode(&t, &dataset, episode, &decode)?;
            let body = serde_json::to_string_pretty(&e).unwrap();
            println!("{body}");
            if let Some(dir) = out {
                let cfg = json!({"episode": episode, "decode": decode});
                RunManifest::new("explain", argv, cfg, &[ckpt, data])?.write(&dir)?;
                write_text(&dir.join("explanation.json"), &body)?;
            }
        }
        Command::Sweep {
            kind,
            data,
            config,
            preset,
            seeds,
            split,
            out,
        } => {
            let kind: ExperimentKind = kind.parse()?;
            let (base, mut inputs) = train_config(config.as_deref(), preset.as_deref())?;
            let dataset = Dataset::load(&data)?;
            inputs.push(data);
            let cfg = json!({"kind": kind, "base": base, "seeds": seeds, "split": split});
            RunManifest::new("sweep", argv, cfg, &inputs)?.write(&out)?;
            let report = ExperimentRunner::new(&dataset, base, seeds, &split)?.run(kind)?;
            report.write(&out)?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck { max_coords, out } => {
            let rows = gradsuite::run_suite(max_coords)?;
            let table = gradsuite::format_table(&rows);
            print!("{table}");
            if let Some(dir) = out {
                RunManifest::new("gradcheck", argv, json!({"max_coords": max_coords}), &[])?.write(&dir)?;
                write_text(&dir.join("gradcheck.txt"), &table)?;
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Numerical(format!(
                    "gradient error above {:e} in: {}",
                    gradsuite::TOLERANCE,
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("BEEF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("BEEF_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

