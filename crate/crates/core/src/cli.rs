//! Command-line interface: `gen-data`, `run-experiment`, `report`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_planted_dataset, write_bundle, PlantedTaskSpec};
use crate::error::{Error, Result};
use crate::eval::ReportFormat;
use crate::io_util::{ensure_dir, read_to_string, write_json};
use crate::par;
use crate::pipeline::{audit_hygiene, write_report, Experiment, ExperimentConfig};
use crate::saliency::SaliencyMethod;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TEACHSAL_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "teachsal", version, about = "Saliency-guided teacher-student experiments")]
pub struct Cli {
    /// Log filter, e.g. `info` or `teachsal=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Condition {
    Teacher,
    Baseline1,
    Baseline2,
    Student,
    Transfer,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Full,
    JsonOnly,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize a planted-task dataset (PNG images and salience plus a
    /// JSON-lines manifest).
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `$TEACHSAL_OUT_ROOT/data`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one experimental condition (or the whole pipeline).
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `$TEACHSAL_OUT_ROOT/experiment`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        condition: Condition,
        /// Reuse completed runs and cohorts in `out`.
        #[arg(long)]
        resume: bool,
        /// Serial, bit-reproducible execution.
        #[arg(long)]
        deterministic: bool,
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seed_list: Option<Vec<u64>>,
        #[arg(long)]
        num_seeds: Option<usize>,
        #[arg(long)]
        saliency: Option<SaliencyArg>,
        /// Student α.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Regenerate reports from a finished experiment directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SaliencyArg {
    Cam,
    Rise,
}

impl From<SaliencyArg> for SaliencyMethod {
    fn from(s: SaliencyArg) -> Self {
        match s {
            SaliencyArg::Cam => SaliencyMethod::Cam,
            SaliencyArg::Rise => SaliencyMethod::Rise,
        }
    }
}

/// Written next to every output the CLI produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the effective config snapshot.
    pub config_sha256: String,
    pub command: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub out_dir: PathBuf,
    pub crate_version: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn out_dir(explicit: Option<PathBuf>, leaf: &str) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p),
        None => std::env::var_os(OUT_ROOT_ENV)
            .map(|root| PathBuf::from(root).join(leaf))
            .ok_or_else(|| Error::Config(format!("no --out given and {OUT_ROOT_ENV} is not set"))),
    }
}

fn write_manifest(out: &Path, snapshot: &str, argv: &[String], started: u64) -> Result<()> {
    write_json(
        &out.join("run_manifest.json"),
        &RunManifest {
            config_sha256: sha256_hex(snapshot.as_bytes()),
            command: argv.to_vec(),
            started_unix: started,
            finished_unix: now(),
            out_dir: out.to_path_buf(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )
}

pub fn cmd_gen_data(config: &Path, out: &Path, force: bool, argv: &[String]) -> Result<()> {
    let started = now();
    let text = read_to_string(config)?;
    let spec: PlantedTaskSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let bundle = generate_planted_dataset(&spec)?;
    if out.exists() && out.read_dir().map_err(|e| Error::io(out, e))?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    ensure_dir(out)?;
    let snapshot = toml::to_string(&spec).expect("spec serializes");
    crate::io_util::write_atomic(&out.join("config.toml"), snapshot.as_bytes())?;
    let manifest = write_bundle(&bundle, out)?;
    info!("wrote {}", manifest.display());
    write_manifest(out, &snapshot, argv, started)
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed_list: Option<Vec<u64>>,
    pub num_seeds: Option<usize>,
    pub saliency: Option<SaliencyMethod>,
    pub alpha: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(n) = self.num_seeds {
            cfg.experiment.num_seeds = n;
            cfg.experiment.seeds = None;
        }
        if let Some(s) = &self.seed_list {
            cfg.experiment.seeds = Some(s.clone());
        }
        if let Some(m) = self.saliency {
            cfg.experiment.saliency_method = m;
        }
        if let Some(a) = self.alpha {
            cfg.experiment.student_alpha = a;
        }
    }
}

pub fn cmd_run_experiment(
    config: &Path,
    out: &Path,
    condition: Condition,
    resume: bool,
    overrides: &Overrides,
    argv: &[String],
) -> Result<()> {
    let started = now();
    let mut cfg = ExperimentConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let exp = Experiment::open(cfg, out, resume)?;
    match condition {
        Condition::Teacher => {
            exp.run_teacher_condition()?;
        }
        Condition::Baseline1 => {
            exp.run_baseline1_condition()?;
        }
        Condition::Baseline2 => {
            exp.run_baseline2_condition()?;
        }
        Condition::Student => {
            exp.run_student_condition()?;
        }
        Condition::Transfer => {
            exp.run_transfer_matrix()?;
        }
        Condition::Full => exp.run_full()?,
    }
    let summary = write_report(out, ReportFormat::Full)?;
    for c in &summary.conditions {
        info!(
            "{:<15} {:<12} {:<12} {:.4} ± {:.4} (n={})",
            c.condition, c.arch, c.saliency_method, c.mean_auc, c.std_auc, c.n_seeds
        );
    }
    let hygiene = audit_hygiene(out, &exp.bundle)?;
    write_json(&out.join("report").join("hygiene.json"), &hygiene)?;
    if !hygiene.is_clean() {
        return Err(Error::Validation(format!(
            "data hygiene audit failed: {} EAIS ids in loaders, {} teacher EAIS evaluations, {} archive ids outside TAIS",
            hygiene.eais_ids_in_loaders.len(),
            hygiene.teacher_eais_violations.len(),
            hygiene.archive_violations.len()
        )));
    }
    write_manifest(out, &exp.config.to_toml(), argv, started)
}

pub fn cmd_report(dir: &Path, format: ReportFormat) -> Result<()> {
    if !dir.exists() {
        return Err(Error::Input(format!("{} does not exist", dir.display())));
    }
    write_report(dir, format)?;
    info!("report written to {}", dir.join("report").display());
    Ok(())
}

/// Parses `argv` and runs the selected command.
pub fn run(argv: Vec<String>) -> Result<()> {
    let cli = Cli::try_parse_from(&argv).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => Error::Config(e.to_string()),
        }
    })?;
    let _ = env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).try_init();
    match cli.command {
        Command::GenData { config, out, force } => cmd_gen_data(&config, &out_dir(out, "data")?, force, &argv),
        Command::RunExperiment {
            config,
            out,
            condition,
            resume,
            deterministic,
            seed_list,
            num_seeds,
            saliency,
            alpha,
        } => {
            if deterministic {
                par::set_serial(true);
            }
            let overrides = Overrides {
                seed_list,
                num_seeds,
                saliency: saliency.map(Into::into),
                alpha,
            };
            cmd_run_experiment(&config, &out_dir(out, "experiment")?, condition, resume, &overrides, &argv)
        }
        Command::Report { dir, format } => cmd_report(
            &dir,
            match format {
                Format::Full => ReportFormat::Full,
                Format::JsonOnly => ReportFormat::JsonOnly,
            },
        ),
    }
}
