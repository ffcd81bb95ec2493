use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Table;

use fedhet_core::analysis::{self, CodesignFree};
use fedhet_core::config::{
    self, build_config, emit_csv, merge_tables, parse_table, ConfigError, ExperimentConfig,
};
use fedhet_core::engine::run_experiment;
use fedhet_core::solvers::accumulation_vector;
use fedhet_core::FedError;

#[derive(Parser)]
#[command(
    name = "fedhet",
    version,
    about = "Federated learning simulator with unreliable links and heterogeneous local solvers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write per-round metrics as CSV.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form analysis of a configuration at round 0.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
}

#[derive(Subcommand)]
enum Analysis {
    /// Co-designed failure probabilities anchored at client 0.
    Codesign {
        #[command(flatten)]
        source: Source,
    },
    /// Step lengths matching FedAvg's effective step product.
    Calibrate {
        #[command(flatten)]
        source: Source,
    },
}

#[derive(Args)]
struct Source {
    /// TOML experiment file; overlays the preset when both are given.
    #[arg(long, required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Bundled preset name.
    #[arg(long)]
    preset: Option<String>,
}

enum Failure {
    Config(String),
    Blowup(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Model(f) => f.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<FedError> for Failure {
    fn from(e: FedError) -> Self {
        match e {
            FedError::NumericalBlowup(_) => Failure::Blowup(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn read_table(path: &Path) -> Result<Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_table(&text)
}

fn load(source: &Source) -> Result<ExperimentConfig, ConfigError> {
    let mut table = match &source.preset {
        Some(name) => parse_table(config::preset_source(name)?)?,
        None => Table::new(),
    };
    if let Some(path) = &source.config {
        merge_tables(&mut table, read_table(path)?);
    }
    build_config(table)
}

fn fmt_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(","))
}

fn own_l1(cfg: &ExperimentConfig, steps: &[u32]) -> Result<Vec<f64>, FedError> {
    cfg.population
        .clients()
        .iter()
        .zip(steps)
        .map(|(c, t)| Ok(accumulation_vector(c.solver, *t, cfg.eta)?.l1()))
        .collect()
}

fn simulate(
    source: &Source,
    seed: Option<u64>,
    replicates: Option<usize>,
    jobs: Option<usize>,
    out: &Path,
) -> Result<String, Failure> {
    let mut cfg = load(source)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = replicates {
        if r == 0 {
            return Err(Failure::Config("--replicates must be at least 1".into()));
        }
        cfg.replicates = r;
    }
    if let Some(j) = jobs {
        cfg.jobs = j.max(1);
    }
    eprintln!(
        "running {}: {} algorithm(s) x {} replicate(s) x {} rounds",
        cfg.name,
        cfg.algorithms.len(),
        cfg.replicates,
        cfg.rounds
    );
    let traces = run_experiment(&cfg)?;
    let file = File::create(out)
        .map_err(|e| Failure::Io(format!("cannot create {}: {e}", out.display())))?;
    let mut w = BufWriter::new(file);
    emit_csv(&traces, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Failure::Io(format!("cannot write {}: {e}", out.display())))?;
    let rows: usize = traces.iter().map(|t| t.records.len()).sum();
    let mut finals = Vec::new();
    for a in &cfg.algorithms {
        let d: Vec<f64> = traces
            .iter()
            .filter(|t| t.algorithm == a.label)
            .filter_map(|t| t.records.last().and_then(|r| r.metric("dist_true")))
            .collect();
        let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
        finals.push(format!("{}={}", a.label, mean));
    }
    Ok(format!(
        "simulate {} rows={} out={} mean_final_dist_true: {}",
        cfg.name,
        rows,
        out.display(),
        finals.join(" ")
    ))
}

fn codesign(source: &Source) -> Result<String, Failure> {
    let cfg = load(source)?;
    let weights = cfg.population.weights();
    let (steps, failure) = cfg.population.conditions(0);
    let l1 = own_l1(&cfg, &steps)?;
    let sol = analysis::codesign_solve(&weights, failure[0], l1[0], CodesignFree::L1(l1))?;
    let (w, _) = analysis::build_w_and_check_rank(&weights, &sol.l1norms)?;
    let residual = analysis::consistency_residual(&w, &sol.failure);
    eprintln!("W residual {residual:e}");
    Ok(format!(
        "codesign q={} l1={} eta_eff={} t_eff={}",
        fmt_list(&sol.failure),
        fmt_list(&sol.l1norms),
        sol.eta_eff,
        sol.t_eff
    ))
}

fn calibrate(source: &Source) -> Result<String, Failure> {
    let cfg = load(source)?;
    let weights = cfg.population.weights();
    let (steps, failure) = cfg.population.conditions(0);
    let l1 = own_l1(&cfg, &steps)?;
    let map = analysis::calibrate_step_lengths(cfg.eta, &weights, &failure, &l1)?;
    let items: Vec<String> = map
        .iter()
        .map(|(a, eta)| format!("{}={}", a.name(), eta))
        .collect();
    Ok(format!("calibrate {}", items.join(" ")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate {
            source,
            seed,
            replicates,
            jobs,
            out,
        } => simulate(source, *seed, *replicates, *jobs, out),
        Command::Analyze {
            what: Analysis::Codesign { source },
        } => codesign(source),
        Command::Analyze {
            what: Analysis::Calibrate { source },
        } => calibrate(source),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Blowup(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
