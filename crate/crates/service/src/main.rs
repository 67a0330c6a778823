use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xaas_core::model::ModelDefinition;
use xaas_sim::bench::verify_bench;
use xaas_sim::engine::scenario_model;
use xaas_sim::metrics::{aggregate, Aggregate};
use xaas_sim::sweep::{calibrate_revisit, write_csv, CalibrationPoint};
use xaas_sim::{run_seeds, run_sweep, Ablation, Experiment, MetricsReport, Mode, Scenario, SimConfig};
use xaas_service::{Server, Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "xaas", version, about = "Explanation caching service and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Scenario preset used when no config file is given.
    #[arg(long, default_value = "mqc")]
    scenario: Scenario,
    /// Experiment config JSON; missing fields take preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<SimConfig> {
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(SimConfig::from_json(&text).with_context(|| format!("loading {}", path.display()))?)
            }
            None => Ok(SimConfig::preset(self.scenario)),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulator for one mode over several seeds.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        hours: Option<f64>,
        /// Aggregate request rate in requests per second.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "xaas")]
        mode: Mode,
        #[arg(long, default_value = "none")]
        ablate: Ablation,
        /// Output JSON file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a parameter sweep and write one CSV row per grid point, mode and seed.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        experiment: Experiment,
        /// Grid values (the experiment's default grid when omitted).
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        /// Modes to compare (the experiment's default set when omitted).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve explanation requests over TCP as newline-delimited JSON.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Maximum concurrent generations.
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Model definition JSON to register instead of the scenario model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Suppress the per-request JSON log on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Measure verification detection and false-positive rates under drift.
    VerifyBench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Drift magnitude applied to the scenario model.
        #[arg(long, default_value_t = 0.3)]
        drift: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the revisit probability against the scenario's target hit rate.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.85,0.9,0.95")]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct SimulateOutput {
    config_hash: String,
    scenario: Scenario,
    mode: Mode,
    ablation: Ablation,
    seeds: Vec<u64>,
    aggregate: Aggregate,
    reports: Vec<MetricsReport>,
}

#[derive(Serialize)]
struct BenchOutput {
    detection: Option<f64>,
    false_positive: Option<f64>,
    cost_ratio: f64,
    n: usize,
    threshold: f64,
    seeds: Vec<u64>,
}

#[derive(Serialize)]
struct CalibrateOutput {
    scenario: Scenario,
    target_hit_rate: f64,
    best_revisit_prob: f64,
    points: Vec<CalibrationPoint>,
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            Ok(stdout.flush()?)
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    emit(out, &bytes)
}

fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            cfg,
            devices,
            hours,
            rate,
            seeds,
            mode,
            ablate,
            out,
        } => {
            require_seeds(&seeds)?;
            let mut c = cfg.load()?;
            if let Some(n) = devices {
                c.workload.num_devices = n;
            }
            if let Some(h) = hours {
                c.workload.duration_hours = h;
            }
            if let Some(r) = rate {
                c.workload.arrival_rate = r;
            }
            c.validate()?;
            let reports = run_seeds(&c, mode, ablate, &seeds)?;
            emit_json(
                out.as_deref(),
                &SimulateOutput {
                    config_hash: c.hash(),
                    scenario: c.workload.scenario,
                    mode,
                    ablation: ablate,
                    seeds,
                    aggregate: aggregate(&reports),
                    reports,
                },
            )
        }
        Command::Sweep {
            cfg,
            experiment,
            grid,
            modes,
            seeds,
            out,
        } => {
            require_seeds(&seeds)?;
            let c = cfg.load()?;
            let grid = if grid.is_empty() { experiment.default_grid() } else { grid };
            let modes = if modes.is_empty() { experiment.default_modes() } else { modes };
            let rows = run_sweep(&c, experiment, &grid, &modes, &seeds)?;
            let mut bytes = Vec::new();
            write_csv(&rows, &mut bytes)?;
            emit(out.as_deref(), &bytes)
        }
        Command::Serve {
            cfg,
            listen,
            workers,
            model,
            quiet,
        } => {
            let c = cfg.load()?;
            let mut service = Service::new(ServiceConfig::from_sim(&c, workers));
            if !quiet {
                service = service.with_log(Box::new(io::stderr()));
            }
            match model {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let def: ModelDefinition = serde_json::from_str(&text)?;
                    service.register_definition(&def)?;
                }
                None => {
                    service.register_model(scenario_model(&c)?)?;
                }
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&listen)
                    .await
                    .with_context(|| format!("binding {listen}"))?;
                println!("listening on {}", listener.local_addr()?);
                Server::new(Arc::new(service)).run(listener).await?;
                Ok(())
            })
        }
        Command::VerifyBench { cfg, drift, seeds, out } => {
            require_seeds(&seeds)?;
            if !(drift >= 0.0 && drift.is_finite()) {
                bail!("--drift must be non-negative");
            }
            let c = cfg.load()?;
            let r = verify_bench(&c, drift, &seeds)?;
            emit_json(
                out.as_deref(),
                &BenchOutput {
                    detection: r.detection,
                    false_positive: r.false_positive,
                    cost_ratio: r.cost_ratio,
                    n: r.n,
                    threshold: r.threshold,
                    seeds: r.seeds,
                },
            )
        }
        Command::Calibrate { cfg, grid, seeds, out } => {
            let c = cfg.load()?;
            let (points, best) = calibrate_revisit(&c, &grid, &seeds)?;
            emit_json(
                out.as_deref(),
                &CalibrateOutput {
                    scenario: c.workload.scenario,
                    target_hit_rate: c.workload.scenario.target_hit_rate(),
                    best_revisit_prob: points[best].revisit_prob,
                    points,
                },
            )
        }
    }
}
