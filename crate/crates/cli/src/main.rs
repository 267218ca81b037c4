//! `labs` command-line front end: simulate datasets, fit one dataset, run
//! benchmark sweeps and Besov diagnostics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use labs::bench::{self, ExperimentConfig};
use labs::model::{self, Schedule};
use labs::sampler::{self, Acceptance};
use labs::testbed::{self, Dataset, DatasetMeta, TestFunctionId};

const CONFIG_KEYS: &str = "\
CONFIGURATION (--config <file>, JSON; every key optional, unknown keys rejected)

Top level:
  functions        list of \"blocks\" | \"bumps\" | \"heavisine\" | \"doppler\"   [all four]
  ns               sample sizes, each >= 2                                [128, 512, 2048]
  rsnrs            root signal-to-noise ratios, each > 0; noise sd is 1/rsnr [3, 5, 10]
  replicates       datasets per (function, n, rsnr) cell, >= 1            [20]
  seed             master seed; every cell derives its own sub-seed       [20240601]
  output_dir       directory for all outputs                              [\"labs-results\"]
  workers          concurrent benchmark cells, 0 = all cores              [0]
  standardization  \"truth\": truth scaled to grid mean 0, sd 1;
                   \"empirical\": each response vector centred and scaled  [\"truth\"]

hyper (prior):
  degrees          spline degrees used by the prior                       [1, 2]
  a                gamma shape of each rate: a number, or per degree
                   as {\"1\": 1.0, \"2\": 0.5}                                [1]
  C_b              gamma rate b_n = exp(C_b (ln n)^2)                      [1e-4]
  C_phi            coefficient sd: C_phi ln n (table) or exp(C_phi (ln n)^2) [1.5]
  phi_mode         \"table\" | \"theory\", selects the form above              [\"table\"]
  C_delta          minimum knot spacing delta_n = exp(-C_delta (ln n)^2)   [1]
  r, R             noise variance prior Inv-Gamma(r/2, rR/2)               [0.01, 1]
  A                knots live on [-A, 1 + A]                              [0]

chain (sampler):
  iterations       total iterations                                       [20000]
  burn_in          discarded iterations, < iterations                     [10000]
  thin             keep every thin-th post-burn-in state                  [10]
  move_probs       {\"birth\", \"death\", \"update\"}, summing to 1           [1/3 each]
  s_beta           coefficient random-walk scale, null = 0.25 sd(y)       [null]
  s_knot           knot random-walk scale, null = 0.05 (1 + 2A)           [null]
  joint_beta_every joint coefficient draw period, 0 = never               [10]
  seed             chain seed (fit only; benchmark cells derive their own) [0]
  adapt            tune scales toward 30% acceptance during burn-in       [true]
  local_birth      share of births with localized knot proposals, [0, 1]  [0.5]
  shift_fraction   share of update moves that shift a knot and redraw
                   the coefficient from its full conditional, [0, 1]      [0.5]
  moves_per_degree moves per degree per iteration, >= 1                   [1]
  grid_size        points of the fitted-curve grid on [0, 1]              [201]
  trace            record a per-iteration trace (fit writes trace.csv)    [false]

besov (besov-check):
  grid_sizes       uniform grid sizes for the raw test functions          [1024, 4096, 16384]
  s                smoothness; finite differences of order floor(s) + 1   [1]
  p                integrability exponents, numbers or \"inf\"              [1, \"inf\"]
  q                aggregation exponent, number or \"inf\"                  [\"inf\"]
  t_points         log-spaced steps between 4/N and 1                     [24]

EXIT CODES
  0  success
  1  runtime failure (I/O, numerical)
  2  invalid command line or configuration
  3  benchmark finished but some cells failed";

#[derive(Parser)]
#[command(name = "labs", version, about = "Free-knot multi-degree B-spline regression with a reversible-jump sampler")]
#[command(after_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; see the key list below.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset: writes dataset.csv (x,y) and dataset.json.
    #[command(after_help = CONFIG_KEYS)]
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Test function; defaults to the first entry of `functions`.
        #[arg(long)]
        function: Option<TestFunctionId>,
        /// Sample size; defaults to the first entry of `ns`.
        #[arg(long)]
        n: Option<usize>,
        /// Root signal-to-noise ratio; defaults to the first entry of `rsnrs`.
        #[arg(long)]
        rsnr: Option<f64>,
    },
    /// Fit one dataset: writes posterior.json and fit.csv (x,posterior_mean).
    #[command(after_help = CONFIG_KEYS)]
    Fit {
        #[command(flatten)]
        common: Common,
        /// Two-column x,y CSV with x in [0, 1].
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
        /// Report the MSE against this (standardized) test function at the
        /// design points.
        #[arg(long)]
        truth: Option<TestFunctionId>,
    },
    /// Run the full sweep: writes progress.jsonl, results.csv, summary.json
    /// and rates.csv.
    #[command(after_help = CONFIG_KEYS)]
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
    /// Modulus-of-smoothness profiles and Besov seminorm estimates of the
    /// test functions: writes besov_profile.csv and besov_seminorm.csv.
    #[command(name = "besov-check", after_help = CONFIG_KEYS)]
    BesovCheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes, each with its own exit code.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Partial(usize, usize),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Partial(failed, total)) => {
            eprintln!("{failed} of {total} cells failed; see progress.jsonl");
            ExitCode::from(3)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_json_file(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::Config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.chain.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            common,
            function,
            n,
            rsnr,
        } => {
            let cfg = load_config(&common)?;
            let function = function.unwrap_or(cfg.functions[0]);
            let n = n.unwrap_or(cfg.ns[0]);
            let rsnr = rsnr.unwrap_or(cfg.rsnrs[0]);
            if !(rsnr > 0.0) {
                return Err(Failure::Config(anyhow::anyhow!("rsnr must be positive")));
            }
            let data = testbed::generate_dataset(function, n, rsnr, cfg.seed, cfg.standardization)
                .context("simulating dataset")?;
            fs::create_dir_all(&cfg.output_dir).context("creating output directory")?;
            data.write_csv(&cfg.output_dir.join("dataset.csv")).context("writing dataset.csv")?;
            let meta = DatasetMeta {
                id: function,
                n,
                rsnr,
                sigma0: data.sigma0,
                seed: cfg.seed,
                standardization: data.standardization,
            };
            meta.write(&cfg.output_dir.join("dataset.json")).context("writing dataset.json")?;
            log::info!("wrote {n} observations of {function} to {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Fit { common, data, truth } => {
            let cfg = load_config(&common)?;
            let dataset = Dataset::read_csv(&data)
                .with_context(|| format!("reading {}", data.display()))
                .map_err(Failure::Config)?;
            if let Some(x) = dataset.xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Failure::Config(anyhow::anyhow!("design point {x} lies outside [0, 1]")));
            }
            fit(&cfg, &dataset, truth).map_err(Failure::Runtime)
        }
        Command::Benchmark { common } => {
            let cfg = load_config(&common)?;
            let progress = cfg.output_dir.join("progress.jsonl");
            let records =
                bench::run_benchmark_with_progress(&cfg, Some(&progress)).context("running benchmark")?;
            bench::emit_results(&records, &cfg.output_dir).context("writing results")?;
            let failed = records.iter().filter(|r| r.failed()).count();
            log::info!(
                "{} cells done ({failed} failed); results in {}",
                records.len(),
                cfg.output_dir.display()
            );
            if failed > 0 {
                return Err(Failure::Partial(failed, records.len()));
            }
            Ok(())
        }
        Command::BesovCheck { common } => {
            let cfg = load_config(&common)?;
            let profile = bench::besov_check(&cfg).map_err(|e| Failure::Config(e.into()))?;
            let seminorms = bench::besov_seminorms(&cfg).map_err(|e| Failure::Config(e.into()))?;
            fs::create_dir_all(&cfg.output_dir).context("creating output directory")?;
            bench::write_besov_csv(&profile, &cfg.output_dir.join("besov_profile.csv"))
                .context("writing besov_profile.csv")?;
            bench::write_seminorm_csv(&seminorms, &cfg.output_dir.join("besov_seminorm.csv"))
                .context("writing besov_seminorm.csv")?;
            for row in &seminorms {
                log::info!(
                    "{} N={} p={} q={}: seminorm estimate {:.4}",
                    row.function,
                    row.grid_size,
                    row.p,
                    row.q,
                    row.estimate
                );
            }
            Ok(())
        }
    }
}

/// Posterior summary written by `fit`.
#[derive(Serialize)]
struct PosteriorSummary {
    n: usize,
    schedule: Schedule,
    draws: usize,
    sigma_hat: f64,
    mean_atoms: f64,
    mean_atoms_by_degree: Vec<(usize, f64)>,
    mse_vs_truth: Option<f64>,
    acceptance: Acceptance,
    final_scales: Vec<(usize, (f64, f64))>,
}

fn fit(cfg: &ExperimentConfig, data: &Dataset, truth: Option<TestFunctionId>) -> anyhow::Result<()> {
    let sch = model::schedule(data.len().max(2), &cfg.hyper)?;
    let out = sampler::run_chain_with_schedule(data, &cfg.hyper, &sch, &cfg.chain)?;
    let curve = sampler::posterior_mean(&out, &out.grid)?;
    let mse_vs_truth = match truth {
        Some(id) => {
            let st = testbed::standardized_truth(id, testbed::DEFAULT_STANDARDIZATION_GRID)?;
            let fitted = sampler::posterior_mean(&out, &data.xs)?;
            let target = data
                .xs
                .iter()
                .map(|&x| st.eval(x))
                .collect::<labs::Result<Vec<f64>>>()?;
            Some(testbed::mse(&target, &fitted)?)
        }
        None => None,
    };
    fs::create_dir_all(&cfg.output_dir).context("creating output directory")?;
    let mut csv = String::from("x,posterior_mean\n");
    for (x, f) in out.grid.iter().zip(&curve) {
        csv.push_str(&format!("{x},{f}\n"));
    }
    fs::write(cfg.output_dir.join("fit.csv"), csv).context("writing fit.csv")?;
    if cfg.chain.trace {
        out.write_trace_csv(&cfg.output_dir.join("trace.csv"))?;
    }
    let summary = PosteriorSummary {
        n: data.len(),
        schedule: sch,
        draws: out.draws.len(),
        sigma_hat: out.sigma_hat(),
        mean_atoms: out.mean_total_atoms(),
        mean_atoms_by_degree: cfg.hyper.degrees.iter().map(|&k| (k, out.mean_count(k))).collect(),
        mse_vs_truth,
        acceptance: out.acceptance.clone(),
        final_scales: out.final_scales.iter().map(|(&k, &s)| (k, s)).collect(),
    };
    write_json(&cfg.output_dir.join("posterior.json"), &summary)?;
    log::info!(
        "fit {} observations: sigma_hat {:.4}, mean atoms {:.1}",
        data.len(),
        summary.sigma_hat,
        summary.mean_atoms
    );
    Ok(())
}
