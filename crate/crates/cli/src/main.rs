//! `fuse-ate`: simulate fused-study data, estimate treatment effects, and run
//! the Monte Carlo experiment harness.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use fuse_ate_core::basis::Basis;
use fuse_ate_core::csv_io::{ingest_csv, write_sample_csv_path, ColumnMapping};
use fuse_ate_core::dgp::{generate_dataset, true_ate, DgpConfig};
use fuse_ate_core::estimators::{
    estimate_theta_fused_known_alpha, estimate_theta_primary, estimate_theta_two_stage, MethodTag,
};
use fuse_ate_core::experiments::{
    run_grid, run_rate_experiment, write_records_csv, write_records_jsonl, write_summary_csv,
    ExperimentGrid, HarnessOptions,
};
use fuse_ate_core::link::LinkSpec;
use fuse_ate_core::nuisance::{cross_fit_with, CrossFitOptions};
use fuse_ate_core::scores::{variance_bound, BoundPopulation, BoundTarget, BoundValue, ScoreContext};
use fuse_ate_core::sensitivity::{
    scale_link_with, sensitivity_sweep, SeverityThresholds, TopCategoryPolicy,
};

#[derive(Parser)]
#[command(name = "fuse-ate", version, about)]
struct Cli {
    /// Base seed for all random draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for replication studies (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FitArgs {
    /// Cross-fitting folds (1 = in-sample).
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Regression basis.
    #[arg(long, value_parser = parse_basis, default_value = "raw")]
    basis: Basis,
    /// Ridge penalty; omit for the default conditioning ridge.
    #[arg(long)]
    ridge: Option<f64>,
    /// Propensity clip.
    #[arg(long, default_value_t = 0.01)]
    epsilon_clip: f64,
    /// Known primary-study randomization probability (skips fitting it).
    #[arg(long)]
    trial_propensity: Option<f64>,
}

impl FitArgs {
    fn options(&self, fold_seed: Option<u64>) -> CrossFitOptions {
        CrossFitOptions {
            basis: self.basis,
            ridge_lambda: self.ridge,
            epsilon_clip: self.epsilon_clip,
            known_primary_propensity: self.trial_propensity,
            fold_seed,
            ..CrossFitOptions::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic fused-study dataset and write it as CSV.
    Simulate {
        /// Generative configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the ATE from a dataset CSV.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: MethodTag,
        /// Link specification (JSON); required for theta_a and theta_b.
        #[arg(long)]
        link: Option<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
        /// Write the result JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the semiparametric variance bounds for a configuration.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
    },
    /// Sweep the fused estimator over multiplicative alpha scalings.
    Sensitivity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        link: PathBuf,
        /// Grid as lo:hi:steps, e.g. 0.5:1.5:11.
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        fit: FitArgs,
        /// Write the curve CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a linear crosswalk between two severity-threshold scales.
    LinkFromThresholds {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        through_origin: bool,
        /// Close open-ended top categories instead of dropping the pair.
        #[arg(long)]
        impute_top: bool,
    },
    /// Run a replication grid experiment from a JSON configuration.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare held-out outcome-regression error across sample sizes.
    RateExperiment {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_basis(s: &str) -> Result<Basis, String> {
    match s {
        "raw" => Ok(Basis::Raw),
        "quadratic" => Ok(Basis::Quadratic),
        other => Err(format!("unknown basis '{other}', expected raw|quadratic")),
    }
}

fn parse_method(s: &str) -> Result<MethodTag, String> {
    s.parse().map_err(|e: fuse_ate_core::Error| e.to_string())
}

fn parse_grid_spec(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("grid must be lo:hi:steps, got '{spec}'");
    }
    let lo: f64 = parts[0].parse().context("grid lo")?;
    let hi: f64 = parts[1].parse().context("grid hi")?;
    let steps: usize = parts[2].parse().context("grid steps")?;
    if steps == 0 || hi < lo {
        bail!("grid needs steps >= 1 and hi >= lo");
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} from {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} from {}", path.display()))
}

/// Rate-experiment configuration document.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RateConfig {
    #[serde(default)]
    schema_version: Option<u32>,
    base_cfg: DgpConfig,
    n0_values: Vec<usize>,
    n1_values: Vec<usize>,
    replications: usize,
    seed: u64,
    #[serde(default)]
    options: HarnessOptions,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;

    match cli.command {
        Command::Simulate { config, out } => {
            let cfg: DgpConfig = read_json(&config, "generative config")?;
            let sample = generate_dataset(&cfg, cli.seed)?;
            let path = cli.out_dir.join(out);
            write_sample_csv_path(&sample, &path)?;
            let counts = sample.arm_counts();
            eprintln!(
                "wrote {} units (n0 = {}, n1 = {}; arms s0: {}/{}, s1: {}/{}) to {}",
                sample.n(),
                sample.n0(),
                sample.n1(),
                counts[0][0],
                counts[0][1],
                counts[1][0],
                counts[1][1],
                path.display()
            );
        }
        Command::Estimate { data, method, link, fit, out } => {
            let peek = peek_covariate_count(&data)?;
            let sample = ingest_csv(&data, &ColumnMapping::canonical(peek))?;
            eprintln!(
                "ingested {} units: n0 = {}, n1 = {}",
                sample.n(),
                sample.n0(),
                sample.n1()
            );
            let nuisance = cross_fit_with(&sample, fit.folds, &fit.options(Some(cli.seed)))?;
            let link_spec: Option<LinkSpec> = match link {
                Some(path) => Some(read_json(&path, "link spec")?),
                None => None,
            };
            let result = match method {
                MethodTag::Theta0 => estimate_theta_primary(&sample, &nuisance)?,
                MethodTag::ThetaA => {
                    let link = link_spec.context("theta_a requires --link")?;
                    estimate_theta_fused_known_alpha(&sample, &nuisance, &link)?
                }
                MethodTag::ThetaB => {
                    let link = link_spec.context("theta_b requires --link")?;
                    estimate_theta_two_stage(&sample, &nuisance, &link)?
                }
            };
            let json = serde_json::to_string_pretty(&result)?;
            match out {
                Some(path) => fs::write(cli.out_dir.join(path), json)?,
                None => println!("{json}"),
            }
        }
        Command::Bounds { config, draws } => {
            let cfg: DgpConfig = read_json(&config, "generative config")?;
            let theta = true_ate(&cfg, draws.max(10_000), cli.seed)?;
            let ctx = ScoreContext::oracle(&cfg, theta.value);
            let pop = || BoundPopulation::McDraws { p: cfg.p, draws, seed: cli.seed };
            let v0 = variance_bound(&ctx, pop(), BoundTarget::V0)?;
            let va = variance_bound(&ctx, pop(), BoundTarget::Va)?;
            let sigma_b = variance_bound(&ctx, pop(), BoundTarget::SigmaB)?;
            let (v0v, v0se) = scalar_parts(&v0);
            let (vav, vase) = scalar_parts(&va);
            let sigma = match sigma_b {
                BoundValue::Matrix { sigma } => sigma,
                _ => unreachable!(),
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "theta0": theta.value,
                    "theta0_mc_std_error": theta.std_error,
                    "V0": v0v,
                    "V0_mc_std_error": v0se,
                    "Va": vav,
                    "Va_mc_std_error": vase,
                    "Vb": sigma[0][0],
                    "Sigma_b": sigma,
                    "draws": draws,
                }))?
            );
        }
        Command::Sensitivity { data, link, grid, fit, out } => {
            let peek = peek_covariate_count(&data)?;
            let sample = ingest_csv(&data, &ColumnMapping::canonical(peek))?;
            let link_spec: LinkSpec = read_json(&link, "link spec")?;
            let scales = parse_grid_spec(&grid)?;
            let nuisance = cross_fit_with(&sample, fit.folds, &fit.options(Some(cli.seed)))?;
            let curve = sensitivity_sweep(&sample, &nuisance, &link_spec, &scales)?;
            let mut w: Box<dyn std::io::Write> = match out {
                Some(path) => Box::new(fs::File::create(cli.out_dir.join(path))?),
                None => Box::new(std::io::stdout()),
            };
            writeln!(w, "scale,estimate,se,ci_lo,ci_hi")?;
            for (k, res) in curve {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    fuse_ate_core::csv_io::format_float(k),
                    fuse_ate_core::csv_io::format_float(res.estimate),
                    fuse_ate_core::csv_io::format_float(res.std_error),
                    fuse_ate_core::csv_io::format_float(res.ci_low),
                    fuse_ate_core::csv_io::format_float(res.ci_high),
                )?;
            }
        }
        Command::LinkFromThresholds { a, b, through_origin, impute_top } => {
            let scale_a: SeverityThresholds = read_json(&a, "threshold scale a")?;
            let scale_b: SeverityThresholds = read_json(&b, "threshold scale b")?;
            let policy = if impute_top {
                TopCategoryPolicy::ImputeWidth
            } else {
                TopCategoryPolicy::DropUnboundedPair
            };
            let (alpha, beta) = scale_link_with(&scale_a, &scale_b, through_origin, policy)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({ "alpha": alpha, "beta": beta }))?
            );
        }
        Command::Grid { config } => {
            let grid: ExperimentGrid = read_json(&config, "grid config")?;
            let out = run_grid(&grid)?;
            let records_csv = cli.out_dir.join("records.csv");
            let records_jsonl = cli.out_dir.join("records.jsonl");
            let summary_csv = cli.out_dir.join("summary.csv");
            write_records_csv(&out.records, fs::File::create(&records_csv)?)?;
            write_records_jsonl(&out.records, fs::File::create(&records_jsonl)?)?;
            write_summary_csv(&out.summaries, fs::File::create(&summary_csv)?)?;
            eprintln!(
                "wrote {} records and {} summaries to {}",
                out.records.len(),
                out.summaries.len(),
                cli.out_dir.display()
            );
            // Human-readable summary table on stdout.
            let mut buf = Vec::new();
            write_summary_csv(&out.summaries, &mut buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
        Command::RateExperiment { config } => {
            let rc: RateConfig = read_json(&config, "rate-experiment config")?;
            let _ = rc.schema_version;
            let cells = run_rate_experiment(
                &rc.base_cfg,
                &rc.n0_values,
                &rc.n1_values,
                rc.replications,
                rc.seed,
                &rc.options,
            )?;
            let path = cli.out_dir.join("rate.csv");
            let mut w = fs::File::create(&path)?;
            use std::io::Write;
            writeln!(w, "n0,n1,rmse_one_stage,rmse_two_stage,sd_one_stage,sd_two_stage")?;
            for c in &cells {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    c.n0,
                    c.n1,
                    fuse_ate_core::csv_io::format_float(c.rmse_one_stage),
                    fuse_ate_core::csv_io::format_float(c.rmse_two_stage),
                    fuse_ate_core::csv_io::format_float(c.sd_one_stage),
                    fuse_ate_core::csv_io::format_float(c.sd_two_stage),
                )?;
            }
            eprintln!("wrote {} cells to {}", cells.len(), path.display());
            for c in &cells {
                println!(
                    "n0={:<7} n1={:<7} one-stage RMSE {:.4}  two-stage RMSE {:.4}",
                    c.n0, c.n1, c.rmse_one_stage, c.rmse_two_stage
                );
            }
        }
    }
    Ok(())
}

fn scalar_parts(v: &BoundValue) -> (f64, f64) {
    match v {
        BoundValue::Scalar { value, mc_std_error } => (*value, *mc_std_error),
        BoundValue::Matrix { sigma } => (sigma[0][0], f64::NAN),
    }
}

/// Counts `x*` columns in the header to size the canonical mapping.
fn peek_covariate_count(path: &Path) -> Result<usize> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().context("reading the header row")?;
    let p = headers
        .iter()
        .filter(|h| h.starts_with('x') && h[1..].parse::<usize>().is_ok())
        .count();
    if p == 0 {
        bail!("no covariate columns (x1..xp) in {}", path.display());
    }
    Ok(p)
}
