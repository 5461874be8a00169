//! Monte Carlo experiment harness: replication grids over (n, p, log study
//! ratio), the held-out outcome-regression error experiment, and their
//! serialized outputs.
//!
//! Replications run concurrently; records are merged in replication order so
//! output is identical regardless of the degree of parallelism.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::dgp::{expit, generate_with_stream, DgpConfig, Sample};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_theta_fused_known_alpha, estimate_theta_primary, estimate_theta_two_stage,
    EstimateResult, MethodTag,
};
use crate::link::{CovariateFn, FunctionClass, LinkSpec};
use crate::nuisance::{cross_fit_with, CrossFitOptions, ModelSelection, NuisanceFit};
use crate::rng::{mix_seed, replication_stream, substream_rng, STREAM_SOLVE_A0, STREAM_TEST_DRAW};

pub const SCHEMA_VERSION: u32 = 1;

/// Tuning knobs shared by the grid and rate experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessOptions {
    pub folds: usize,
    pub basis: Basis,
    pub ridge_lambda: Option<f64>,
    pub epsilon_clip: f64,
    /// Treat the primary study as a randomized trial with this assignment
    /// probability instead of fitting a propensity model.
    pub known_primary_propensity: Option<f64>,
    /// Second-stage link classes for the two-stage estimator.
    pub alpha_class: FunctionClass,
    pub beta_class: FunctionClass,
    /// Draws for each cell's ground-truth oracle.
    pub oracle_draws: usize,
    /// Fit only the nuisance models the requested estimators read.
    pub lean_models: bool,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            folds: 2,
            basis: Basis::Raw,
            ridge_lambda: None,
            epsilon_clip: 0.01,
            known_primary_propensity: Some(0.5),
            alpha_class: FunctionClass::LinearX1,
            beta_class: FunctionClass::Constant,
            oracle_draws: 1_000_000,
            lean_models: true,
        }
    }
}

/// A grid of Monte Carlo cells. `log_ratio_values` targets
/// log(P(S=1) / P(S=0)); each cell solves for the selection intercept that
/// realizes its target given the configured slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    #[serde(default = "schema_version_default")]
    pub schema_version: u32,
    pub n_values: Vec<usize>,
    pub p_values: Vec<usize>,
    pub log_ratio_values: Vec<f64>,
    pub replications: usize,
    pub methods: Vec<MethodTag>,
    pub base_cfg: DgpConfig,
    pub seed: u64,
    #[serde(default)]
    pub options: HarnessOptions,
}

fn schema_version_default() -> u32 {
    SCHEMA_VERSION
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        self.base_cfg.validate()?;
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.n_values.is_empty() || self.p_values.is_empty() || self.log_ratio_values.is_empty()
        {
            return Err(Error::Config("grid value lists must be non-empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.p_values.iter().any(|&p| p < 3) {
            return Err(Error::Config("every p must be at least 3".into()));
        }
        Ok(())
    }
}

/// One replication of one method in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub method: MethodTag,
    pub n: usize,
    pub p: usize,
    pub log_ratio: f64,
    pub replication_index: usize,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub covered_truth: Option<bool>,
    pub runtime_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregate summary of one (cell, method) pair. `variance` uses the
/// population convention so that mse = bias^2 + variance holds exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: MethodTag,
    pub n: usize,
    pub p: usize,
    pub log_ratio: f64,
    pub truth: f64,
    pub truth_std_error: f64,
    pub mse: f64,
    pub bias: f64,
    pub variance: f64,
    pub coverage: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Set when more than 1% of replications failed.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutput {
    pub schema_version: u32,
    pub records: Vec<ExperimentRecord>,
    pub summaries: Vec<CellSummary>,
}

/// Solves for the selection intercept a0 in [-20, 20] whose Monte Carlo mean
/// selection probability hits the target log ratio within 1e-3.
pub fn solve_a0_for_log_ratio(cfg: &DgpConfig, log_ratio: f64, seed: u64) -> Result<f64> {
    let draws = 400_000;
    let mut rng = substream_rng(seed, STREAM_SOLVE_A0);
    let z: Vec<f64> = (0..draws)
        .map(|_| {
            let x1: f64 = rng.sample(StandardNormal);
            let x2: f64 = rng.sample(StandardNormal);
            cfg.a1 * x1 + cfg.a2 * x2
        })
        .collect();
    let mean_p = |a0: f64| -> f64 { z.iter().map(|&zi| expit(a0 + zi)).sum::<f64>() / draws as f64 };
    let target = expit(log_ratio);
    let (mut lo, mut hi) = (-20.0f64, 20.0f64);
    if mean_p(lo) > target || mean_p(hi) < target {
        return Err(Error::Config(format!(
            "log ratio {log_ratio} is not achievable with a0 in [-20, 20]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a0 = 0.5 * (lo + hi);
    let q = mean_p(a0);
    let achieved = (q / (1.0 - q)).ln();
    if (achieved - log_ratio).abs() > 1e-3 {
        return Err(Error::Config(format!(
            "log ratio solver stalled at {achieved} for target {log_ratio}"
        )));
    }
    Ok(a0)
}

fn nuisance_options(opts: &HarnessOptions, methods: &[MethodTag]) -> CrossFitOptions {
    let needs_aux = !opts.lean_models || methods.contains(&MethodTag::ThetaA);
    CrossFitOptions {
        basis: opts.basis,
        ridge_lambda: opts.ridge_lambda,
        epsilon_clip: opts.epsilon_clip,
        known_primary_propensity: opts.known_primary_propensity,
        fold_seed: None,
        models: ModelSelection {
            outcome_means: true,
            aux_propensity: needs_aux,
            selection: !opts.lean_models,
        },
    }
}

fn run_method(
    method: MethodTag,
    sample: &Sample,
    fit: &NuisanceFit,
    cfg: &DgpConfig,
    opts: &HarnessOptions,
) -> Result<EstimateResult> {
    match method {
        MethodTag::Theta0 => estimate_theta_primary(sample, fit),
        MethodTag::ThetaA => {
            let link = LinkSpec::fully_known(
                CovariateFn::LinearX1 { intercept: cfg.rho0, slope: cfg.rho1 },
                CovariateFn::zero(),
            );
            estimate_theta_fused_known_alpha(sample, fit, &link)
        }
        MethodTag::ThetaB => {
            let link = LinkSpec::unknown(opts.alpha_class, opts.beta_class);
            estimate_theta_two_stage(sample, fit, &link)
        }
    }
}

/// Runs every cell of the grid and summarizes each (cell, method) pair.
pub fn run_grid(grid: &ExperimentGrid) -> Result<GridOutput> {
    grid.validate()?;
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut cell_index = 0u64;
    for &n in &grid.n_values {
        for &p in &grid.p_values {
            for &log_ratio in &grid.log_ratio_values {
                let cell_key = mix_seed(grid.seed, cell_index);
                let a0 = solve_a0_for_log_ratio(&grid.base_cfg, log_ratio, cell_key)?;
                let cfg = DgpConfig { n, p, a0, ..grid.base_cfg.clone() };
                let oracle = crate::dgp::true_ate(&cfg, grid.options.oracle_draws, cell_key)?;
                let nuis_opts = nuisance_options(&grid.options, &grid.methods);

                let cell_records: Vec<Vec<ExperimentRecord>> = (0..grid.replications)
                    .into_par_iter()
                    .map(|rep| {
                        let start = Instant::now();
                        let mut out = Vec::with_capacity(grid.methods.len());
                        let prepared = generate_with_stream(&cfg, cell_key, replication_stream(rep))
                            .and_then(|sample| {
                                let fit =
                                    cross_fit_with(&sample, grid.options.folds, &nuis_opts)?;
                                Ok((sample, fit))
                            });
                        for &method in &grid.methods {
                            let elapsed = || start.elapsed().as_secs_f64() * 1e3;
                            let base = ExperimentRecord {
                                method,
                                n,
                                p,
                                log_ratio,
                                replication_index: rep,
                                estimate: None,
                                std_error: None,
                                covered_truth: None,
                                runtime_ms: 0.0,
                                error: None,
                            };
                            let record = match &prepared {
                                Ok((sample, fit)) => {
                                    match run_method(method, sample, fit, &cfg, &grid.options) {
                                        Ok(res) => ExperimentRecord {
                                            estimate: Some(res.estimate),
                                            std_error: Some(res.std_error),
                                            covered_truth: Some(res.covers(oracle.value)),
                                            runtime_ms: elapsed(),
                                            ..base
                                        },
                                        Err(e) => ExperimentRecord {
                                            runtime_ms: elapsed(),
                                            error: Some(e.to_string()),
                                            ..base
                                        },
                                    }
                                }
                                Err(e) => ExperimentRecord {
                                    runtime_ms: elapsed(),
                                    error: Some(e.to_string()),
                                    ..base
                                },
                            };
                            out.push(record);
                        }
                        out
                    })
                    .collect();

                for method in &grid.methods {
                    let estimates: Vec<(f64, bool)> = cell_records
                        .iter()
                        .flatten()
                        .filter(|r| r.method == *method && r.estimate.is_some())
                        .map(|r| (r.estimate.unwrap(), r.covered_truth.unwrap_or(false)))
                        .collect();
                    let n_ok = estimates.len();
                    let n_failed = grid.replications - n_ok;
                    let (mse, bias, variance, coverage) = if n_ok > 0 {
                        let m = estimates.iter().map(|(e, _)| e).sum::<f64>() / n_ok as f64;
                        let bias = m - oracle.value;
                        let variance =
                            estimates.iter().map(|(e, _)| (e - m) * (e - m)).sum::<f64>()
                                / n_ok as f64;
                        let mse = bias * bias + variance;
                        let coverage = estimates.iter().filter(|(_, c)| *c).count() as f64
                            / n_ok as f64;
                        (mse, bias, variance, coverage)
                    } else {
                        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                    };
                    summaries.push(CellSummary {
                        method: *method,
                        n,
                        p,
                        log_ratio,
                        truth: oracle.value,
                        truth_std_error: oracle.std_error,
                        mse,
                        bias,
                        variance,
                        coverage,
                        n_ok,
                        n_failed,
                        flagged: (n_failed as f64) > 0.01 * grid.replications as f64,
                    });
                }
                records.extend(cell_records.into_iter().flatten());
                cell_index += 1;
            }
        }
    }
    Ok(GridOutput { schema_version: SCHEMA_VERSION, records, summaries })
}

/// One cell of the held-out outcome-regression error experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub n0: usize,
    pub n1: usize,
    pub rmse_one_stage: f64,
    pub rmse_two_stage: f64,
    pub sd_one_stage: f64,
    pub sd_two_stage: f64,
    pub replications: usize,
}

/// Compares the held-out error of the direct primary outcome regression
/// against the two-stage surrogate-informed regression across primary and
/// auxiliary sample sizes. RMSE is measured against the oracle outcome mean
/// on a fresh primary-population test draw shared by all replications of a
/// cell.
pub fn run_rate_experiment(
    base_cfg: &DgpConfig,
    n0_values: &[usize],
    n1_values: &[usize],
    replications: usize,
    seed: u64,
    opts: &HarnessOptions,
) -> Result<Vec<RateCell>> {
    base_cfg.validate()?;
    if n0_values.is_empty() || n1_values.is_empty() {
        return Err(Error::Input("sample size lists must be non-empty".into()));
    }
    if n1_values.iter().any(|&n1| n1 == 0) {
        return Err(Error::Input(
            "the two-stage fit is undefined with no auxiliary units (n1 = 0)".into(),
        ));
    }
    if n0_values.iter().any(|&n0| n0 == 0) {
        return Err(Error::Input("n0 = 0 leaves nothing to fit on".into()));
    }
    let test_size = 10_000usize;
    let mut cells = Vec::new();
    let mut cell_index = 0u64;
    for &n0 in n0_values {
        for &n1 in n1_values {
            let cell_key = mix_seed(seed, 0x52415445 ^ cell_index);
            let log_ratio = (n1 as f64 / n0 as f64).ln();
            let a0 = solve_a0_for_log_ratio(base_cfg, log_ratio, cell_key)?;
            let cfg = DgpConfig { n: n0 + n1, a0, ..base_cfg.clone() };

            // Fixed held-out primary-population covariate draw.
            let mut rng = substream_rng(cell_key, STREAM_TEST_DRAW);
            let mut test_x = Vec::with_capacity(test_size * cfg.p);
            let mut oracle_mu = Vec::with_capacity(test_size);
            let mut x = vec![0.0f64; cfg.p];
            while oracle_mu.len() < test_size {
                for c in x.iter_mut() {
                    *c = rng.sample(StandardNormal);
                }
                if rng.random::<f64>() < cfg.selection_prob(&x) {
                    continue; // keep only units the primary study would enroll
                }
                test_x.extend_from_slice(&x);
                oracle_mu.push(cfg.outcome_mean(&x, 0));
            }

            let nuis_opts = CrossFitOptions {
                basis: opts.basis,
                ridge_lambda: opts.ridge_lambda,
                epsilon_clip: opts.epsilon_clip,
                known_primary_propensity: opts.known_primary_propensity,
                fold_seed: None,
                models: ModelSelection {
                    outcome_means: true,
                    aux_propensity: false,
                    selection: false,
                },
            };
            let link = LinkSpec::unknown(opts.alpha_class, opts.beta_class);

            let per_rep: Vec<Result<(f64, f64)>> = (0..replications)
                .into_par_iter()
                .map(|rep| {
                    let sample =
                        generate_with_stream(&cfg, cell_key, replication_stream(rep))?;
                    let fit = cross_fit_with(&sample, opts.folds, &nuis_opts)?;
                    let two_stage = crate::estimators::two_stage_outcome_fit(&sample, &fit, &link)?;
                    let mut sq_one = 0.0;
                    let mut sq_two = 0.0;
                    for (j, &truth) in oracle_mu.iter().enumerate() {
                        let xt = &test_x[j * cfg.p..(j + 1) * cfg.p];
                        let one = fit.predict_mu_y0_mean(xt)?;
                        let muw = fit.predict_mu_w_mean(xt)?;
                        let two = two_stage.predict(xt, muw);
                        sq_one += (one - truth) * (one - truth);
                        sq_two += (two - truth) * (two - truth);
                    }
                    let m = oracle_mu.len() as f64;
                    Ok(((sq_one / m).sqrt(), (sq_two / m).sqrt()))
                })
                .collect();
            let mut ones = Vec::new();
            let mut twos = Vec::new();
            for r in per_rep {
                let (a, b) = r?;
                ones.push(a);
                twos.push(b);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let sd = |v: &[f64], m: f64| {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
            };
            let (m1, m2) = (mean(&ones), mean(&twos));
            cells.push(RateCell {
                n0,
                n1,
                rmse_one_stage: m1,
                rmse_two_stage: m2,
                sd_one_stage: sd(&ones, m1),
                sd_two_stage: sd(&twos, m2),
                replications,
            });
            cell_index += 1;
        }
    }
    Ok(cells)
}

/// Writes replication records as CSV with a fixed column order.
pub fn write_records_csv<W: Write>(records: &[ExperimentRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "method",
        "n",
        "p",
        "log_ratio",
        "replication_index",
        "estimate",
        "std_error",
        "covered_truth",
        "runtime_ms",
        "error",
    ])?;
    for r in records {
        wtr.write_record([
            r.method.to_string(),
            r.n.to_string(),
            r.p.to_string(),
            crate::csv_io::format_float(r.log_ratio),
            r.replication_index.to_string(),
            r.estimate.map(crate::csv_io::format_float).unwrap_or_default(),
            r.std_error.map(crate::csv_io::format_float).unwrap_or_default(),
            r.covered_truth.map(|c| (c as u8).to_string()).unwrap_or_default(),
            format!("{:.3}", r.runtime_ms),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes replication records as JSON lines.
pub fn write_records_jsonl<W: Write>(records: &[ExperimentRecord], mut writer: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes cell summaries as CSV in the documented column order
/// (method, n, p, log_ratio, mse, bias, variance, coverage, n_failed).
pub fn write_summary_csv<W: Write>(summaries: &[CellSummary], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "method",
        "n",
        "p",
        "log_ratio",
        "mse",
        "bias",
        "variance",
        "coverage",
        "n_failed",
    ])?;
    for s in summaries {
        wtr.write_record([
            s.method.to_string(),
            s.n.to_string(),
            s.p.to_string(),
            crate::csv_io::format_float(s.log_ratio),
            crate::csv_io::format_float(s.mse),
            crate::csv_io::format_float(s.bias),
            crate::csv_io::format_float(s.variance),
            crate::csv_io::format_float(s.coverage),
            s.n_failed.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_grid() -> ExperimentGrid {
        ExperimentGrid {
            schema_version: SCHEMA_VERSION,
            n_values: vec![400],
            p_values: vec![3],
            log_ratio_values: vec![0.0],
            replications: 8,
            methods: vec![MethodTag::Theta0, MethodTag::ThetaA, MethodTag::ThetaB],
            base_cfg: DgpConfig::default_benchmark(),
            seed: 99,
            options: HarnessOptions { oracle_draws: 50_000, ..HarnessOptions::default() },
        }
    }

    #[test]
    fn grid_is_deterministic() {
        // Wall-clock runtime is the one field exempt from byte stability.
        let strip = |mut out: GridOutput| {
            for r in out.records.iter_mut() {
                r.runtime_ms = 0.0;
            }
            out
        };
        let grid = tiny_grid();
        let a = strip(run_grid(&grid).unwrap());
        let b = strip(run_grid(&grid).unwrap());
        assert_eq!(a, b);
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_records_csv(&a.records, &mut csv_a).unwrap();
        write_records_csv(&b.records, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        let mut sum_a = Vec::new();
        let mut sum_b = Vec::new();
        write_summary_csv(&a.summaries, &mut sum_a).unwrap();
        write_summary_csv(&b.summaries, &mut sum_b).unwrap();
        assert_eq!(sum_a, sum_b);
    }

    #[test]
    fn summaries_are_schedule_independent() {
        // A single-threaded pool must reproduce the default pool's output.
        let grid = tiny_grid();
        let parallel = run_grid(&grid).unwrap();
        let serial_pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = serial_pool.install(|| run_grid(&grid).unwrap());
        assert_eq!(parallel.summaries, serial.summaries);
        let strip = |records: &[ExperimentRecord]| -> Vec<ExperimentRecord> {
            records.iter().cloned().map(|mut r| {
                r.runtime_ms = 0.0;
                r
            }).collect()
        };
        assert_eq!(strip(&parallel.records), strip(&serial.records));
    }

    #[test]
    fn mse_identity_holds_exactly() {
        let out = run_grid(&tiny_grid()).unwrap();
        for s in &out.summaries {
            assert!(s.n_ok > 0);
            assert_abs_diff_eq!(s.mse, s.bias * s.bias + s.variance, epsilon = 1e-10);
        }
    }

    #[test]
    fn records_cover_every_method_and_replication() {
        let grid = tiny_grid();
        let out = run_grid(&grid).unwrap();
        assert_eq!(out.records.len(), grid.replications * grid.methods.len());
        for rep in 0..grid.replications {
            for m in &grid.methods {
                assert!(out
                    .records
                    .iter()
                    .any(|r| r.replication_index == rep && r.method == *m));
            }
        }
    }

    #[test]
    fn infeasible_log_ratio_is_a_config_error() {
        let cfg = DgpConfig::default_benchmark();
        assert!(matches!(
            solve_a0_for_log_ratio(&cfg, 60.0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_ratio_solver_hits_target() {
        let cfg = DgpConfig::default_benchmark();
        for lr in [-1.0, 0.0, 2.0] {
            let a0 = solve_a0_for_log_ratio(&cfg, lr, 7).unwrap();
            let est = {
                let mut rng = substream_rng(123, 9);
                let draws = 200_000;
                let mean: f64 = (0..draws)
                    .map(|_| {
                        let x1: f64 = rng.sample(StandardNormal);
                        let x2: f64 = rng.sample(StandardNormal);
                        expit(a0 + cfg.a1 * x1 + cfg.a2 * x2)
                    })
                    .sum::<f64>()
                    / draws as f64;
                (mean / (1.0 - mean)).ln()
            };
            assert!((est - lr).abs() < 0.02, "target {lr}, achieved {est}");
        }
    }

    #[test]
    fn rate_experiment_rejects_empty_aux() {
        let cfg = DgpConfig::default_benchmark();
        assert!(matches!(
            run_rate_experiment(&cfg, &[100], &[0], 2, 1, &HarnessOptions::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn rate_experiment_noiseless_rmse_is_tiny() {
        let cfg = DgpConfig {
            sigma_w: 1e-12,
            sigma_y: 1e-12,
            zeta1: 0.0,
            gamma0: 0.0,
            ..DgpConfig::default_benchmark()
        };
        let opts =
            HarnessOptions { folds: 1, ridge_lambda: Some(0.0), ..HarnessOptions::default() };
        let cells = run_rate_experiment(&cfg, &[400], &[600], 2, 3, &opts).unwrap();
        assert!(cells[0].rmse_one_stage <= 1e-6, "{}", cells[0].rmse_one_stage);
        assert!(cells[0].rmse_two_stage <= 1e-6, "{}", cells[0].rmse_two_stage);
    }

    #[test]
    fn summary_csv_has_fixed_columns() {
        let out = run_grid(&tiny_grid()).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&out.summaries, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,n,p,log_ratio,mse,bias,variance,coverage,n_failed\n"));
    }
}
