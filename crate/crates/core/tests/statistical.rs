//! Monte Carlo checks of the generator, the nuisance machinery, and the
//! estimators against independent oracles.

use fuse_ate_core::basis::Basis;
use fuse_ate_core::dgp::{expit, generate_dataset, true_ate, DgpConfig};
use fuse_ate_core::estimators::{
    estimate_theta_fused_known_alpha, estimate_theta_primary, two_stage_outcome_fit,
};
use fuse_ate_core::link::{CovariateFn, FunctionClass, LinkSpec};
use fuse_ate_core::nuisance::{cross_fit, cross_fit_with, CrossFitOptions};
use fuse_ate_core::rng::mix_seed;
use fuse_ate_core::scores::{
    score_joint, score_primary, variance_bound, BoundPopulation, BoundTarget, ScoreContext,
};
use fuse_ate_core::sensitivity::sensitivity_sweep;
use fuse_ate_core::Observation;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Generative values with heterogeneous effects and a covariate-dependent
/// link slope. Used where the heterogeneity itself is under test; the
/// homogeneous `default_benchmark` drives the estimator consistency studies.
fn heterogeneous_cfg() -> DgpConfig {
    DgpConfig {
        gamma1: 0.5,
        gamma2: -0.5,
        rho1: 0.3,
        ..DgpConfig::default_benchmark()
    }
}

/// Ground truth for `heterogeneous_cfg`, frozen from an independent
/// 10^7-draw Monte Carlo oracle run before this crate was built.
const HET_TRUE_ATE: f64 = 0.857993;
const HET_TRUE_ATE_SE: f64 = 0.000249;

#[test]
fn dgp_marginals_match_the_model() {
    let n = 100_000;
    let cfg = DgpConfig { n, ..DgpConfig::default_benchmark() };
    let sample = generate_dataset(&cfg, 2024).unwrap();
    let nf = n as f64;

    // Each covariate coordinate is standard normal.
    for j in 0..cfg.p {
        let mean: f64 = (0..n).map(|i| sample.x_row(i)[j]).sum::<f64>() / nf;
        assert!(mean.abs() <= 4.0 / nf.sqrt(), "coordinate {j} mean {mean}");
    }

    // Auxiliary fraction matches the Monte Carlo mean selection probability.
    let q = {
        let probe = DgpConfig { n: 400_000, ..cfg.clone() };
        let s = generate_dataset(&probe, 77).unwrap();
        s.n1() as f64 / 400_000.0
    };
    let frac = sample.n1() as f64 / nf;
    let band = 4.0 * (q * (1.0 - q) / nf).sqrt() + 4.0 * (q * (1.0 - q) / 400_000.0).sqrt();
    assert!((frac - q).abs() <= band, "aux fraction {frac} vs {q}");

    // Primary-study treatment is a fair coin.
    let n0 = sample.n0();
    let treated0 = (0..n)
        .filter(|&i| sample.s(i) == 0 && sample.t(i) == 1)
        .count();
    let tfrac = treated0 as f64 / n0 as f64;
    assert!(
        (tfrac - 0.5).abs() <= 4.0 * (0.25 / n0 as f64).sqrt(),
        "primary treated fraction {tfrac}"
    );
}

#[test]
fn aux_regression_recovers_w_model_coefficients() {
    // Regress V on (1, T, X1, X2, X3, T X1, T X2) among auxiliary units; the
    // coefficients are (b0, gamma0, b1, b2, b3, gamma1, gamma2). Standard
    // errors come from the closed-form OLS covariance computed here.
    let cfg = DgpConfig { n: 220_000, ..heterogeneous_cfg() };
    let sample = generate_dataset(&cfg, 555).unwrap();
    let idx = sample.stratum_indices(1);
    assert!(idx.len() >= 100_000, "need n1 >= 1e5, got {}", idx.len());
    let d = 7;
    let m = idx.len();
    let mut design = DMatrix::<f64>::zeros(m, d);
    let mut y = DVector::<f64>::zeros(m);
    for (r, &i) in idx.iter().enumerate() {
        let x = sample.x_row(i);
        let t = f64::from(sample.t(i));
        design[(r, 0)] = 1.0;
        design[(r, 1)] = t;
        design[(r, 2)] = x[0];
        design[(r, 3)] = x[1];
        design[(r, 4)] = x[2];
        design[(r, 5)] = t * x[0];
        design[(r, 6)] = t * x[1];
        y[r] = sample.v(i);
    }
    let xtx_inv = (design.transpose() * &design).try_inverse().unwrap();
    let beta = &xtx_inv * design.transpose() * &y;
    let resid = &y - &design * &beta;
    let sigma2 = resid.norm_squared() / (m - d) as f64;
    let truth = [cfg.b0, cfg.gamma0, cfg.b1, cfg.b2, cfg.b3, cfg.gamma1, cfg.gamma2];
    for j in 0..d {
        let se = (sigma2 * xtx_inv[(j, j)]).sqrt();
        assert!(
            (beta[j] - truth[j]).abs() <= 5.0 * se,
            "coefficient {j}: {} vs {} (se {se})",
            beta[j],
            truth[j]
        );
    }
}

#[test]
fn true_ate_matches_frozen_golden_value() {
    let cfg = heterogeneous_cfg();
    let est = true_ate(&cfg, 2_000_000, 314).unwrap();
    let band = 4.0 * (est.std_error.powi(2) + HET_TRUE_ATE_SE.powi(2)).sqrt();
    assert!(
        (est.value - HET_TRUE_ATE).abs() <= band,
        "true_ate {} vs golden {HET_TRUE_ATE} (band {band})",
        est.value
    );
}

#[test]
fn cross_fit_oof_rmse_tracks_the_oracle() {
    // Out-of-fold RMSE of the auxiliary outcome model against observed
    // outcomes, versus the RMSE of the analytic mean function.
    let cfg = DgpConfig { n: 20_000, ..DgpConfig::default_benchmark() };
    let sample = generate_dataset(&cfg, 91).unwrap();
    let fit = cross_fit(&sample, 5, Basis::Quadratic, None, 0.01).unwrap();
    let idx = sample.stratum_indices(1);
    let mut sq_fit = 0.0;
    let mut sq_oracle = 0.0;
    for &i in &idx {
        let v = sample.v(i);
        sq_fit += (v - fit.oof_mu_v[i]).powi(2);
        sq_oracle += (v - cfg.outcome_mean(sample.x_row(i), 1)).powi(2);
    }
    let rmse_fit = (sq_fit / idx.len() as f64).sqrt();
    let rmse_oracle = (sq_oracle / idx.len() as f64).sqrt();
    assert!(
        (rmse_fit - rmse_oracle).abs() / rmse_oracle <= 0.10,
        "oof rmse {rmse_fit} vs oracle {rmse_oracle}"
    );
}

#[test]
fn sigma_estimates_are_consistent_at_1e5() {
    let cfg = DgpConfig { n: 100_000, ..DgpConfig::default_benchmark() };
    let sample = generate_dataset(&cfg, 404).unwrap();
    let fit = cross_fit(&sample, 2, Basis::Raw, None, 0.01).unwrap();
    assert!(
        (fit.sigma_y_sq - cfg.sigma_y * cfg.sigma_y).abs() <= 0.05,
        "sigma_y_sq = {}",
        fit.sigma_y_sq
    );
    assert!(
        (fit.sigma_w_sq - cfg.sigma_w * cfg.sigma_w).abs() <= 0.05,
        "sigma_w_sq = {}",
        fit.sigma_w_sq
    );
}

#[test]
fn two_stage_recovers_link_slope_within_oracle_bands() {
    // Heterogeneous link alpha(x) = 1 + 0.3 x1 with both studies randomized
    // so the auxiliary arm mix matches the primary one; the second stage
    // then estimates (rho0, rho1) without mix bias. Oracle standard errors
    // come from closed-form least squares on the analytic regressor.
    let cfg = DgpConfig {
        n: 22_000,
        zeta1: 0.0,
        rho1: 0.3,
        ..DgpConfig::default_benchmark()
    };
    // Target roughly n1 = 20000, n0 = 2000.
    let cfg = DgpConfig {
        a0: fuse_ate_core::experiments::solve_a0_for_log_ratio(&cfg, (10.0f64).ln(), 5).unwrap(),
        ..cfg
    };
    let sample = generate_dataset(&cfg, 616).unwrap();
    let opts = CrossFitOptions {
        known_primary_propensity: Some(0.5),
        ..CrossFitOptions::default()
    };
    let fit = cross_fit_with(&sample, 2, &opts).unwrap();
    let link = LinkSpec::unknown(FunctionClass::LinearX1, FunctionClass::Constant);
    let ts = two_stage_outcome_fit(&sample, &fit, &link).unwrap();

    // Closed-form least squares of y on (mu_w, mu_w x1, 1) with the oracle
    // regressor mu_W(x, 0).
    let idx = sample.stratum_indices(0);
    let m = idx.len();
    let mut design = DMatrix::<f64>::zeros(m, 3);
    let mut y = DVector::<f64>::zeros(m);
    for (r, &i) in idx.iter().enumerate() {
        let x = sample.x_row(i);
        let muw = cfg.w_effect(x) * 0.5 + cfg.w_baseline(x);
        design[(r, 0)] = muw;
        design[(r, 1)] = muw * x[0];
        design[(r, 2)] = 1.0;
        y[r] = sample.v(i);
    }
    let xtx_inv = (design.transpose() * &design).try_inverse().unwrap();
    let beta = &xtx_inv * design.transpose() * &y;
    let resid = &y - &design * &beta;
    let sigma2 = resid.norm_squared() / (m - 3) as f64;
    for (j, truth) in [(0usize, cfg.rho0), (1usize, cfg.rho1)] {
        let se = (sigma2 * xtx_inv[(j, j)]).sqrt();
        assert!(
            (ts.alpha_coefs[j] - truth).abs() <= 5.0 * se,
            "alpha coefficient {j}: {} vs {truth} (oracle se {se})",
            ts.alpha_coefs[j]
        );
    }
}

#[test]
fn primary_score_is_mean_zero_under_heterogeneous_effects() {
    // R*_0 at the scalar target stays mean-zero even with covariate-driven
    // effect heterogeneity because the primary arm mix is constant.
    let cfg = DgpConfig { n: 200_000, ..heterogeneous_cfg() };
    let sample = generate_dataset(&cfg, 828).unwrap();
    let ctx = ScoreContext::oracle(&cfg, HET_TRUE_ATE);
    let vals: Vec<f64> = (0..sample.n())
        .map(|i| score_primary(&sample.observation(i), &ctx))
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(
        mean.abs() <= 4.0 * sd / n.sqrt() + 4.0 * HET_TRUE_ATE_SE * 0.25,
        "mean {mean}, sd {sd}"
    );
}

#[test]
fn empirical_score_outer_product_matches_analytic_information() {
    // E[R_b R_b^T] accumulated from simulated draws agrees with the analytic
    // information matrix that the variance bounds integrate.
    let cfg = DgpConfig { n: 200_000, ..DgpConfig::default_benchmark() };
    let sample = generate_dataset(&cfg, 999).unwrap();
    let ctx = ScoreContext::oracle(&cfg, 1.0);
    let mut m = [[0.0f64; 2]; 2];
    for i in 0..sample.n() {
        let (r1, r2) = score_joint(&sample.observation(i), &ctx).unwrap();
        m[0][0] += r1 * r1;
        m[0][1] += r1 * r2;
        m[1][1] += r2 * r2;
    }
    let n = sample.n() as f64;
    let emp = [[m[0][0] / n, m[0][1] / n], [m[0][1] / n, m[1][1] / n]];
    // Analytic counterpart via the bound integrands on the same X draws.
    let mut e_acc = [[0.0f64; 2]; 2];
    for i in 0..sample.n() {
        let (e0, e1) = fuse_ate_core::scores::bound_integrands(&ctx, sample.x_row(i)).unwrap();
        let c = ctx.theta / (ctx.alpha_fn)(sample.x_row(i));
        e_acc[0][0] += e0 + e1;
        e_acc[0][1] += -c * e1;
        e_acc[1][1] += c * c * e1;
    }
    for (a, b) in [
        (emp[0][0], e_acc[0][0] / n),
        (emp[0][1], e_acc[0][1] / n),
        (emp[1][1], e_acc[1][1] / n),
    ] {
        assert!(
            (a - b).abs() <= 0.03 * b.abs().max(0.05),
            "outer product entry {a} vs analytic {b}"
        );
    }
}

#[test]
fn fused_variance_matches_the_marginal_bound_within_20pct() {
    // Empirical variance of sqrt(n) theta_a over 500 replications at
    // n = 5000 against the Monte Carlo plug-in of the fused bound.
    let cfg = DgpConfig { n: 5000, ..DgpConfig::default_benchmark() };
    let link = LinkSpec::fully_known(
        CovariateFn::LinearX1 { intercept: cfg.rho0, slope: cfg.rho1 },
        CovariateFn::zero(),
    );
    let estimates: Vec<f64> = (0..500usize)
        .into_par_iter()
        .map(|rep| {
            let c = DgpConfig { ..cfg.clone() };
            let sample = generate_dataset(&c, mix_seed(31337, rep as u64)).unwrap();
            let fit = cross_fit(&sample, 5, Basis::Raw, None, 0.01).unwrap();
            estimate_theta_fused_known_alpha(&sample, &fit, &link).unwrap().estimate
        })
        .collect();
    let m = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let var = estimates.iter().map(|e| (e - m) * (e - m)).sum::<f64>()
        / (estimates.len() - 1) as f64;
    let scaled = cfg.n as f64 * var;
    let ctx = ScoreContext::oracle(&cfg, 1.0);
    let va = variance_bound(
        &ctx,
        BoundPopulation::McDraws { p: cfg.p, draws: 400_000, seed: 7 },
        BoundTarget::Va,
    )
    .unwrap()
    .scalar();
    assert!(
        (scaled - va).abs() / va <= 0.20,
        "n Var = {scaled} vs plug-in bound {va}"
    );
}

#[test]
fn sweep_identifies_the_true_scale_most_often() {
    // Across the 0.5-1.5 grid the unscaled link should give the estimate
    // closest to the truth in at least 80% of replications.
    let cfg = DgpConfig::default_benchmark();
    let link = LinkSpec::fully_known(
        CovariateFn::LinearX1 { intercept: cfg.rho0, slope: cfg.rho1 },
        CovariateFn::zero(),
    );
    let grid = [0.5, 1.0, 1.5];
    let wins: usize = (0..200usize)
        .into_par_iter()
        .map(|rep| {
            let sample = generate_dataset(&cfg, mix_seed(60606, rep as u64)).unwrap();
            let fit = cross_fit(&sample, 5, Basis::Raw, None, 0.01).unwrap();
            let sweep = sensitivity_sweep(&sample, &fit, &link, &grid).unwrap();
            let best = sweep
                .iter()
                .enumerate()
                .min_by(|(_, (_, a)), (_, (_, b))| {
                    (a.estimate - 1.0)
                        .abs()
                        .total_cmp(&(b.estimate - 1.0).abs())
                })
                .map(|(i, _)| i)
                .unwrap();
            usize::from(best == 1)
        })
        .sum();
    let frac = wins as f64 / 200.0;
    assert!(frac >= 0.80, "true scale closest in only {frac:.2} of replications");
}

#[test]
fn primary_estimator_variance_is_insensitive_to_noise_dimensions() {
    // Adding pure-noise covariates degrades nuisance fits but the estimator
    // stays consistent; quick sanity at moderate n.
    for p in [5usize, 20usize] {
        let cfg = DgpConfig { n: 4000, p, ..DgpConfig::default_benchmark() };
        let ests: Vec<f64> = (0..60usize)
            .into_par_iter()
            .map(|rep| {
                let sample = generate_dataset(&cfg, mix_seed(777 + p as u64, rep as u64)).unwrap();
                let fit = cross_fit(&sample, 2, Basis::Raw, None, 0.01).unwrap();
                estimate_theta_primary(&sample, &fit).unwrap().estimate
            })
            .collect();
        let m = ests.iter().sum::<f64>() / ests.len() as f64;
        let se = (ests.iter().map(|e| (e - m) * (e - m)).sum::<f64>()
            / (ests.len() as f64 - 1.0)
            / ests.len() as f64)
            .sqrt();
        assert!((m - 1.0).abs() <= 4.0 * se, "p = {p}: mean {m}, se {se}");
    }
}

#[test]
fn rate_experiment_gains_grow_with_auxiliary_size() {
    // Small primary study, rich basis: the two-stage outcome fit improves
    // strictly as the auxiliary study grows and beats the direct fit once
    // the auxiliary study is large.
    use fuse_ate_core::experiments::{run_rate_experiment, HarnessOptions};
    let base = DgpConfig { p: 20, ..DgpConfig::default_benchmark() };
    let opts = HarnessOptions { basis: Basis::Quadratic, ..HarnessOptions::default() };
    let cells =
        run_rate_experiment(&base, &[200], &[200, 2000, 20_000], 100, 0x7A7E, &opts).unwrap();
    assert_eq!(cells.len(), 3);
    assert!(
        cells[0].rmse_two_stage > cells[1].rmse_two_stage
            && cells[1].rmse_two_stage > cells[2].rmse_two_stage,
        "two-stage RMSE not decreasing: {:?}",
        cells.iter().map(|c| c.rmse_two_stage).collect::<Vec<_>>()
    );
    assert!(
        cells[2].rmse_two_stage < cells[2].rmse_one_stage,
        "two-stage {} not below one-stage {} at n1 = 20000",
        cells[2].rmse_two_stage,
        cells[2].rmse_one_stage
    );
}

#[test]
fn observation_invariants_are_enforced() {
    let bad = Observation { x: vec![0.0, 0.0, 0.0], s: 2, t: 0, v: 1.0 };
    assert!(bad.validate().is_err());
    let nan = Observation { x: vec![0.0, 0.0, 0.0], s: 0, t: 0, v: f64::NAN };
    assert!(nan.validate().is_err());
    assert!(expit(700.0) <= 1.0 && expit(-700.0) >= 0.0);
}
