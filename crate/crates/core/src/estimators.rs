//! The three ATE estimators.
//!
//! All three solve an empirical score equation of residual-on-residual form;
//! standard errors come from the empirical variance of the fitted score
//! divided by the squared score derivative (the denominator sum over n).

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::Sample;
use crate::error::{Error, Result};
use crate::link::{CovariateFn, FittedLink, LinkKnowledge, LinkSpec};
use crate::nuisance::NuisanceFit;

/// Link scales closer to zero than this are treated as degenerate.
pub const ALPHA_MIN: f64 = 1e-3;
/// The score denominator must exceed `DENOM_FLOOR_PER_UNIT * n`.
pub const DENOM_FLOOR_PER_UNIT: f64 = 1e-8;
/// Two-sided 95% normal quantile used for every confidence interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Theta0,
    ThetaA,
    ThetaB,
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MethodTag::Theta0 => write!(f, "theta0"),
            MethodTag::ThetaA => write!(f, "theta_a"),
            MethodTag::ThetaB => write!(f, "theta_b"),
        }
    }
}

impl std::str::FromStr for MethodTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta0" => Ok(MethodTag::Theta0),
            "theta_a" => Ok(MethodTag::ThetaA),
            "theta_b" => Ok(MethodTag::ThetaB),
            other => Err(Error::Input(format!(
                "unknown method '{other}', expected theta0|theta_a|theta_b"
            ))),
        }
    }
}

/// Point estimate with influence-function standard error and 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub method: MethodTag,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n0: usize,
    pub n1: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateResult {
    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

fn finalize(
    method: MethodTag,
    estimate: f64,
    std_error: f64,
    sample: &Sample,
    diagnostics: BTreeMap<String, f64>,
) -> EstimateResult {
    EstimateResult {
        method,
        estimate,
        std_error,
        ci_low: estimate - Z_95 * std_error,
        ci_high: estimate + Z_95 * std_error,
        n0: sample.n0(),
        n1: sample.n1(),
        diagnostics,
    }
}

/// Empirical variance (population convention) of the score values.
fn score_variance(psi: &[f64]) -> f64 {
    let n = psi.len() as f64;
    let mean = psi.iter().sum::<f64>() / n;
    psi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn require_finite(value: f64, what: &str, unit: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Internal(format!("missing {what} prediction for unit {unit}")))
    }
}

/// ATE from the primary study alone: the residual-on-residual ratio over
/// s = 0 units.
pub fn estimate_theta_primary(sample: &Sample, fit: &NuisanceFit) -> Result<EstimateResult> {
    let n = sample.n();
    let n0 = sample.n0();
    if n0 < 2 {
        return Err(Error::Input(format!("need at least 2 primary units, got {n0}")));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if sample.s(i) != 0 {
            continue;
        }
        let rv = sample.v(i) - require_finite(fit.oof_mu_v[i], "outcome mean", i)?;
        let rt = f64::from(sample.t(i)) - require_finite(fit.oof_mu_t[i], "propensity", i)?;
        num += rv * rt;
        den += rt * rt;
    }
    if den <= DENOM_FLOOR_PER_UNIT * n as f64 {
        return Err(Error::Estimation(format!(
            "degenerate primary score denominator {den:.3e}"
        )));
    }
    let estimate = num / den;
    let sy2 = fit.sigma_y_sq;
    let mut psi = vec![0.0; n];
    for i in 0..n {
        if sample.s(i) != 0 {
            continue;
        }
        let rv = sample.v(i) - fit.oof_mu_v[i];
        let rt = f64::from(sample.t(i)) - fit.oof_mu_t[i];
        psi[i] = (rv - estimate * rt) * rt / sy2;
    }
    let jacobian = den / (n as f64 * sy2);
    let std_error = (score_variance(&psi) / (jacobian * jacobian * n as f64)).sqrt();
    let mut diag = BTreeMap::new();
    diag.insert("denominator".into(), den);
    diag.insert("clip_count".into(), fit.clip_count as f64);
    Ok(finalize(MethodTag::Theta0, estimate, std_error, sample, diag))
}

/// Fused ATE under a fully known link: auxiliary residual products enter the
/// score scaled by 1/alpha(x) in the numerator and 1/alpha^2(x) in the
/// denominator, each stratum weighted by its estimated noise variance.
pub fn estimate_theta_fused_known_alpha(
    sample: &Sample,
    fit: &NuisanceFit,
    link: &LinkSpec,
) -> Result<EstimateResult> {
    link.validate()?;
    if link.knowledge != LinkKnowledge::FullyKnown {
        return Err(Error::Input(
            "the fused estimator requires a fully known link".into(),
        ));
    }
    let alpha_fn = link.alpha_form.as_ref().expect("validated");
    let n = sample.n();
    let n0 = sample.n0();
    if n0 < 2 {
        return Err(Error::Input(format!("need at least 2 primary units, got {n0}")));
    }
    let sy2 = fit.sigma_y_sq;
    let sw2 = fit.sigma_w_sq;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut min_abs_alpha = f64::INFINITY;
    let mut alphas = vec![0.0; n];
    for i in 0..n {
        let rt = f64::from(sample.t(i)) - require_finite(fit.oof_mu_t[i], "propensity", i)?;
        let rv = sample.v(i) - require_finite(fit.oof_mu_v[i], "outcome mean", i)?;
        if sample.s(i) == 0 {
            num += rv * rt / sy2;
            den += rt * rt / sy2;
        } else {
            let a = alpha_fn.eval(sample.x_row(i));
            if a.abs() < ALPHA_MIN {
                return Err(Error::LinkDegeneracy(format!(
                    "|alpha(x)| = {:.3e} below {ALPHA_MIN} at auxiliary unit {i}",
                    a.abs()
                )));
            }
            min_abs_alpha = min_abs_alpha.min(a.abs());
            alphas[i] = a;
            num += rv * rt / (a * sw2);
            den += rt * rt / (a * a * sw2);
        }
    }
    if den <= DENOM_FLOOR_PER_UNIT * n as f64 {
        return Err(Error::Estimation(format!(
            "degenerate fused score denominator {den:.3e}"
        )));
    }
    let estimate = num / den;
    let mut psi = vec![0.0; n];
    for i in 0..n {
        let rv = sample.v(i) - fit.oof_mu_v[i];
        let rt = f64::from(sample.t(i)) - fit.oof_mu_t[i];
        psi[i] = if sample.s(i) == 0 {
            (rv - estimate * rt) * rt / sy2
        } else {
            let a = alphas[i];
            (a * rv - estimate * rt) * rt / (a * a * sw2)
        };
    }
    let jacobian = den / n as f64;
    let std_error = (score_variance(&psi) / (jacobian * jacobian * n as f64)).sqrt();
    let mut diag = BTreeMap::new();
    diag.insert("denominator".into(), den);
    diag.insert("clip_count".into(), fit.clip_count as f64);
    if min_abs_alpha.is_finite() {
        diag.insert("min_abs_alpha".into(), min_abs_alpha);
    }
    Ok(finalize(MethodTag::ThetaA, estimate, std_error, sample, diag))
}

/// Output of the two-stage outcome fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageFit {
    pub alpha_hat: CovariateFn,
    pub beta_hat: CovariateFn,
    pub alpha_coefs: Vec<f64>,
    pub beta_coefs: Vec<f64>,
    /// Standard errors for the stacked (alpha, beta) coefficients from the
    /// second-stage least squares.
    pub coef_std_errors: Vec<f64>,
    /// Indices of the primary units, aligned with `mu_yb`.
    pub primary_indices: Vec<usize>,
    /// Fitted primary outcome means alpha_hat(x) mu_w_hat(x) + beta_hat(x).
    pub mu_yb: Vec<f64>,
}

impl TwoStageFit {
    /// Evaluates the fitted outcome mean at a new point given the first-stage
    /// auxiliary prediction at that point.
    pub fn predict(&self, x: &[f64], mu_w_hat: f64) -> f64 {
        self.alpha_hat.eval(x) * mu_w_hat + self.beta_hat.eval(x)
    }
}

/// First stage: predict the auxiliary outcome mean on primary units from the
/// auxiliary-study fit. Second stage: least squares of the primary outcome on
/// alpha-class columns times that prediction, plus beta-class columns (or a
/// known beta offset).
pub fn two_stage_outcome_fit(
    sample: &Sample,
    fit: &NuisanceFit,
    link: &LinkSpec,
) -> Result<TwoStageFit> {
    link.validate()?;
    if link.knowledge == LinkKnowledge::FullyKnown {
        return Err(Error::Input(
            "two-stage fitting applies to beta-known or unknown links".into(),
        ));
    }
    let beta_known = link.knowledge == LinkKnowledge::BetaKnown;
    let p = sample.p();
    let a_dim = link.alpha_class.dim(p);
    let b_dim = if beta_known { 0 } else { link.beta_class.dim(p) };
    let d = a_dim + b_dim;
    let primary_indices = sample.stratum_indices(0);
    if primary_indices.len() < d + 1 {
        return Err(Error::Input(format!(
            "second stage needs at least {} primary units, got {}",
            d + 1,
            primary_indices.len()
        )));
    }
    if fit.mu_w1.is_empty() {
        return Err(Error::Estimation(
            "no auxiliary outcome model available for the first stage".into(),
        ));
    }

    let m = primary_indices.len();
    let mut design = DMatrix::<f64>::zeros(m, d);
    let mut target = DVector::<f64>::zeros(m);
    let mut mu_w_pred = Vec::with_capacity(m);
    let mut cols = Vec::with_capacity(d);
    for (r, &i) in primary_indices.iter().enumerate() {
        let x = sample.x_row(i);
        let muw = fit.predict_mu_w(x, fit.fold_assignment[i])?;
        mu_w_pred.push(muw);
        cols.clear();
        link.alpha_class.columns(x, &mut cols);
        for (c, &v) in cols.iter().enumerate() {
            design[(r, c)] = v * muw;
        }
        if !beta_known {
            cols.clear();
            link.beta_class.columns(x, &mut cols);
            for (c, &v) in cols.iter().enumerate() {
                design[(r, a_dim + c)] = v;
            }
        }
        let offset = if beta_known {
            link.beta_form.as_ref().expect("validated").eval(x)
        } else {
            0.0
        };
        target[r] = sample.v(i) - offset;
    }

    let gram = design.transpose() * &design;
    let rhs = design.transpose() * &target;
    let max_diag = (0..d).map(|j| gram[(j, j)]).fold(0.0f64, f64::max);
    let chol = Cholesky::new(gram.clone()).ok_or_else(|| {
        Error::Identification("collinear second-stage design".into())
    })?;
    let l = chol.l();
    for j in 0..d {
        if l[(j, j)] * l[(j, j)] <= 1e-12 * max_diag {
            return Err(Error::Identification(
                "second-stage design is numerically collinear".into(),
            ));
        }
    }
    let coef = chol.solve(&rhs);

    let fitted = &design * &coef;
    let mut mu_yb = Vec::with_capacity(m);
    for (r, &i) in primary_indices.iter().enumerate() {
        let x = sample.x_row(i);
        let offset = if beta_known {
            link.beta_form.as_ref().expect("validated").eval(x)
        } else {
            0.0
        };
        mu_yb.push(fitted[r] + offset);
    }

    let resid = &target - fitted;
    let dof = (m as f64 - d as f64).max(1.0);
    let sigma2 = resid.norm_squared() / dof;
    let gram_inv = gram.try_inverse().ok_or_else(|| {
        Error::Identification("collinear second-stage design".into())
    })?;
    let coef_std_errors: Vec<f64> =
        (0..d).map(|j| (sigma2 * gram_inv[(j, j)]).sqrt()).collect();

    let alpha_coefs: Vec<f64> = coef.iter().take(a_dim).copied().collect();
    let beta_coefs: Vec<f64> = if beta_known {
        Vec::new()
    } else {
        coef.iter().skip(a_dim).copied().collect()
    };
    let alpha_hat = link.alpha_class.to_fn(&alpha_coefs);
    let beta_hat = if beta_known {
        link.beta_form.clone().expect("validated")
    } else {
        link.beta_class.to_fn(&beta_coefs)
    };
    Ok(TwoStageFit {
        alpha_hat,
        beta_hat,
        alpha_coefs,
        beta_coefs,
        coef_std_errors,
        primary_indices,
        mu_yb,
    })
}

/// Fused ATE via the two-stage outcome regression: the primary-only score
/// with the surrogate-informed outcome mean substituted in.
pub fn estimate_theta_two_stage(
    sample: &Sample,
    fit: &NuisanceFit,
    link: &LinkSpec,
) -> Result<EstimateResult> {
    let two_stage = two_stage_outcome_fit(sample, fit, link)?;
    let n = sample.n();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut r_yb = vec![0.0; n];
    let mut r_t = vec![0.0; n];
    for (r, &i) in two_stage.primary_indices.iter().enumerate() {
        let rt = f64::from(sample.t(i)) - require_finite(fit.oof_mu_t[i], "propensity", i)?;
        let rv = sample.v(i) - two_stage.mu_yb[r];
        r_yb[i] = rv;
        r_t[i] = rt;
        num += rv * rt;
        den += rt * rt;
    }
    if den <= DENOM_FLOOR_PER_UNIT * n as f64 {
        return Err(Error::Estimation(format!(
            "degenerate two-stage score denominator {den:.3e}"
        )));
    }
    let estimate = num / den;
    let sy2 = fit.sigma_y_sq;
    let mut psi = vec![0.0; n];
    for &i in &two_stage.primary_indices {
        psi[i] = (r_yb[i] - estimate * r_t[i]) * r_t[i] / sy2;
    }
    let jacobian = den / (n as f64 * sy2);
    let std_error = (score_variance(&psi) / (jacobian * jacobian * n as f64)).sqrt();
    let mut diag = BTreeMap::new();
    diag.insert("denominator".into(), den);
    diag.insert("clip_count".into(), fit.clip_count as f64);
    for (j, c) in two_stage.alpha_coefs.iter().enumerate() {
        diag.insert(format!("alpha_hat_{j}"), *c);
    }
    for (j, c) in two_stage.beta_coefs.iter().enumerate() {
        diag.insert(format!("beta_hat_{j}"), *c);
    }
    Ok(finalize(MethodTag::ThetaB, estimate, std_error, sample, diag))
}

/// Attaches the fitted coefficients to a copy of the link spec.
pub fn link_with_fit(link: &LinkSpec, fit: &TwoStageFit) -> LinkSpec {
    let mut out = link.clone();
    out.fitted = Some(FittedLink { alpha: fit.alpha_coefs.clone(), beta: fit.beta_coefs.clone() });
    out
}
