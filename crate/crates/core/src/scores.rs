//! Efficient score functions and semiparametric variance bounds, evaluated
//! numerically against oracle or fitted nuisances.
//!
//! The per-covariate-point inverse-variance integrands are
//!   e0(x) = p(S=0|x) mu_T(x,0)(1 - mu_T(x,0)) / sigma_Y^2
//!   e1(x) = p(S=1|x) mu_T(x,1)(1 - mu_T(x,1)) / (alpha^2(x) sigma_W^2)
//! and the scalar bounds aggregate as the inverse of the integrand mean over
//! the covariate law, which is exactly how the asymptotic variance of the
//! scalar score-equation estimator aggregates. The per-point values are also
//! exposed so the pointwise ordering can be checked without aggregation.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dgp::{DgpConfig, Observation, Sample};
use crate::error::{Error, Result};
use crate::estimators::ALPHA_MIN;
use crate::link::CovariateFn;
use crate::nuisance::NuisanceFit;
use crate::rng::{substream_rng, STREAM_BOUNDS};

/// Shared covariate-function handle used by score contexts.
pub type DynFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Everything needed to evaluate the scores at a parameter value: the scalar
/// effect, the link functions, the four conditional means, the selection
/// probability, and the noise variances.
#[derive(Clone)]
pub struct ScoreContext {
    pub theta: f64,
    pub alpha_fn: DynFn,
    pub beta_fn: DynFn,
    pub mu_y0: DynFn,
    pub mu_w1: DynFn,
    pub mu_t0: DynFn,
    pub mu_t1: DynFn,
    pub mu_s: DynFn,
    pub sigma_y_sq: f64,
    pub sigma_w_sq: f64,
}

impl ScoreContext {
    /// Oracle context: every nuisance evaluated from the generative model.
    pub fn oracle(cfg: &DgpConfig, theta: f64) -> Self {
        let c = cfg.clone();
        let alpha = c.clone();
        let y0 = c.clone();
        let w1 = c.clone();
        let t1 = c.clone();
        let s = c.clone();
        ScoreContext {
            theta,
            alpha_fn: Arc::new(move |x| alpha.link_alpha(x)),
            beta_fn: Arc::new(|_| 0.0),
            mu_y0: Arc::new(move |x| y0.outcome_mean(x, 0)),
            mu_w1: Arc::new(move |x| w1.outcome_mean(x, 1)),
            mu_t0: Arc::new(move |x| c.treatment_prob(x, 0)),
            mu_t1: Arc::new(move |x| t1.treatment_prob(x, 1)),
            mu_s: Arc::new(move |x| s.selection_prob(x)),
            sigma_y_sq: cfg.sigma_y * cfg.sigma_y,
            sigma_w_sq: cfg.sigma_w * cfg.sigma_w,
        }
    }

    /// Context backed by fitted nuisance models (fold-averaged predictions)
    /// and a supplied link.
    pub fn from_fit(fit: &NuisanceFit, theta: f64, alpha: CovariateFn, beta: CovariateFn) -> Self {
        let y0 = fit.mu_y0.clone();
        let w1 = fit.mu_w1.clone();
        let t0 = fit.mu_t0.clone();
        let t1 = fit.mu_t1.clone();
        let s_models = fit.mu_s.clone();
        let eps = fit.epsilon_clip;
        let mean_of = |models: &Vec<crate::regression::RegressionModel>, x: &[f64]| -> f64 {
            models.iter().map(|m| m.predict(x)).sum::<f64>() / models.len().max(1) as f64
        };
        let a = alpha.clone();
        let b = beta.clone();
        ScoreContext {
            theta,
            alpha_fn: Arc::new(move |x| a.eval(x)),
            beta_fn: Arc::new(move |x| b.eval(x)),
            mu_y0: Arc::new(move |x| {
                y0.iter().map(|m| m.predict(x)).sum::<f64>() / y0.len().max(1) as f64
            }),
            mu_w1: Arc::new(move |x| {
                w1.iter().map(|m| m.predict(x)).sum::<f64>() / w1.len().max(1) as f64
            }),
            mu_t0: Arc::new(move |x| match &t0 {
                crate::nuisance::PropensitySource::Known(p) => *p,
                crate::nuisance::PropensitySource::Fitted(models) => {
                    (models.iter().map(|m| m.predict(x)).sum::<f64>()
                        / models.len().max(1) as f64)
                        .clamp(eps, 1.0 - eps)
                }
            }),
            mu_t1: Arc::new(move |x| match &t1 {
                Some(models) => {
                    (models.iter().map(|m| m.predict(x)).sum::<f64>()
                        / models.len().max(1) as f64)
                        .clamp(eps, 1.0 - eps)
                }
                None => f64::NAN,
            }),
            mu_s: Arc::new(move |x| match &s_models {
                Some(models) => mean_of(models, x).clamp(eps, 1.0 - eps),
                None => f64::NAN,
            }),
            sigma_y_sq: fit.sigma_y_sq,
            sigma_w_sq: fit.sigma_w_sq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_y_sq > 0.0) || !(self.sigma_w_sq > 0.0) {
            return Err(Error::Input("score context requires positive noise variances".into()));
        }
        Ok(())
    }
}

/// Primary-study efficient score: (1 - s) Delta0.
pub fn score_primary(obs: &Observation, ctx: &ScoreContext) -> f64 {
    if obs.s == 1 {
        return 0.0;
    }
    let mt = (ctx.mu_t0)(&obs.x);
    let my = (ctx.mu_y0)(&obs.x);
    let rt = f64::from(obs.t) - mt;
    (obs.v - my - ctx.theta * rt) * rt / ctx.sigma_y_sq
}

fn delta1(obs: &Observation, ctx: &ScoreContext) -> Result<f64> {
    let a = (ctx.alpha_fn)(&obs.x);
    if a.abs() < ALPHA_MIN {
        return Err(Error::LinkDegeneracy(format!(
            "|alpha(x)| = {:.3e} below {ALPHA_MIN} in score evaluation",
            a.abs()
        )));
    }
    let mt = (ctx.mu_t1)(&obs.x);
    let mw = (ctx.mu_w1)(&obs.x);
    let rt = f64::from(obs.t) - mt;
    Ok((a * (obs.v - mw) - ctx.theta * rt) * rt / (a * a * ctx.sigma_w_sq))
}

/// Fused efficient score: s Delta1 + (1 - s) Delta0.
pub fn score_fused(obs: &Observation, ctx: &ScoreContext) -> Result<f64> {
    if obs.s == 0 {
        Ok(score_primary(obs, ctx))
    } else {
        delta1(obs, ctx)
    }
}

/// Joint efficient score for (theta, alpha) under a known shift: the fused
/// score plus the alpha-direction score, which is only supported on the
/// auxiliary study.
pub fn score_joint(obs: &Observation, ctx: &ScoreContext) -> Result<(f64, f64)> {
    let first = score_fused(obs, ctx)?;
    if obs.s == 0 {
        return Ok((first, 0.0));
    }
    let a = (ctx.alpha_fn)(&obs.x);
    if a.abs() < ALPHA_MIN {
        return Err(Error::LinkDegeneracy(format!(
            "|alpha(x)| = {:.3e} below {ALPHA_MIN} in joint score",
            a.abs()
        )));
    }
    let mt = (ctx.mu_t1)(&obs.x);
    let mw = (ctx.mu_w1)(&obs.x);
    let rt = f64::from(obs.t) - mt;
    let second =
        (ctx.theta * rt - a * (obs.v - mw)) / (a * a * ctx.sigma_w_sq) * (ctx.theta * rt / a);
    Ok((first, second))
}

/// Per-point inverse-variance integrands (e0, e1); see the module docs.
pub fn bound_integrands(ctx: &ScoreContext, x: &[f64]) -> Result<(f64, f64)> {
    let ps1 = (ctx.mu_s)(x);
    if !ps1.is_finite() {
        return Err(Error::Internal("score context lacks a selection model".into()));
    }
    let t0 = (ctx.mu_t0)(x);
    let v0 = t0 * (1.0 - t0);
    let e0 = (1.0 - ps1) * v0 / ctx.sigma_y_sq;
    let a = (ctx.alpha_fn)(x);
    if a.abs() < ALPHA_MIN {
        return Err(Error::LinkDegeneracy(format!(
            "|alpha(x)| = {:.3e} below {ALPHA_MIN} in bound integrand",
            a.abs()
        )));
    }
    let t1 = (ctx.mu_t1)(x);
    let v1 = t1 * (1.0 - t1);
    let e1 = ps1 * v1 / (a * a * ctx.sigma_w_sq);
    Ok((e0, e1))
}

/// Which asymptotic quantity to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundTarget {
    /// Primary-only bound.
    V0,
    /// Fused bound under a fully known link.
    Va,
    /// 2x2 joint (theta, alpha) covariance; its (1,1) entry is the fused
    /// bound when alpha must be estimated.
    SigmaB,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundValue {
    Scalar { value: f64, mc_std_error: f64 },
    Matrix { sigma: [[f64; 2]; 2] },
}

impl BoundValue {
    pub fn scalar(&self) -> f64 {
        match self {
            BoundValue::Scalar { value, .. } => *value,
            BoundValue::Matrix { sigma } => sigma[0][0],
        }
    }
}

/// Covariate population over which bounds are marginalized.
pub enum BoundPopulation<'a> {
    /// Fresh standard-normal draws of dimension `p`.
    McDraws { p: usize, draws: usize, seed: u64 },
    /// The covariate rows of an observed sample.
    Sample(&'a Sample),
}

fn inverse_2x2(m: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let scale = m[0][0].abs().max(m[1][1].abs()).max(1.0);
    if det.abs() < 1e-12 * scale * scale {
        return Err(Error::Numerical(format!(
            "joint information matrix is singular (det = {det:.3e})"
        )));
    }
    Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

/// Monte Carlo / empirical plug-in of the variance bounds.
pub fn variance_bound(
    ctx: &ScoreContext,
    population: BoundPopulation<'_>,
    which: BoundTarget,
) -> Result<BoundValue> {
    ctx.validate()?;
    let mut e0_sum = 0.0;
    let mut e0_sq = 0.0;
    let mut ea_sum = 0.0;
    let mut ea_sq = 0.0;
    let mut m = [[0.0f64; 2]; 2];
    let mut count = 0usize;
    let mut visit = |x: &[f64]| -> Result<()> {
        let (e0, e1) = bound_integrands(ctx, x)?;
        e0_sum += e0;
        e0_sq += e0 * e0;
        let ea = e0 + e1;
        ea_sum += ea;
        ea_sq += ea * ea;
        let c = ctx.theta / (ctx.alpha_fn)(x);
        m[0][0] += ea;
        m[0][1] += -c * e1;
        m[1][0] += -c * e1;
        m[1][1] += c * c * e1;
        count += 1;
        Ok(())
    };
    match population {
        BoundPopulation::McDraws { p, draws, seed } => {
            if draws < 10_000 {
                return Err(Error::Precision(format!(
                    "variance bounds need at least 10^4 draws, got {draws}"
                )));
            }
            let mut rng = substream_rng(seed, STREAM_BOUNDS);
            let mut x = vec![0.0f64; p.max(3)];
            for _ in 0..draws {
                for c in x.iter_mut() {
                    *c = rng.sample(StandardNormal);
                }
                visit(&x)?;
            }
        }
        BoundPopulation::Sample(sample) => {
            for i in 0..sample.n() {
                visit(sample.x_row(i))?;
            }
        }
    }
    let n = count as f64;
    let scalar = |sum: f64, sumsq: f64| -> BoundValue {
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        let se_mean = (var / n).sqrt();
        // Delta method for x -> 1/x.
        BoundValue::Scalar { value: 1.0 / mean, mc_std_error: se_mean / (mean * mean) }
    };
    match which {
        BoundTarget::V0 => Ok(scalar(e0_sum, e0_sq)),
        BoundTarget::Va => Ok(scalar(ea_sum, ea_sq)),
        BoundTarget::SigmaB => {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            Ok(BoundValue::Matrix { sigma: inverse_2x2(m)? })
        }
    }
}
