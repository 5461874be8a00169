//! Nuisance regressions: conditional outcome means per stratum, treatment
//! propensities per stratum, the study-selection model, and the residual
//! noise variances, all optionally K-fold cross-fit.
//!
//! With K >= 2 each unit's stored predictions come from models that never saw
//! the unit's fold. K = 1 fits once on everything and predicts in sample.

use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::dgp::Sample;
use crate::error::{Error, Result};
use crate::regression::{
    fit_regression, gather_rows, FeatureMatrix, RegressionKind, RegressionModel,
};
use crate::rng::{mix_seed, substream_rng};

/// Default clip for estimated propensities and selection probabilities.
pub const DEFAULT_EPSILON_CLIP: f64 = 0.01;

/// Which models a [`cross_fit_with`] call should fit. Skipping models that a
/// downstream estimator never reads keeps large replication studies cheap;
/// predictions for skipped models are stored as NaN and any use of them is an
/// internal consistency error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSelection {
    pub outcome_means: bool,
    pub aux_propensity: bool,
    pub selection: bool,
}

impl Default for ModelSelection {
    fn default() -> Self {
        ModelSelection { outcome_means: true, aux_propensity: true, selection: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitOptions {
    pub basis: Basis,
    /// `None` applies the default conditioning ridge, `Some(0.0)` is exact.
    pub ridge_lambda: Option<f64>,
    pub epsilon_clip: f64,
    /// Known primary-study randomization probability; when set, the primary
    /// propensity is this constant instead of a fitted model.
    pub known_primary_propensity: Option<f64>,
    /// Shuffle fold membership with this seed; `None` assigns folds
    /// round-robin in unit order within each stratum x arm cell.
    pub fold_seed: Option<u64>,
    pub models: ModelSelection,
}

impl Default for CrossFitOptions {
    fn default() -> Self {
        CrossFitOptions {
            basis: Basis::Raw,
            ridge_lambda: None,
            epsilon_clip: DEFAULT_EPSILON_CLIP,
            known_primary_propensity: None,
            fold_seed: None,
            models: ModelSelection::default(),
        }
    }
}

/// The primary propensity either comes from a known randomization ratio or
/// from per-fold logistic fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensitySource {
    Known(f64),
    Fitted(Vec<RegressionModel>),
}

/// Cross-fitted nuisance models and their held-out predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub folds: usize,
    pub basis: Basis,
    pub epsilon_clip: f64,
    pub fold_assignment: Vec<u32>,
    /// Per-fold outcome-mean models on primary units (V ~ X | S = 0).
    pub mu_y0: Vec<RegressionModel>,
    /// Per-fold outcome-mean models on auxiliary units (V ~ X | S = 1).
    pub mu_w1: Vec<RegressionModel>,
    pub mu_t0: PropensitySource,
    pub mu_t1: Option<Vec<RegressionModel>>,
    pub mu_s: Option<Vec<RegressionModel>>,
    /// Out-of-fold E[V | X, S] predictions, one per unit (NaN if skipped).
    pub oof_mu_v: Vec<f64>,
    /// Out-of-fold propensities, clipped into [eps, 1 - eps].
    pub oof_mu_t: Vec<f64>,
    /// Out-of-fold selection probabilities, clipped (empty if skipped).
    pub oof_mu_s: Vec<f64>,
    pub sigma_y_sq: f64,
    pub sigma_w_sq: f64,
    /// Number of propensity/selection predictions that hit the clip.
    pub clip_count: usize,
}

/// Per-unit residuals of outcome and treatment against their stratum means.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub r_v: Vec<f64>,
    pub r_t: Vec<f64>,
}

/// Cross-fits all nuisance models. See [`cross_fit_with`] for knobs beyond
/// the basis, ridge, and clip.
pub fn cross_fit(
    sample: &Sample,
    folds: usize,
    basis: Basis,
    ridge_lambda: Option<f64>,
    epsilon_clip: f64,
) -> Result<NuisanceFit> {
    cross_fit_with(
        sample,
        folds,
        &CrossFitOptions { basis, ridge_lambda, epsilon_clip, ..CrossFitOptions::default() },
    )
}

fn assign_folds(sample: &Sample, folds: usize, fold_seed: Option<u64>) -> Result<Vec<u32>> {
    let n = sample.n();
    let mut assignment = vec![0u32; n];
    if folds == 1 {
        return Ok(assignment);
    }
    for s in 0..2u8 {
        for t in 0..2u8 {
            let mut cell: Vec<usize> = (0..n)
                .filter(|&i| sample.s(i) == s && sample.t(i) == t)
                .collect();
            if let Some(seed) = fold_seed {
                let mut rng = substream_rng(mix_seed(seed, u64::from(s) * 2 + u64::from(t)), 0);
                // Fisher-Yates
                for i in (1..cell.len()).rev() {
                    let j = (rand::Rng::random::<u64>(&mut rng) % (i as u64 + 1)) as usize;
                    cell.swap(i, j);
                }
            }
            if !cell.is_empty() && cell.len() < folds {
                return Err(Error::Stratification(format!(
                    "stratum s={s}, arm t={t} has {} units, fewer than {folds} folds",
                    cell.len()
                )));
            }
            for (k, &i) in cell.iter().enumerate() {
                assignment[i] = (k % folds) as u32;
            }
        }
    }
    Ok(assignment)
}

struct StratumLayout {
    idx: Vec<usize>,
    xs: Vec<f64>,
    v: Vec<f64>,
    t: Vec<f64>,
}

fn stratum_layout(sample: &Sample, s: u8) -> StratumLayout {
    let idx = sample.stratum_indices(s);
    let p = sample.p();
    let mut xs = Vec::with_capacity(idx.len() * p);
    let mut v = Vec::with_capacity(idx.len());
    let mut t = Vec::with_capacity(idx.len());
    for &i in &idx {
        xs.extend_from_slice(sample.x_row(i));
        v.push(sample.v(i));
        t.push(f64::from(sample.t(i)));
    }
    StratumLayout { idx, xs, v, t }
}

/// Fits one model per fold on the complement rows of `layout` and writes
/// out-of-fold predictions into `out` at the original unit indices.
fn fit_per_fold(
    layout: &StratumLayout,
    targets: &[f64],
    fold_of: &[u32],
    folds: usize,
    p: usize,
    kind: RegressionKind,
    basis: Basis,
    ridge: Option<f64>,
    out: &mut [f64],
) -> Result<Vec<RegressionModel>> {
    let mut models = Vec::with_capacity(folds);
    for k in 0..folds {
        let train: Vec<usize> = (0..layout.idx.len())
            .filter(|&j| folds == 1 || fold_of[layout.idx[j]] != k as u32)
            .collect();
        if train.is_empty() {
            return Err(Error::Stratification(format!(
                "no training rows left for fold {k}"
            )));
        }
        let xs = gather_rows(&layout.xs, p, &train);
        let ys: Vec<f64> = train.iter().map(|&j| targets[j]).collect();
        let fm = FeatureMatrix::new(&xs, train.len(), p)?;
        let model = fit_regression(fm, &ys, kind, basis, ridge)?;
        for (j, &i) in layout.idx.iter().enumerate() {
            if folds == 1 || fold_of[i] == k as u32 {
                out[i] = model.predict(&layout.xs[j * p..(j + 1) * p]);
            }
        }
        models.push(model);
    }
    Ok(models)
}

/// Degrees-of-freedom-corrected mean squared residual of r_v - theta r_t.
/// The pilot slope is the stratum residual-on-residual ratio. The divisor
/// caps the parameter count at half the stratum size so over-parameterized
/// ridge fits still produce a usable scale.
fn residual_variance(r_v: &[f64], r_t: &[f64], model_dim: usize) -> Result<f64> {
    let m = r_v.len();
    let den: f64 = r_t.iter().map(|r| r * r).sum();
    if den <= 0.0 {
        return Err(Error::Estimation(
            "treatment residuals vanish; pilot effect is undefined".into(),
        ));
    }
    let num: f64 = r_v.iter().zip(r_t).map(|(a, b)| a * b).sum();
    let pilot = num / den;
    let ssr: f64 = r_v
        .iter()
        .zip(r_t)
        .map(|(a, b)| {
            let r = a - pilot * b;
            r * r
        })
        .sum();
    let dof = (m as f64 - ((model_dim + 2).min(m / 2) as f64)).max(1.0);
    Ok((ssr / dof).max(1e-300))
}

/// Cross-fits the nuisance models with full control over the options.
pub fn cross_fit_with(
    sample: &Sample,
    folds: usize,
    opts: &CrossFitOptions,
) -> Result<NuisanceFit> {
    let n = sample.n();
    let n0 = sample.n0();
    let n1 = sample.n1();
    if folds == 0 {
        return Err(Error::Input("fold count must be at least 1".into()));
    }
    if folds > 1 && (folds > n0.max(1) || (n1 > 0 && folds > n1)) {
        return Err(Error::Input(format!(
            "{folds} folds exceed the available units (n0 = {n0}, n1 = {n1})"
        )));
    }
    if !(opts.epsilon_clip > 0.0 && opts.epsilon_clip < 0.5) {
        return Err(Error::Input(format!(
            "epsilon_clip must lie in (0, 0.5), got {}",
            opts.epsilon_clip
        )));
    }
    let p = sample.p();
    let fold_assignment = assign_folds(sample, folds, opts.fold_seed)?;

    let mut oof_mu_v = vec![f64::NAN; n];
    let mut oof_mu_t = vec![f64::NAN; n];
    let mut oof_mu_s = Vec::new();
    let mut clip_count = 0usize;

    let primary = stratum_layout(sample, 0);
    let aux = stratum_layout(sample, 1);

    let mut mu_y0 = Vec::new();
    let mut mu_w1 = Vec::new();
    if opts.models.outcome_means {
        if primary.idx.is_empty() {
            return Err(Error::Stratification("no primary units (s = 0)".into()));
        }
        mu_y0 = fit_per_fold(
            &primary,
            &primary.v,
            &fold_assignment,
            folds,
            p,
            RegressionKind::LinearLeastSquares,
            opts.basis,
            opts.ridge_lambda,
            &mut oof_mu_v,
        )?;
        if !aux.idx.is_empty() {
            mu_w1 = fit_per_fold(
                &aux,
                &aux.v,
                &fold_assignment,
                folds,
                p,
                RegressionKind::LinearLeastSquares,
                opts.basis,
                opts.ridge_lambda,
                &mut oof_mu_v,
            )?;
        }
    }

    let mu_t0 = if let Some(pi) = opts.known_primary_propensity {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::Input(format!(
                "known primary propensity must lie in (0, 1), got {pi}"
            )));
        }
        for &i in &primary.idx {
            oof_mu_t[i] = pi;
        }
        PropensitySource::Known(pi)
    } else {
        let models = fit_per_fold(
            &primary,
            &primary.t,
            &fold_assignment,
            folds,
            p,
            RegressionKind::Logistic,
            opts.basis,
            opts.ridge_lambda,
            &mut oof_mu_t,
        )?;
        PropensitySource::Fitted(models)
    };

    let mu_t1 = if opts.models.aux_propensity && !aux.idx.is_empty() {
        Some(fit_per_fold(
            &aux,
            &aux.t,
            &fold_assignment,
            folds,
            p,
            RegressionKind::Logistic,
            opts.basis,
            opts.ridge_lambda,
            &mut oof_mu_t,
        )?)
    } else {
        None
    };

    // Clip propensities into [eps, 1 - eps].
    let lo = opts.epsilon_clip;
    let hi = 1.0 - opts.epsilon_clip;
    for m in oof_mu_t.iter_mut() {
        if m.is_finite() && (*m < lo || *m > hi) {
            *m = m.clamp(lo, hi);
            clip_count += 1;
        }
    }

    let mu_s = if opts.models.selection && n1 > 0 && n0 > 0 {
        let all = StratumLayout {
            idx: (0..n).collect(),
            xs: (0..n).flat_map(|i| sample.x_row(i).to_vec()).collect(),
            v: Vec::new(),
            t: Vec::new(),
        };
        let s_targets: Vec<f64> = (0..n).map(|i| f64::from(sample.s(i))).collect();
        oof_mu_s = vec![f64::NAN; n];
        let models = fit_per_fold(
            &all,
            &s_targets,
            &fold_assignment,
            folds,
            p,
            RegressionKind::Logistic,
            opts.basis,
            opts.ridge_lambda,
            &mut oof_mu_s,
        )?;
        for m in oof_mu_s.iter_mut() {
            if *m < lo || *m > hi {
                *m = m.clamp(lo, hi);
                clip_count += 1;
            }
        }
        Some(models)
    } else {
        None
    };

    let (sigma_y_sq, sigma_w_sq) = if opts.models.outcome_means {
        let model_dim = opts.basis.dim(p) + 1;
        let rv0: Vec<f64> = primary.idx.iter().map(|&i| sample.v(i) - oof_mu_v[i]).collect();
        let rt0: Vec<f64> = primary.idx.iter().map(|&i| f64::from(sample.t(i)) - oof_mu_t[i]).collect();
        let sy = residual_variance(&rv0, &rt0, model_dim)?;
        let sw = if aux.idx.is_empty() {
            1.0
        } else if mu_t1.is_some() {
            let rv1: Vec<f64> = aux.idx.iter().map(|&i| sample.v(i) - oof_mu_v[i]).collect();
            let rt1: Vec<f64> =
                aux.idx.iter().map(|&i| f64::from(sample.t(i)) - oof_mu_t[i]).collect();
            residual_variance(&rv1, &rt1, model_dim)?
        } else {
            1.0
        };
        (sy, sw)
    } else {
        (1.0, 1.0)
    };

    Ok(NuisanceFit {
        folds,
        basis: opts.basis,
        epsilon_clip: opts.epsilon_clip,
        fold_assignment,
        mu_y0,
        mu_w1,
        mu_t0,
        mu_t1,
        mu_s,
        oof_mu_v,
        oof_mu_t,
        oof_mu_s,
        sigma_y_sq,
        sigma_w_sq,
        clip_count,
    })
}

impl NuisanceFit {
    /// Predicts the auxiliary outcome mean at `x` using the fold-`k`
    /// auxiliary model (which never saw fold `k` of either study).
    pub fn predict_mu_w(&self, x: &[f64], fold: u32) -> Result<f64> {
        let model = self
            .mu_w1
            .get(fold as usize)
            .ok_or_else(|| Error::Internal(format!("no auxiliary outcome model for fold {fold}")))?;
        Ok(model.predict(x))
    }

    /// Fold-averaged prediction of the primary outcome mean at a new point.
    pub fn predict_mu_y0_mean(&self, x: &[f64]) -> Result<f64> {
        if self.mu_y0.is_empty() {
            return Err(Error::Internal("no primary outcome models fitted".into()));
        }
        Ok(self.mu_y0.iter().map(|m| m.predict(x)).sum::<f64>() / self.mu_y0.len() as f64)
    }

    /// Fold-averaged prediction of the auxiliary outcome mean at a new point.
    pub fn predict_mu_w_mean(&self, x: &[f64]) -> Result<f64> {
        if self.mu_w1.is_empty() {
            return Err(Error::Internal("no auxiliary outcome models fitted".into()));
        }
        Ok(self.mu_w1.iter().map(|m| m.predict(x)).sum::<f64>() / self.mu_w1.len() as f64)
    }
}

/// Held-out residuals r_V = V - mu_V(X, S) and r_T = T - mu_T(X, S).
pub fn residuals(sample: &Sample, fit: &NuisanceFit) -> Result<Residuals> {
    let n = sample.n();
    if fit.fold_assignment.len() != n || fit.oof_mu_v.len() != n || fit.oof_mu_t.len() != n {
        return Err(Error::Internal(
            "nuisance fit does not cover the sample".into(),
        ));
    }
    let mut r_v = Vec::with_capacity(n);
    let mut r_t = Vec::with_capacity(n);
    for i in 0..n {
        let mv = fit.oof_mu_v[i];
        let mt = fit.oof_mu_t[i];
        if !mv.is_finite() || !mt.is_finite() {
            return Err(Error::Internal(format!(
                "missing nuisance prediction for unit {i}"
            )));
        }
        r_v.push(sample.v(i) - mv);
        r_t.push(f64::from(sample.t(i)) - mt);
    }
    Ok(Residuals { r_v, r_t })
}
