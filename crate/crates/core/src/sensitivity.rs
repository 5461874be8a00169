//! Link-misspecification analysis: the analytic bias evaluator, alpha
//! sensitivity sweeps, and the threshold-midpoint scale crosswalk.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{DgpConfig, MonteCarloEstimate, Sample};
use crate::error::{Error, Result};
use crate::estimators::{estimate_theta_fused_known_alpha, EstimateResult, ALPHA_MIN};
use crate::link::{CovariateFn, LinkKnowledge, LinkSpec};
use crate::nuisance::NuisanceFit;
use crate::rng::{substream_rng, STREAM_BIAS};

/// Ordered severity-category score ranges of one clinical scale. The last
/// category may be open-ended (`high = None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityThresholds {
    pub category_ranges: Vec<(f64, Option<f64>)>,
    pub anchored_at_zero: bool,
}

impl SeverityThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.category_ranges.is_empty() {
            return Err(Error::Input("threshold set needs at least one category".into()));
        }
        let k = self.category_ranges.len();
        for (i, &(low, high)) in self.category_ranges.iter().enumerate() {
            match high {
                Some(h) => {
                    if low >= h {
                        return Err(Error::Input(format!(
                            "category {i} has low {low} >= high {h}"
                        )));
                    }
                }
                None => {
                    if i != k - 1 {
                        return Err(Error::Input(
                            "only the top category may be open-ended".into(),
                        ));
                    }
                }
            }
            if i > 0 {
                let prev_high = self.category_ranges[i - 1]
                    .1
                    .ok_or_else(|| Error::Input("only the top category may be open-ended".into()))?;
                if low < prev_high {
                    return Err(Error::Input(format!(
                        "category {i} overlaps its predecessor ({low} < {prev_high})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How an open-ended top category enters the midpoint fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TopCategoryPolicy {
    /// Drop the top pair whenever either scale is open-ended there.
    #[default]
    DropUnboundedPair,
    /// Close an open-ended top category at low + previous category width.
    ImputeWidth,
}

fn midpoints(scale: &SeverityThresholds, policy: TopCategoryPolicy) -> Result<Vec<Option<f64>>> {
    scale
        .category_ranges
        .iter()
        .enumerate()
        .map(|(i, &(low, high))| match high {
            Some(h) => Ok(Some(0.5 * (low + h))),
            None => match policy {
                TopCategoryPolicy::DropUnboundedPair => Ok(None),
                TopCategoryPolicy::ImputeWidth => {
                    if i == 0 {
                        return Err(Error::Input(
                            "cannot impute a width for a single open-ended category".into(),
                        ));
                    }
                    let (pl, ph) = scale.category_ranges[i - 1];
                    let width = ph.expect("validated") - pl;
                    Ok(Some(0.5 * (low + (low + width))))
                }
            },
        })
        .collect()
}

/// Linear crosswalk between two severity scales from matched category
/// midpoints: least squares of scale-a midpoints on scale-b midpoints,
/// through the origin when both scales are anchored at zero.
pub fn scale_link_from_thresholds(
    a: &SeverityThresholds,
    b: &SeverityThresholds,
    through_origin: bool,
) -> Result<(f64, f64)> {
    scale_link_with(a, b, through_origin, TopCategoryPolicy::default())
}

pub fn scale_link_with(
    a: &SeverityThresholds,
    b: &SeverityThresholds,
    through_origin: bool,
    policy: TopCategoryPolicy,
) -> Result<(f64, f64)> {
    a.validate()?;
    b.validate()?;
    if a.category_ranges.len() != b.category_ranges.len() {
        return Err(Error::Input(format!(
            "category counts differ: {} vs {}",
            a.category_ranges.len(),
            b.category_ranges.len()
        )));
    }
    if through_origin && !(a.anchored_at_zero && b.anchored_at_zero) {
        return Err(Error::Input(
            "a through-origin fit requires both scales anchored at zero".into(),
        ));
    }
    let ma = midpoints(a, policy)?;
    let mb = midpoints(b, policy)?;
    let pairs: Vec<(f64, f64)> = ma
        .iter()
        .zip(&mb)
        .filter_map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => Some((*x, *y)),
            _ => None,
        })
        .collect();
    let needed = if through_origin { 1 } else { 2 };
    if pairs.len() < needed {
        return Err(Error::Input(format!(
            "only {} usable midpoint pairs, need {needed}",
            pairs.len()
        )));
    }
    if through_origin {
        let sxy: f64 = pairs.iter().map(|(x, y)| x * y).sum();
        let syy: f64 = pairs.iter().map(|(_, y)| y * y).sum();
        if syy <= 0.0 {
            return Err(Error::Input("degenerate midpoints for a through-origin fit".into()));
        }
        Ok((sxy / syy, 0.0))
    } else {
        let n = pairs.len() as f64;
        let mx: f64 = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
        let my: f64 = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
        let sxy: f64 = pairs.iter().map(|(x, y)| (y - my) * (x - mx)).sum();
        let syy: f64 = pairs.iter().map(|(_, y)| (y - my) * (y - my)).sum();
        if syy <= 0.0 {
            return Err(Error::Input("degenerate midpoints: zero variance".into()));
        }
        let alpha = sxy / syy;
        Ok((alpha, mx - alpha * my))
    }
}

/// Which expectation the bias evaluator reports. The conditional form is the
/// headline analytic statement; the selection-weighted form multiplies it by
/// the auxiliary-study mass. Both are exposed so replication studies can
/// report which one their estimator tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasConvention {
    #[default]
    ConditionalOnAux,
    SelectionWeighted,
}

/// Covariate population for the bias evaluation.
pub enum BiasPopulation<'a> {
    Dgp { cfg: &'a DgpConfig, draws: usize, seed: u64 },
    Sample(&'a Sample),
}

/// Analytic misspecification bias of the fused estimator: the Monte Carlo
/// evaluation of E[((alpha_mis - alpha*) / alpha*) theta(X) | S = 1], or its
/// selection-weighted variant.
pub fn misspecification_bias(
    population: BiasPopulation<'_>,
    alpha_mis: &CovariateFn,
    alpha_star: &CovariateFn,
    theta_fn: &CovariateFn,
    convention: BiasConvention,
) -> Result<MonteCarloEstimate> {
    let mut weights: Vec<f64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut eval = |x: &[f64], w: f64| -> Result<()> {
        let astar = alpha_star.eval(x);
        if astar.abs() < ALPHA_MIN {
            return Err(Error::LinkDegeneracy(format!(
                "|alpha*(x)| = {:.3e} below {ALPHA_MIN} on the auxiliary support",
                astar.abs()
            )));
        }
        let g = (alpha_mis.eval(x) - astar) / astar * theta_fn.eval(x);
        weights.push(w);
        values.push(g);
        Ok(())
    };
    match population {
        BiasPopulation::Dgp { cfg, draws, seed } => {
            cfg.validate()?;
            if draws < 10_000 {
                return Err(Error::Precision(format!(
                    "bias evaluation needs at least 10^4 draws, got {draws}"
                )));
            }
            let mut rng = substream_rng(seed, STREAM_BIAS);
            let mut x = vec![0.0f64; cfg.p];
            for _ in 0..draws {
                for c in x.iter_mut() {
                    *c = rng.sample(StandardNormal);
                }
                eval(&x, cfg.selection_prob(&x))?;
            }
        }
        BiasPopulation::Sample(sample) => {
            for i in 0..sample.n() {
                if sample.s(i) == 1 {
                    eval(sample.x_row(i), 1.0)?;
                }
            }
            if values.is_empty() {
                return Err(Error::Input("sample has no auxiliary units".into()));
            }
        }
    }
    let n = values.len() as f64;
    let sum_w: f64 = weights.iter().sum();
    match convention {
        BiasConvention::ConditionalOnAux => {
            let value = values.iter().zip(&weights).map(|(g, w)| g * w).sum::<f64>() / sum_w;
            let mean_w = sum_w / n;
            let var: f64 = values
                .iter()
                .zip(&weights)
                .map(|(g, w)| {
                    let d = w * (g - value);
                    d * d
                })
                .sum::<f64>()
                / (n - 1.0).max(1.0);
            let std_error = (var / n).sqrt() / mean_w;
            Ok(MonteCarloEstimate { value, std_error, draws: values.len() })
        }
        BiasConvention::SelectionWeighted => {
            let scaled: Vec<f64> =
                values.iter().zip(&weights).map(|(g, w)| g * w).collect();
            let value = scaled.iter().sum::<f64>() / n;
            let var: f64 =
                scaled.iter().map(|v| (v - value) * (v - value)).sum::<f64>() / (n - 1.0).max(1.0);
            Ok(MonteCarloEstimate {
                value,
                std_error: (var / n).sqrt(),
                draws: values.len(),
            })
        }
    }
}

/// Re-runs the fused estimator along a grid of multiplicative alpha scalings
/// and returns the (scale, estimate) curve in grid order.
pub fn sensitivity_sweep(
    sample: &Sample,
    fit: &NuisanceFit,
    link_base: &LinkSpec,
    alpha_scale_grid: &[f64],
) -> Result<Vec<(f64, EstimateResult)>> {
    link_base.validate()?;
    if link_base.knowledge != LinkKnowledge::FullyKnown {
        return Err(Error::Input("the sensitivity sweep requires a fully known link".into()));
    }
    if alpha_scale_grid.is_empty() {
        return Err(Error::Input("empty sensitivity grid".into()));
    }
    if alpha_scale_grid.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::Input("sensitivity grid scales must be positive".into()));
    }
    alpha_scale_grid
        .par_iter()
        .map(|&k| {
            let mut link = link_base.clone();
            link.alpha_form = Some(link_base.alpha_form.as_ref().expect("validated").scaled(k));
            let res = estimate_theta_fused_known_alpha(sample, fit, &link)?;
            Ok((k, res))
        })
        .collect()
}
