//! Synthetic fused-study data generation and the ground-truth ATE oracle.
//!
//! Two studies are simulated jointly: a primary study (`s = 0`) observing the
//! outcome of interest and an auxiliary study (`s = 1`) observing a related
//! but different outcome. Membership, treatment, and both outcome models are
//! driven by the first few covariate coordinates; any further coordinates are
//! pure noise dimensions used to stress nuisance estimation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream_rng, STREAM_GENERATE, STREAM_ORACLE};

/// Logistic sigmoid, stable over the full double range.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Generative parameters for one synthetic fused-study dataset.
///
/// `a0..a2` drive study membership, `zeta1` the auxiliary-arm assignment,
/// `gamma*` the treatment effect on the auxiliary outcome, `b0..b3` its
/// baseline, and `rho0`/`rho1` the covariate-dependent scale linking the two
/// outcome means (`alpha(x) = rho0 + rho1 * x1`). The baseline coefficients
/// are named `b*` to keep them apart from the link shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub p: usize,
    pub n: usize,
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub zeta1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub rho0: f64,
    pub rho1: f64,
    pub sigma_w: f64,
    pub sigma_y: f64,
}

impl DgpConfig {
    /// Benchmark configuration used throughout the test suites and as the
    /// documented default for experiments: moderate covariate-driven overlap,
    /// a homogeneous unit treatment effect, unit noise, ten covariates.
    pub fn default_benchmark() -> Self {
        DgpConfig {
            p: 10,
            n: 2000,
            a0: 0.0,
            a1: 0.5,
            a2: -0.5,
            zeta1: 0.5,
            gamma0: 1.0,
            gamma1: 0.0,
            gamma2: 0.0,
            b0: 0.5,
            b1: 1.0,
            b2: -1.0,
            b3: 0.5,
            rho0: 1.0,
            rho1: 0.0,
            sigma_w: 1.0,
            sigma_y: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 3 {
            return Err(Error::Config(format!(
                "covariate dimension p = {} must be at least 3",
                self.p
            )));
        }
        if self.n < 1 {
            return Err(Error::Config("sample size n must be at least 1".into()));
        }
        if !(self.sigma_w > 0.0) || !(self.sigma_y > 0.0) {
            return Err(Error::Config(format!(
                "noise scales must be positive (sigma_w = {}, sigma_y = {})",
                self.sigma_w, self.sigma_y
            )));
        }
        let fields = [
            self.a0, self.a1, self.a2, self.zeta1, self.gamma0, self.gamma1, self.gamma2,
            self.b0, self.b1, self.b2, self.b3, self.rho0, self.rho1, self.sigma_w, self.sigma_y,
        ];
        if fields.iter().any(|f| !f.is_finite()) {
            return Err(Error::Config("all coefficients must be finite".into()));
        }
        Ok(())
    }

    /// P(S = 1 | X = x).
    pub fn selection_prob(&self, x: &[f64]) -> f64 {
        expit(self.a0 + self.a1 * x[0] + self.a2 * x[1])
    }

    /// P(T = 1 | X = x, S = s).
    pub fn treatment_prob(&self, x: &[f64], s: u8) -> f64 {
        if s == 1 {
            expit(self.zeta1 * x[0])
        } else {
            0.5
        }
    }

    /// Treatment-effect component of the auxiliary outcome mean.
    pub fn w_effect(&self, x: &[f64]) -> f64 {
        self.gamma0 + self.gamma1 * x[0] + self.gamma2 * x[1]
    }

    /// Baseline component of the auxiliary outcome mean.
    pub fn w_baseline(&self, x: &[f64]) -> f64 {
        self.b0 + self.b1 * x[0] + self.b2 * x[1] + self.b3 * x[2]
    }

    /// Noiseless auxiliary outcome mean under a realized arm.
    pub fn w_mean_at(&self, x: &[f64], t: u8) -> f64 {
        self.w_effect(x) * f64::from(t) + self.w_baseline(x)
    }

    /// E[V | X = x, S = s]: arm-marginal observed-outcome mean per stratum.
    pub fn outcome_mean(&self, x: &[f64], s: u8) -> f64 {
        let mix = self.w_effect(x) * self.treatment_prob(x, s) + self.w_baseline(x);
        if s == 1 {
            mix
        } else {
            self.link_alpha(x) * mix
        }
    }

    /// Outcome link scale alpha(x) = rho0 + rho1 * x1.
    pub fn link_alpha(&self, x: &[f64]) -> f64 {
        self.rho0 + self.rho1 * x[0]
    }

    /// Conditional treatment effect on the primary outcome.
    pub fn theta_fn(&self, x: &[f64]) -> f64 {
        self.link_alpha(x) * self.w_effect(x)
    }
}

/// One unit's record.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub s: u8,
    pub t: u8,
    pub v: f64,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if self.s > 1 || self.t > 1 {
            return Err(Error::Input(format!(
                "study and treatment indicators must be 0/1 (s = {}, t = {})",
                self.s, self.t
            )));
        }
        if !self.v.is_finite() {
            return Err(Error::Input(format!("outcome must be finite, got {}", self.v)));
        }
        if self.x.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input("covariates must be finite".into()));
        }
        Ok(())
    }
}

/// Column-oriented collection of observations with a fixed covariate
/// dimension. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    p: usize,
    xs: Vec<f64>, // row-major, n * p
    s: Vec<u8>,
    t: Vec<u8>,
    v: Vec<f64>,
}

impl Sample {
    pub fn from_observations(obs: Vec<Observation>) -> Result<Sample> {
        if obs.is_empty() {
            return Err(Error::Input("sample must contain at least one observation".into()));
        }
        let p = obs[0].x.len();
        let mut sample = Sample {
            p,
            xs: Vec::with_capacity(obs.len() * p),
            s: Vec::with_capacity(obs.len()),
            t: Vec::with_capacity(obs.len()),
            v: Vec::with_capacity(obs.len()),
        };
        for (i, o) in obs.iter().enumerate() {
            o.validate()?;
            if o.x.len() != p {
                return Err(Error::Input(format!(
                    "observation {} has dimension {}, expected {}",
                    i,
                    o.x.len(),
                    p
                )));
            }
            sample.xs.extend_from_slice(&o.x);
            sample.s.push(o.s);
            sample.t.push(o.t);
            sample.v.push(o.v);
        }
        Ok(sample)
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of primary-study units (s = 0).
    pub fn n0(&self) -> usize {
        self.s.iter().filter(|&&s| s == 0).count()
    }

    /// Number of auxiliary-study units (s = 1).
    pub fn n1(&self) -> usize {
        self.s.iter().filter(|&&s| s == 1).count()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.p..(i + 1) * self.p]
    }

    pub fn s(&self, i: usize) -> u8 {
        self.s[i]
    }

    pub fn t(&self, i: usize) -> u8 {
        self.t[i]
    }

    pub fn v(&self, i: usize) -> f64 {
        self.v[i]
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            x: self.x_row(i).to_vec(),
            s: self.s[i],
            t: self.t[i],
            v: self.v[i],
        }
    }

    /// Unit indices belonging to stratum `s`.
    pub fn stratum_indices(&self, s: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.s[i] == s).collect()
    }

    /// Counts per (stratum, arm) cell: `counts[s][t]`.
    pub fn arm_counts(&self) -> [[usize; 2]; 2] {
        let mut c = [[0usize; 2]; 2];
        for i in 0..self.n() {
            c[self.s[i] as usize][self.t[i] as usize] += 1;
        }
        c
    }
}

/// Result of a Monte Carlo evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub value: f64,
    pub std_error: f64,
    pub draws: usize,
}

pub(crate) fn generate_with_stream(cfg: &DgpConfig, seed: u64, stream: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = substream_rng(seed, stream);
    let n = cfg.n;
    let p = cfg.p;
    let mut sample = Sample {
        p,
        xs: Vec::with_capacity(n * p),
        s: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
    };
    let mut x = vec![0.0f64; p];
    // Fixed per-unit draw order: p normals, selection uniform, treatment
    // uniform, one outcome normal. Changing this order breaks golden files.
    for _ in 0..n {
        for c in x.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        let s = u8::from(rng.random::<f64>() < cfg.selection_prob(&x));
        let t = u8::from(rng.random::<f64>() < cfg.treatment_prob(&x, s));
        let z: f64 = rng.sample(StandardNormal);
        let w_mean = cfg.w_mean_at(&x, t);
        let v = if s == 1 {
            w_mean + cfg.sigma_w * z
        } else {
            cfg.link_alpha(&x) * w_mean + cfg.sigma_y * z
        };
        sample.xs.extend_from_slice(&x);
        sample.s.push(s);
        sample.t.push(t);
        sample.v.push(v);
    }
    Ok(sample)
}

/// Draws a synthetic fused-study sample. Deterministic given `(cfg, seed)`.
pub fn generate_dataset(cfg: &DgpConfig, seed: u64) -> Result<Sample> {
    generate_with_stream(cfg, seed, STREAM_GENERATE)
}

/// Monte Carlo estimate of the primary-population ATE,
/// E[theta(X) | S = 0], computed by selection-weighted averaging of the
/// conditional effect over fresh covariate draws.
pub fn true_ate(cfg: &DgpConfig, mc_draws: usize, seed: u64) -> Result<MonteCarloEstimate> {
    cfg.validate()?;
    if mc_draws < 10_000 {
        return Err(Error::Precision(format!(
            "true_ate needs at least 10^4 draws, got {mc_draws}"
        )));
    }
    let mut rng = substream_rng(seed, STREAM_ORACLE);
    // Only the first two coordinates enter theta and the selection model.
    let mut sum_w = 0.0;
    let mut sum_wt = 0.0;
    let mut thetas = Vec::with_capacity(mc_draws);
    let mut weights = Vec::with_capacity(mc_draws);
    for _ in 0..mc_draws {
        let x = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal), 0.0];
        let theta = cfg.theta_fn(&x);
        let w = 1.0 - cfg.selection_prob(&x);
        sum_w += w;
        sum_wt += w * theta;
        thetas.push(theta);
        weights.push(w);
    }
    let value = sum_wt / sum_w;
    // Delta-method standard error for the ratio of means.
    let mean_w = sum_w / mc_draws as f64;
    let mut var_acc = 0.0;
    for (&th, &w) in thetas.iter().zip(&weights) {
        let g = w * (th - value);
        var_acc += g * g;
    }
    let var_g = var_acc / (mc_draws as f64 - 1.0);
    let std_error = (var_g / mc_draws as f64).sqrt() / mean_w;
    Ok(MonteCarloEstimate { value, std_error, draws: mc_draws })
}
