//! Outcome-link specifications: how much is known about the scale `alpha(x)`
//! and shift `beta(x)` relating the primary and auxiliary outcome means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluable function of the covariates, closed under scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateFn {
    Constant { value: f64 },
    LinearX1 { intercept: f64, slope: f64 },
    /// Affine in all covariates; `coefs` may be shorter than the covariate
    /// vector, remaining coordinates get weight zero.
    Linear { intercept: f64, coefs: Vec<f64> },
    /// Piecewise-constant lookup over x1: `values[i]` applies on
    /// (breaks[i-1], breaks[i]], with the outer pieces open-ended.
    StepX1 { breaks: Vec<f64>, values: Vec<f64> },
}

impl CovariateFn {
    pub fn zero() -> Self {
        CovariateFn::Constant { value: 0.0 }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CovariateFn::Constant { value } => *value,
            CovariateFn::LinearX1 { intercept, slope } => intercept + slope * x[0],
            CovariateFn::Linear { intercept, coefs } => {
                intercept + coefs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
            CovariateFn::StepX1 { breaks, values } => {
                let pos = breaks.partition_point(|&b| b < x[0]);
                values[pos]
            }
        }
    }

    /// Pointwise scaling by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        match self {
            CovariateFn::Constant { value } => CovariateFn::Constant { value: k * value },
            CovariateFn::LinearX1 { intercept, slope } => {
                CovariateFn::LinearX1 { intercept: k * intercept, slope: k * slope }
            }
            CovariateFn::Linear { intercept, coefs } => CovariateFn::Linear {
                intercept: k * intercept,
                coefs: coefs.iter().map(|c| k * c).collect(),
            },
            CovariateFn::StepX1 { breaks, values } => CovariateFn::StepX1 {
                breaks: breaks.clone(),
                values: values.iter().map(|v| k * v).collect(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CovariateFn::StepX1 { breaks, values } => {
                if values.len() != breaks.len() + 1 {
                    return Err(Error::Input(format!(
                        "step function needs {} values for {} breaks, got {}",
                        breaks.len() + 1,
                        breaks.len(),
                        values.len()
                    )));
                }
                if breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Input("step breaks must be strictly increasing".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Degree of prior knowledge about the outcome link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKnowledge {
    /// Both alpha(x) and beta(x) known.
    FullyKnown,
    /// Only the shift beta(x) is known.
    BetaKnown,
    /// Neither is known.
    Unknown,
}

/// Function class searched when a link component must be estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FunctionClass {
    #[default]
    Constant,
    LinearX1,
    LinearAll,
}

impl FunctionClass {
    /// Number of coefficients for covariate dimension `p`.
    pub fn dim(self, p: usize) -> usize {
        match self {
            FunctionClass::Constant => 1,
            FunctionClass::LinearX1 => 2,
            FunctionClass::LinearAll => p + 1,
        }
    }

    /// Basis columns evaluated at `x` (intercept first).
    pub fn columns(self, x: &[f64], out: &mut Vec<f64>) {
        out.push(1.0);
        match self {
            FunctionClass::Constant => {}
            FunctionClass::LinearX1 => out.push(x[0]),
            FunctionClass::LinearAll => out.extend_from_slice(x),
        }
    }

    /// Packs fitted coefficients back into an evaluable form.
    pub fn to_fn(self, coefs: &[f64]) -> CovariateFn {
        match self {
            FunctionClass::Constant => CovariateFn::Constant { value: coefs[0] },
            FunctionClass::LinearX1 => {
                CovariateFn::LinearX1 { intercept: coefs[0], slope: coefs[1] }
            }
            FunctionClass::LinearAll => {
                CovariateFn::Linear { intercept: coefs[0], coefs: coefs[1..].to_vec() }
            }
        }
    }
}

/// Fitted link coefficients attached to a spec after two-stage estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLink {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Knowledge state of the outcome link together with the evaluable forms and
/// the classes used when components must be estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub knowledge: LinkKnowledge,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_form: Option<CovariateFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_form: Option<CovariateFn>,
    #[serde(default)]
    pub alpha_class: FunctionClass,
    #[serde(default)]
    pub beta_class: FunctionClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted: Option<FittedLink>,
}

impl LinkSpec {
    pub fn fully_known(alpha: CovariateFn, beta: CovariateFn) -> Self {
        LinkSpec {
            knowledge: LinkKnowledge::FullyKnown,
            alpha_form: Some(alpha),
            beta_form: Some(beta),
            alpha_class: FunctionClass::default(),
            beta_class: FunctionClass::default(),
            fitted: None,
        }
    }

    pub fn beta_known(beta: CovariateFn, alpha_class: FunctionClass) -> Self {
        LinkSpec {
            knowledge: LinkKnowledge::BetaKnown,
            alpha_form: None,
            beta_form: Some(beta),
            alpha_class,
            beta_class: FunctionClass::default(),
            fitted: None,
        }
    }

    pub fn unknown(alpha_class: FunctionClass, beta_class: FunctionClass) -> Self {
        LinkSpec {
            knowledge: LinkKnowledge::Unknown,
            alpha_form: None,
            beta_form: None,
            alpha_class,
            beta_class,
            fitted: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = &self.alpha_form {
            f.validate()?;
        }
        if let Some(f) = &self.beta_form {
            f.validate()?;
        }
        match self.knowledge {
            LinkKnowledge::FullyKnown => {
                if self.alpha_form.is_none() || self.beta_form.is_none() {
                    return Err(Error::Input(
                        "fully known link requires evaluable alpha and beta forms".into(),
                    ));
                }
            }
            LinkKnowledge::BetaKnown => {
                if self.beta_form.is_none() {
                    return Err(Error::Input(
                        "beta-known link requires an evaluable beta form".into(),
                    ));
                }
            }
            LinkKnowledge::Unknown => {}
        }
        Ok(())
    }
}
