//! Fused average-treatment-effect estimation when a primary study measures
//! the outcome of interest and an auxiliary study measures a related but
//! different outcome, never co-observed with the first.
//!
//! The crate provides:
//! - a synthetic fused-study generator with a ground-truth ATE oracle
//!   ([`dgp`]),
//! - cross-fitted nuisance regressions ([`nuisance`]),
//! - three residual-on-residual ATE estimators: primary-only, fused under a
//!   fully known outcome link, and the two-stage surrogate-informed variant
//!   ([`estimators`]),
//! - numeric efficient-score and variance-bound machinery ([`scores`]),
//! - link-misspecification bias analysis, sensitivity sweeps, and the
//!   severity-threshold scale crosswalk ([`sensitivity`]),
//! - a deterministic Monte Carlo experiment harness ([`experiments`]).
//!
//! Randomness is fully reproducible: see [`rng`] for the stream layout.

pub mod basis;
pub mod csv_io;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod link;
pub mod nuisance;
pub mod regression;
pub mod rng;
pub mod scores;
pub mod sensitivity;

pub use basis::Basis;
pub use dgp::{expit, generate_dataset, true_ate, DgpConfig, MonteCarloEstimate, Observation, Sample};
pub use error::{Error, Result};
pub use estimators::{
    estimate_theta_fused_known_alpha, estimate_theta_primary, estimate_theta_two_stage,
    two_stage_outcome_fit, EstimateResult, MethodTag, TwoStageFit, ALPHA_MIN,
};
pub use link::{CovariateFn, FunctionClass, LinkKnowledge, LinkSpec};
pub use nuisance::{cross_fit, cross_fit_with, residuals, CrossFitOptions, NuisanceFit, Residuals};
pub use scores::{
    bound_integrands, score_fused, score_joint, score_primary, variance_bound, BoundPopulation,
    BoundTarget, BoundValue, ScoreContext,
};
pub use sensitivity::{
    misspecification_bias, scale_link_from_thresholds, scale_link_with, sensitivity_sweep,
    BiasConvention, BiasPopulation, SeverityThresholds, TopCategoryPolicy,
};
