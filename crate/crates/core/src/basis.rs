//! Feature expansions for nuisance regressions.

use serde::{Deserialize, Serialize};

/// Regression basis over the raw covariates. The intercept column is always
/// added by the fitting routine and is not part of the expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// The covariates themselves.
    #[default]
    Raw,
    /// Covariates, their squares, and all pairwise interactions.
    Quadratic,
}

impl Basis {
    /// Expanded dimension (excluding the intercept).
    pub fn dim(self, p: usize) -> usize {
        match self {
            Basis::Raw => p,
            Basis::Quadratic => 2 * p + p * (p - 1) / 2,
        }
    }

    /// Appends the expansion of `x` to `out`.
    pub fn expand_into(self, x: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(x);
        if self == Basis::Quadratic {
            for &c in x {
                out.push(c * c);
            }
            for i in 0..x.len() {
                for j in (i + 1)..x.len() {
                    out.push(x[i] * x[j]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_dimension_and_layout() {
        assert_eq!(Basis::Raw.dim(4), 4);
        assert_eq!(Basis::Quadratic.dim(4), 4 + 4 + 6);
        let mut out = Vec::new();
        Basis::Quadratic.expand_into(&[1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 1.0, 4.0, 9.0, 2.0, 3.0, 6.0]);
    }
}
