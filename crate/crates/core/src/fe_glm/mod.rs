//! Poisson pseudo-maximum-likelihood with up to two absorbed fixed-effect
//! dimensions and cluster-robust covariance.

mod covariance;
mod demean;
mod poisson;
mod spec;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use covariance::{repair_psd, two_way_clustered_covariance, ClusteredCovariance};
pub use demean::{DemeanOptions, DemeanStats, Demeaner, FeState};
pub use poisson::{
    fit_poisson_fe, fit_poisson_fe_detailed, fit_poisson_two_way_fe, poisson_deviance, poisson_log_likelihood,
    FitInternals, FitOptions,
};
pub use spec::{Covariate, FixedEffect, ModelSpec, Transform};

/// Name given to the constant column added when no fixed effects are absorbed.
pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error("row {row}: {message}")]
    Data { row: usize, message: String },
    #[error("no observations left after removing all-zero fixed-effect levels")]
    EmptySample,
    #[error("covariate {column:?} is collinear with the fixed effects or other covariates")]
    Collinear { column: String },
    #[error("IRLS did not converge after {iterations} iterations (last deviance {deviance})")]
    NotConverged { iterations: usize, deviance: f64 },
    #[error("cluster dimension {0:?} has a single cluster")]
    SingleCluster(String),
    #[error("null model log-likelihood is degenerate")]
    DegenerateNull,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, FitError>;

/// A categorical variable coded `0..n_levels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub codes: Vec<u32>,
    pub labels: Vec<String>,
}

impl Factor {
    /// Codes follow the sorted order of the distinct labels.
    pub fn from_labels<'a, I>(name: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let raw: Vec<&str> = labels.into_iter().collect();
        let mut ids: BTreeMap<&str, u32> = raw.iter().map(|l| (*l, 0)).collect();
        for (i, v) in ids.values_mut().enumerate() {
            *v = i as u32;
        }
        Factor {
            name: name.into(),
            codes: raw.iter().map(|l| ids[l]).collect(),
            labels: ids.keys().map(|l| l.to_string()).collect(),
        }
    }

    pub fn n_levels(&self) -> usize {
        self.labels.len()
    }

    /// Restricts to `rows` and drops levels that no longer occur.
    pub fn subset(&self, rows: &[usize]) -> Factor {
        let mut remap = vec![u32::MAX; self.n_levels()];
        let mut labels = Vec::new();
        let mut present = vec![false; self.n_levels()];
        for &r in rows {
            present[self.codes[r] as usize] = true;
        }
        for (lvl, p) in present.iter().enumerate() {
            if *p {
                remap[lvl] = labels.len() as u32;
                labels.push(self.labels[lvl].clone());
            }
        }
        Factor {
            name: self.name.clone(),
            codes: rows.iter().map(|&r| remap[self.codes[r] as usize]).collect(),
            labels,
        }
    }
}

/// Numeric estimation input: outcome, regressors in columns, fixed effects
/// to absorb and cluster dimensions for the covariance.
#[derive(Debug, Clone)]
pub struct Design {
    pub outcome: String,
    pub y: Vec<f64>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub fixed_effects: Vec<Factor>,
    pub clusters: Vec<Factor>,
}

impl Design {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.fixed_effects.len() > 2 {
            return Err(FitError::Spec("at most two fixed-effect dimensions".into()));
        }
        if self.clusters.len() > 2 {
            return Err(FitError::Spec("at most two cluster dimensions".into()));
        }
        if self.names.len() != self.columns.len() {
            return Err(FitError::Spec("column names and columns differ in length".into()));
        }
        for (name, c) in self.names.iter().zip(&self.columns) {
            if c.len() != n {
                return Err(FitError::Spec(format!(
                    "column {name:?} has {} rows, expected {n}",
                    c.len()
                )));
            }
            if let Some(row) = c.iter().position(|v| !v.is_finite()) {
                return Err(FitError::Data {
                    row,
                    message: format!("{name} is not finite"),
                });
            }
        }
        for f in self.fixed_effects.iter().chain(&self.clusters) {
            if f.codes.len() != n {
                return Err(FitError::Spec(format!("factor {:?} has wrong length", f.name)));
            }
        }
        if let Some(row) = self.y.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(FitError::Data {
                row,
                message: format!("outcome {} must be finite and non-negative", self.y[row]),
            });
        }
        Ok(())
    }
}

/// Estimated fixed effects for one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectValues {
    pub dimension: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub step_halvings: usize,
    pub max_demean_sweeps: usize,
    /// Negative eigenvalues zeroed in the covariance.
    pub covariance_repaired: usize,
    pub cluster_counts: Vec<usize>,
    /// Rows removed because a fixed-effect level had an all-zero outcome.
    pub dropped_rows: usize,
    pub dropped_levels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub outcome: String,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub fixed_effects: Vec<FixedEffectValues>,
    pub n_obs: usize,
    pub n_units: usize,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub pseudo_r2: Option<f64>,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Estimate and standard error of a named coefficient.
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        let j = self.names.iter().position(|n| n == name)?;
        Some((self.coefficients[j], self.std_errors[j]))
    }
}

/// McFadden pseudo R²: `1 − ll_model / ll_null` with an intercept-only null.
pub fn pseudo_r2(fit: &FitResult) -> Result<f64> {
    let null = fit.null_log_likelihood;
    if null == 0.0 || !null.is_finite() || !fit.log_likelihood.is_finite() {
        return Err(FitError::DegenerateNull);
    }
    Ok(1.0 - fit.log_likelihood / null)
}

/// A log-scale coefficient expressed as a percentage change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentEffect {
    pub percent: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const DEFAULT_Z: f64 = 1.96;

pub fn transform_estimate(delta: f64, se: f64, z: f64) -> PercentEffect {
    let pct = |v: f64| v.exp_m1() * 100.0;
    PercentEffect {
        percent: pct(delta),
        ci_low: pct(delta - z * se),
        ci_high: pct(delta + z * se),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_codes_follow_sorted_labels() {
        let f = Factor::from_labels("u", ["b", "a", "b", "c"]);
        assert_eq!(f.labels, vec!["a", "b", "c"]);
        assert_eq!(f.codes, vec![1, 0, 1, 2]);
        let s = f.subset(&[0, 3]);
        assert_eq!(s.labels, vec!["b", "c"]);
        assert_eq!(s.codes, vec![0, 1]);
    }

    #[test]
    fn percent_transform() {
        let e = transform_estimate(0.0, 0.1, DEFAULT_Z);
        assert_eq!(e.percent, 0.0);
        assert!(((1.0 + e.ci_low / 100.0) * (1.0 + e.ci_high / 100.0) - 1.0).abs() < 1e-12);
        let e = transform_estimate(0.048, 0.023, DEFAULT_Z);
        assert!((e.percent - 4.917).abs() < 1e-3);
    }
}
