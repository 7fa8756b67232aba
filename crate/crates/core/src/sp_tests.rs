//! The conditioning-on-observables (COO) and outcome-based (OB) tests for
//! self-preferencing, and their joint verdict.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fe_glm::{self, FitError, FitResult, ModelSpec, DEFAULT_Z};
use crate::panel::{Panel, Variable};
use crate::stats::two_sided_p_value;

#[derive(Debug, Error)]
pub enum TestError {
    #[error("panel is not lagged; lag the regressors before testing")]
    NotLagged,
    #[error("panel was lagged around {found}, the test needs {expected} as the outcome")]
    WrongOutcome { expected: String, found: String },
    #[error("{0} rows lack sponsored visibility; the OB test needs it on every row")]
    MissingSponsored(usize),
    #[error("no rows left after dropping zero-visibility observations")]
    EmptySample,
    #[error("coefficient {0:?} missing from the fit")]
    MissingCoefficient(String),
    #[error("reports come from different samples ({0} vs {1})")]
    SampleMismatch(String, String),
    #[error("expected a {expected:?} report, got {found:?}")]
    WrongKind { expected: TestKind, found: TestKind },
    #[error(transparent)]
    Fit(#[from] FitError),
}

pub type Result<T> = std::result::Result<T, TestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TestKind {
    Coo,
    Ob,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestKind::Coo => "COO",
            TestKind::Ob => "OB",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conclusion {
    /// Positive estimate, interval above zero: the platform's offers are favoured.
    EvidenceFor,
    NoEvidence,
    /// Negative estimate, interval below zero: third-party offers are favoured.
    Negative,
}

impl Conclusion {
    /// Reads the conclusion off a log-scale interval.
    pub fn from_interval(low: f64, high: f64) -> Self {
        if low > 0.0 {
            Conclusion::EvidenceFor
        } else if high < 0.0 {
            Conclusion::Negative
        } else {
            Conclusion::NoEvidence
        }
    }
}

impl fmt::Display for Conclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conclusion::EvidenceFor => "evidence-for",
            Conclusion::NoEvidence => "no-evidence",
            Conclusion::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDescriptor {
    /// Digest of the (product, date) keys of the panel handed to the test.
    pub source_digest: String,
    pub n_rows: usize,
    pub n_obs: usize,
    pub n_units: usize,
    pub lag_days: u32,
    pub markets: Vec<String>,
    pub dropped_zero_visibility: usize,
    pub dropped_all_zero_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub kind: TestKind,
    pub protected: String,
    pub estimate: f64,
    pub se: f64,
    pub percent: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub conclusion: Conclusion,
    pub sample: SampleDescriptor,
    pub spec: ModelSpec,
    pub fit: FitResult,
}

impl TestReport {
    /// Assembles a report from a fit of `spec`.
    pub fn from_fit(kind: TestKind, spec: &ModelSpec, fit: FitResult, mut sample: SampleDescriptor) -> Result<Self> {
        let name = spec.protected_name().to_string();
        let (estimate, se) = fit
            .coefficient(&name)
            .ok_or_else(|| TestError::MissingCoefficient(name.clone()))?;
        let effect = fe_glm::transform_estimate(estimate, se, DEFAULT_Z);
        sample.n_obs = fit.n_obs;
        sample.n_units = fit.n_units;
        sample.dropped_all_zero_levels = fit.diagnostics.dropped_rows;
        Ok(TestReport {
            kind,
            protected: name,
            estimate,
            se,
            percent: effect.percent,
            ci_low: effect.ci_low,
            ci_high: effect.ci_high,
            p_value: two_sided_p_value(estimate / se),
            conclusion: Conclusion::from_interval(estimate - DEFAULT_Z * se, estimate + DEFAULT_Z * se),
            sample,
            spec: spec.clone(),
            fit,
        })
    }
}

impl fmt::Display for TestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} test: {} = {:.4} (SE {:.4}, p = {:.3})",
            self.kind, self.protected, self.estimate, self.se, self.p_value
        )?;
        writeln!(
            f,
            "  effect {:+.2}% [{:+.2}%, {:+.2}%], N = {}, units = {}",
            self.percent, self.ci_low, self.ci_high, self.sample.n_obs, self.sample.n_units
        )?;
        write!(f, "  conclusion: {}", self.conclusion)
    }
}

fn require_lag(panel: &Panel, outcome: &Variable) -> Result<u32> {
    let lag = panel.lag.as_ref().ok_or(TestError::NotLagged)?;
    if &lag.outcome != outcome {
        return Err(TestError::WrongOutcome {
            expected: outcome.to_string(),
            found: lag.outcome.to_string(),
        });
    }
    if lag.days == 0 {
        return Err(TestError::NotLagged);
    }
    Ok(lag.days)
}

fn descriptor(panel: &Panel, lag_days: u32) -> SampleDescriptor {
    SampleDescriptor {
        source_digest: panel.key_digest(),
        n_rows: panel.len(),
        n_obs: 0,
        n_units: 0,
        lag_days,
        markets: panel.markets.clone(),
        dropped_zero_visibility: 0,
        dropped_all_zero_levels: 0,
    }
}

/// Fits the visibility model on a lagged panel and reads off the
/// protected-attribute coefficient.
pub fn coo_test(panel: &Panel, spec: &ModelSpec) -> Result<TestReport> {
    let lag = require_lag(panel, &spec.outcome)?;
    let fit = fe_glm::fit_poisson_two_way_fe(panel, spec)?;
    TestReport::from_fit(TestKind::Coo, spec, fit, descriptor(panel, lag))
}

/// Fits the sales-rank model. Rows with zero organic or sponsored
/// visibility cannot be logged and are dropped; the count is reported.
pub fn ob_test(panel: &Panel, spec: &ModelSpec) -> Result<TestReport> {
    let lag = require_lag(panel, &spec.outcome)?;
    let missing = panel.rows.iter().filter(|r| r.sponsored_visibility.is_none()).count();
    if missing > 0 {
        return Err(TestError::MissingSponsored(missing));
    }
    let rows: Vec<_> = panel
        .rows
        .iter()
        .filter(|r| r.organic_visibility > 0.0 && r.sponsored_visibility.is_some_and(|s| s > 0.0))
        .cloned()
        .collect();
    let mut sample = descriptor(panel, lag);
    sample.dropped_zero_visibility = panel.len() - rows.len();
    if sample.dropped_zero_visibility > 0 {
        log::info!(
            "OB test: dropped {} zero-visibility rows",
            sample.dropped_zero_visibility
        );
    }
    if rows.is_empty() {
        return Err(TestError::EmptySample);
    }
    let fit = fe_glm::fit_poisson_two_way_fe(&panel.with_rows(rows), spec)?;
    TestReport::from_fit(TestKind::Ob, spec, fit, sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum Verdict {
    ConsistentNoEvidence,
    ConsistentEvidence,
    Disagree,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::ConsistentNoEvidence => "CONSISTENT-NO-EVIDENCE",
            Verdict::ConsistentEvidence => "CONSISTENT-EVIDENCE",
            Verdict::Disagree => "DISAGREE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVerdict {
    pub verdict: Verdict,
    pub coo: TestReport,
    pub ob: TestReport,
}

/// The tests agree when both or neither find the platform favoured; a
/// negative finding counts as no favouring.
pub fn verdict(coo: Conclusion, ob: Conclusion) -> Verdict {
    match (coo == Conclusion::EvidenceFor, ob == Conclusion::EvidenceFor) {
        (true, true) => Verdict::ConsistentEvidence,
        (false, false) => Verdict::ConsistentNoEvidence,
        _ => Verdict::Disagree,
    }
}

pub fn compare_tests(coo: TestReport, ob: TestReport) -> Result<JointVerdict> {
    if coo.kind != TestKind::Coo {
        return Err(TestError::WrongKind {
            expected: TestKind::Coo,
            found: coo.kind,
        });
    }
    if ob.kind != TestKind::Ob {
        return Err(TestError::WrongKind {
            expected: TestKind::Ob,
            found: ob.kind,
        });
    }
    if coo.sample.source_digest != ob.sample.source_digest {
        return Err(TestError::SampleMismatch(
            coo.sample.source_digest.clone(),
            ob.sample.source_digest.clone(),
        ));
    }
    Ok(JointVerdict {
        verdict: verdict(coo.conclusion, ob.conclusion),
        coo,
        ob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conclusions_follow_the_interval() {
        assert_eq!(Conclusion::from_interval(0.01, 0.2), Conclusion::EvidenceFor);
        assert_eq!(Conclusion::from_interval(-0.01, 0.2), Conclusion::NoEvidence);
        assert_eq!(Conclusion::from_interval(-0.3, -0.1), Conclusion::Negative);
    }

    #[test]
    fn verdict_table() {
        use Conclusion::*;
        assert_eq!(verdict(NoEvidence, NoEvidence), Verdict::ConsistentNoEvidence);
        assert_eq!(verdict(Negative, NoEvidence), Verdict::ConsistentNoEvidence);
        assert_eq!(verdict(EvidenceFor, EvidenceFor), Verdict::ConsistentEvidence);
        assert_eq!(verdict(EvidenceFor, Negative), Verdict::Disagree);
        assert_eq!(verdict(NoEvidence, EvidenceFor), Verdict::Disagree);
    }

    #[test]
    fn unlagged_panel_is_rejected() {
        let panel = Panel::default();
        let spec = ModelSpec::coo(crate::fe_glm::FixedEffect::Product);
        assert!(matches!(coo_test(&panel, &spec), Err(TestError::NotLagged)));
    }

    #[test]
    fn verdict_serialises_in_upper_kebab_case() {
        let s = serde_json::to_string(&Verdict::ConsistentNoEvidence).unwrap();
        assert_eq!(s, "\"CONSISTENT-NO-EVIDENCE\"");
    }
}
