//! Sensitivity analyses: buy-box change indicators and exclusions,
//! visibility-ratio cutoffs for comparison groups, and the platform
//! seller-rating imputation sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fe_glm::{Covariate, ModelSpec, DEFAULT_Z};
use crate::panel::{impute_platform_seller_rating, lag_covariates, Panel, PanelError, Variable};
use crate::sp_tests::{coo_test, TestError, TestReport};

pub const CHANGE_T: &str = "buybox_change_t";
pub const CHANGE_T1: &str = "buybox_change_t1";

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("{0} rows lack a buy-box seller id")]
    MissingSeller(usize),
    #[error("comparison group {0:?} has no platform product")]
    NoPlatformProduct(String),
    #[error("comparison group {0:?} has no substitutes")]
    NoSubstitutes(String),
    #[error("{0} rows lack a comparison group")]
    MissingGroup(usize),
    #[error("invalid cutoff {0}; cutoffs must be at least 1")]
    InvalidCutoff(f64),
    #[error("invalid seller-rating imputation {0:?}")]
    InvalidImputation(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Test(#[from] TestError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RobustnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub report: TestReport,
}

/// Change indicator per (product, date): the seller differs from the
/// previous day's. The first observed day of a product counts as no change.
fn seller_changes(panel: &Panel) -> Result<HashMap<(String, NaiveDate), bool>> {
    let missing = panel.rows.iter().filter(|r| r.buybox_seller_id.is_none()).count();
    if missing > 0 {
        return Err(RobustnessError::MissingSeller(missing));
    }
    let sellers: HashMap<(&str, NaiveDate), &str> = panel
        .rows
        .iter()
        .map(|r| {
            (
                (r.product_id.as_str(), r.date),
                r.buybox_seller_id.as_deref().unwrap_or_default(),
            )
        })
        .collect();
    Ok(panel
        .rows
        .iter()
        .map(|r| {
            let prev = r
                .date
                .checked_sub_days(Days::new(1))
                .and_then(|d| sellers.get(&(r.product_id.as_str(), d)));
            let changed = prev.is_some_and(|p| Some(*p) != r.buybox_seller_id.as_deref());
            ((r.product_id.clone(), r.date), changed)
        })
        .collect())
}

fn changed(map: &HashMap<(String, NaiveDate), bool>, product: &str, date: Option<NaiveDate>) -> bool {
    date.and_then(|d| map.get(&(product.to_string(), d)).copied())
        .unwrap_or(false)
}

/// Refits the COO model on `raw` (unlagged) after lagging by `lag_days`:
/// the baseline, indicators for a buy-box change on the outcome day and on
/// the day before, and the same two sets of days excluded. Indicators are
/// measured on the outcome's calendar day. An indicator that never fires
/// is left out of the model.
pub fn buybox_change_sensitivity(raw: &Panel, lag_days: u32, spec: &ModelSpec) -> Result<Vec<Variant>> {
    let changes = seller_changes(raw)?;
    let lagged = lag_covariates(raw, lag_days)?;
    let mut tagged = lagged.clone();
    for r in &mut tagged.rows {
        let t = changed(&changes, &r.product_id, Some(r.date));
        let t1 = changed(&changes, &r.product_id, r.date.checked_sub_days(Days::new(1)));
        r.extra.insert(CHANGE_T.into(), f64::from(t as u8));
        r.extra.insert(CHANGE_T1.into(), f64::from(t1 as u8));
    }
    let fires = |col: &str| tagged.rows.iter().any(|r| r.extra[col] != 0.0);
    let with = |cols: &[&str]| {
        cols.iter().filter(|c| fires(c)).fold(spec.clone(), |s, c| {
            s.with_covariate(Covariate::identity(Variable::Extra(c.to_string())))
        })
    };
    let exclude = |cols: &[&str]| {
        let rows = tagged
            .rows
            .iter()
            .filter(|r| cols.iter().all(|c| r.extra[*c] == 0.0))
            .cloned()
            .collect();
        tagged.with_rows(rows)
    };

    let jobs: Vec<(&str, Panel, ModelSpec)> = vec![
        ("baseline", lagged.clone(), spec.clone()),
        ("indicator_t", tagged.clone(), with(&[CHANGE_T])),
        ("indicator_t_t1", tagged.clone(), with(&[CHANGE_T, CHANGE_T1])),
        ("exclude_t", exclude(&[CHANGE_T]), spec.clone()),
        ("exclude_t_t1", exclude(&[CHANGE_T, CHANGE_T1]), spec.clone()),
    ];
    jobs.into_par_iter()
        .map(|(name, panel, spec)| {
            Ok(Variant {
                name: name.to_string(),
                report: coo_test(&panel, &spec)?,
            })
        })
        .collect()
}

/// Ratio of the platform product's mean organic visibility to the mean of
/// its substitutes' means, per comparison group, over the rows present.
pub fn group_visibility_ratios(panel: &Panel) -> Result<BTreeMap<String, f64>> {
    let missing = panel.rows.iter().filter(|r| r.comparison_group_id.is_none()).count();
    if missing > 0 {
        return Err(RobustnessError::MissingGroup(missing));
    }
    // group -> product -> (sum, n, platform rows)
    let mut acc: BTreeMap<&str, BTreeMap<&str, (f64, usize, usize)>> = BTreeMap::new();
    for r in &panel.rows {
        let e = acc
            .entry(r.comparison_group_id.as_deref().unwrap_or_default())
            .or_default()
            .entry(&r.product_id)
            .or_default();
        e.0 += r.organic_visibility;
        e.1 += 1;
        e.2 += r.is_amazon as usize;
    }
    let mut out = BTreeMap::new();
    for (group, products) in acc {
        let platform = products
            .iter()
            .filter(|(_, (_, n, a))| 2 * a > *n)
            .map(|(_, (s, n, _))| s / *n as f64)
            .next()
            .ok_or_else(|| RobustnessError::NoPlatformProduct(group.to_string()))?;
        let subs: Vec<f64> = products
            .values()
            .filter(|(_, n, a)| 2 * a <= *n)
            .map(|(s, n, _)| s / *n as f64)
            .collect();
        if subs.is_empty() {
            return Err(RobustnessError::NoSubstitutes(group.to_string()));
        }
        let third = subs.iter().sum::<f64>() / subs.len() as f64;
        out.insert(group.to_string(), platform / third);
    }
    Ok(out)
}

/// A group survives cutoff `x` when `1/x ≤ ratio ≤ x`.
pub fn within_cutoff(ratio: f64, cutoff: f64) -> bool {
    if cutoff == f64::INFINITY {
        return true;
    }
    ratio <= cutoff && ratio * cutoff >= 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffResult {
    pub cutoff: f64,
    pub groups: usize,
    pub groups_kept: usize,
    pub share_dropped: f64,
    /// Empty when every group was dropped or the refit failed.
    pub report: Option<TestReport>,
    pub note: Option<String>,
}

/// Drops comparison groups whose visibility ratio lies outside
/// `[1/x, x]` and refits on the rest, for each cutoff `x` (which may be
/// infinite).
pub fn ratio_cutoff_sensitivity(panel: &Panel, spec: &ModelSpec, cutoffs: &[f64]) -> Result<Vec<CutoffResult>> {
    if let Some(&c) = cutoffs.iter().find(|c| !(**c >= 1.0)) {
        return Err(RobustnessError::InvalidCutoff(c));
    }
    let ratios = group_visibility_ratios(panel)?;
    let groups = ratios.len();
    cutoffs
        .par_iter()
        .map(|&cutoff| {
            let kept: Vec<&str> = ratios
                .iter()
                .filter(|(_, r)| within_cutoff(**r, cutoff))
                .map(|(g, _)| g.as_str())
                .collect();
            let share_dropped = (groups - kept.len()) as f64 / groups as f64;
            let mut result = CutoffResult {
                cutoff,
                groups,
                groups_kept: kept.len(),
                share_dropped,
                report: None,
                note: None,
            };
            if kept.is_empty() {
                result.note = Some("all groups dropped".into());
                return Ok(result);
            }
            let rows = panel
                .rows
                .iter()
                .filter(|r| {
                    kept.binary_search(&r.comparison_group_id.as_deref().unwrap_or_default())
                        .is_ok()
                })
                .cloned()
                .collect();
            match coo_test(&panel.with_rows(rows), spec) {
                Ok(report) => result.report = Some(report),
                Err(TestError::Fit(e)) => result.note = Some(e.to_string()),
                Err(e) => return Err(e.into()),
            }
            Ok(result)
        })
        .collect()
}

/// Platform seller rating used for the refit, or the regressor dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RatingImputation {
    Omit,
    Value(f64),
}

impl RatingImputation {
    pub fn sweep() -> Vec<RatingImputation> {
        vec![
            RatingImputation::Omit,
            RatingImputation::Value(80.0),
            RatingImputation::Value(90.0),
            RatingImputation::Value(95.0),
            RatingImputation::Value(100.0),
        ]
    }
}

impl fmt::Display for RatingImputation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatingImputation::Omit => f.write_str("none"),
            RatingImputation::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for RatingImputation {
    type Err = RobustnessError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(RatingImputation::Omit);
        }
        match s.parse::<f64>() {
            Ok(v) if (0.0..=100.0).contains(&v) => Ok(RatingImputation::Value(v)),
            _ => Err(RobustnessError::InvalidImputation(s.to_string())),
        }
    }
}

/// Refits on a lagged panel with the platform's seller rating set to each
/// imputed value, or with the seller-rating regressor removed.
pub fn seller_rating_sensitivity(
    panel: &Panel,
    spec: &ModelSpec,
    imputations: &[RatingImputation],
) -> Result<Vec<Variant>> {
    imputations
        .par_iter()
        .map(|imp| {
            let report = match imp {
                RatingImputation::Omit => coo_test(panel, &spec.clone().without(&Variable::RatingSeller))?,
                RatingImputation::Value(v) => coo_test(&impute_platform_seller_rating(panel, *v), spec)?,
            };
            Ok(Variant {
                name: imp.to_string(),
                report,
            })
        })
        .collect()
}

/// One line of `sensitivity.csv`. The interval is on the coefficient scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub analysis: String,
    pub variant: String,
    pub delta: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub share_dropped: Option<f64>,
}

impl SensitivityRow {
    pub fn from_report(analysis: &str, variant: &str, report: Option<&TestReport>, share_dropped: Option<f64>) -> Self {
        SensitivityRow {
            analysis: analysis.to_string(),
            variant: variant.to_string(),
            delta: report.map(|r| r.estimate),
            se: report.map(|r| r.se),
            ci_low: report.map(|r| r.estimate - DEFAULT_Z * r.se),
            ci_high: report.map(|r| r.estimate + DEFAULT_Z * r.se),
            share_dropped,
        }
    }
}

pub fn variant_rows(analysis: &str, variants: &[Variant]) -> Vec<SensitivityRow> {
    variants
        .iter()
        .map(|v| SensitivityRow::from_report(analysis, &v.name, Some(&v.report), None))
        .collect()
}

pub fn cutoff_rows(results: &[CutoffResult]) -> Vec<SensitivityRow> {
    results
        .iter()
        .map(|c| {
            SensitivityRow::from_report(
                "ratio_cutoff",
                &c.cutoff.to_string(),
                c.report.as_ref(),
                Some(c.share_dropped),
            )
        })
        .collect()
}

pub fn write_sensitivity_csv<W: Write>(rows: &[SensitivityRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "analysis",
        "variant",
        "delta",
        "se",
        "ci_low",
        "ci_high",
        "share_dropped",
    ])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.analysis.clone(),
            r.variant.clone(),
            cell(r.delta),
            cell(r.se),
            cell(r.ci_low),
            cell(r.ci_high),
            cell(r.share_dropped),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
