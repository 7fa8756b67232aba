//! Daily product-level panel: ingestion, lagging, sample filters,
//! comparison groups, pooling and summary statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::stats;

pub const PANEL_HEADER: [&str; 14] = [
    "product_id",
    "date",
    "organic_visibility",
    "sponsored_visibility",
    "sales_rank",
    "price",
    "count_reviews",
    "rating_product",
    "rating_seller",
    "is_prime",
    "is_amazon",
    "buybox_seller_id",
    "comparison_group_id",
    "market",
];

/// Seller rating assigned to the platform when it holds the buy box.
pub const DEFAULT_PLATFORM_SELLER_RATING: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("{} invalid row(s); first: {}", .0.len(), .0[0])]
    Validation(Vec<RowDiagnostic>),
    #[error("missing column '{0}' in panel header")]
    MissingColumn(String),
    #[error("duplicate observation for product {product} on {date}")]
    Duplicate { product: String, date: NaiveDate },
    #[error("product id {0} occurs in more than one pooled panel")]
    IdCollision(String),
    #[error("invalid sample filter: {0}")]
    InvalidFilter(String),
    #[error("cannot combine panels lagged differently: {0}")]
    LagMismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PanelError>;

/// A panel column usable as outcome or regressor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variable {
    OrganicVisibility,
    SponsoredVisibility,
    SalesRank,
    Price,
    CountReviews,
    RatingProduct,
    RatingSeller,
    IsPrime,
    IsAmazon,
    /// A derived column stored in [`PanelObservation::extra`].
    Extra(String),
}

impl Variable {
    pub fn name(&self) -> &str {
        match self {
            Variable::OrganicVisibility => "organic_visibility",
            Variable::SponsoredVisibility => "sponsored_visibility",
            Variable::SalesRank => "sales_rank",
            Variable::Price => "price",
            Variable::CountReviews => "count_reviews",
            Variable::RatingProduct => "rating_product",
            Variable::RatingSeller => "rating_seller",
            Variable::IsPrime => "is_prime",
            Variable::IsAmazon => "is_amazon",
            Variable::Extra(name) => name,
        }
    }

    pub fn value(&self, obs: &PanelObservation) -> Option<f64> {
        Some(match self {
            Variable::OrganicVisibility => obs.organic_visibility,
            Variable::SponsoredVisibility => return obs.sponsored_visibility,
            Variable::SalesRank => obs.sales_rank as f64,
            Variable::Price => obs.price,
            Variable::CountReviews => obs.count_reviews as f64,
            Variable::RatingProduct => obs.rating_product,
            Variable::RatingSeller => obs.rating_seller,
            Variable::IsPrime => f64::from(u8::from(obs.is_prime)),
            Variable::IsAmazon => f64::from(u8::from(obs.is_amazon)),
            Variable::Extra(name) => return obs.extra.get(name).copied(),
        })
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variable {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "organic_visibility" => Variable::OrganicVisibility,
            "sponsored_visibility" => Variable::SponsoredVisibility,
            "sales_rank" => Variable::SalesRank,
            "price" => Variable::Price,
            "count_reviews" => Variable::CountReviews,
            "rating_product" => Variable::RatingProduct,
            "rating_seller" => Variable::RatingSeller,
            "is_prime" => Variable::IsPrime,
            "is_amazon" => Variable::IsAmazon,
            other => Variable::Extra(other.to_string()),
        })
    }
}

impl Serialize for Variable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

/// One product-day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelObservation {
    pub product_id: String,
    pub date: NaiveDate,
    pub organic_visibility: f64,
    pub sponsored_visibility: Option<f64>,
    pub sales_rank: u32,
    /// Currency-normalised, shipping included.
    pub price: f64,
    pub count_reviews: u32,
    pub rating_product: f64,
    pub rating_seller: f64,
    pub is_prime: bool,
    /// Platform holds the buy box (or supplies the private label).
    pub is_amazon: bool,
    pub buybox_seller_id: Option<String>,
    pub comparison_group_id: Option<String>,
    pub market: Option<String>,
    /// Derived numeric columns (indicators, simulated variables).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl PanelObservation {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.organic_visibility >= 0.0 && self.organic_visibility.is_finite()) {
            return Err(format!("organic_visibility {} must be >= 0", self.organic_visibility));
        }
        if let Some(s) = self.sponsored_visibility {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(format!("sponsored_visibility {s} must be >= 0"));
            }
        }
        if self.sales_rank < 1 {
            return Err("sales_rank must be >= 1".into());
        }
        if !(self.price > 0.0 && self.price.is_finite()) {
            return Err(format!("price {} must be > 0", self.price));
        }
        if self.count_reviews < 1 {
            return Err("count_reviews must be >= 1".into());
        }
        if !(1.0..=5.0).contains(&self.rating_product) {
            return Err(format!("rating_product {} outside [1, 5]", self.rating_product));
        }
        if !(0.0..=100.0).contains(&self.rating_seller) {
            return Err(format!("rating_seller {} outside [0, 100]", self.rating_seller));
        }
        Ok(())
    }
}

/// How the regressors of a panel were shifted relative to its outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagInfo {
    pub days: u32,
    /// The column left at its own date.
    pub outcome: Variable,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub rows: Vec<PanelObservation>,
    pub lag: Option<LagInfo>,
    /// Markets pooled into this panel.
    pub markets: Vec<String>,
}

impl Panel {
    pub fn new(rows: Vec<PanelObservation>) -> Self {
        let markets: BTreeSet<String> = rows.iter().filter_map(|r| r.market.clone()).collect();
        Self {
            rows,
            lag: None,
            markets: markets.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn product_ids(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.product_id.as_str()).collect()
    }

    /// Sorts rows by `(product, date)`.
    pub fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| (&a.product_id, a.date).cmp(&(&b.product_id, b.date)));
    }

    pub fn with_rows(&self, rows: Vec<PanelObservation>) -> Panel {
        Panel {
            rows,
            lag: self.lag.clone(),
            markets: self.markets.clone(),
        }
    }

    /// SHA-256 over the sorted `(product, date)` keys; independent of row order.
    pub fn key_digest(&self) -> String {
        let mut keys: Vec<(&str, NaiveDate)> = self.rows.iter().map(|r| (r.product_id.as_str(), r.date)).collect();
        keys.sort_unstable();
        let mut h = Sha256::new();
        for (p, d) in keys {
            h.update(p.as_bytes());
            h.update([0u8]);
            h.update(d.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    fn extra_columns(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.extra.keys()).collect();
        set.into_iter().cloned().collect()
    }

    /// Writes `panel.csv`; derived columns, if any, follow `market`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let extras = self.extra_columns();
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = PANEL_HEADER.to_vec();
        header.extend(extras.iter().map(String::as_str));
        wtr.write_record(&header)?;
        let opt = |v: &Option<String>| v.clone().unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.product_id.clone(),
                r.date.to_string(),
                r.organic_visibility.to_string(),
                r.sponsored_visibility.map(|v| v.to_string()).unwrap_or_default(),
                r.sales_rank.to_string(),
                r.price.to_string(),
                r.count_reviews.to_string(),
                r.rating_product.to_string(),
                r.rating_seller.to_string(),
                u8::from(r.is_prime).to_string(),
                u8::from(r.is_amazon).to_string(),
                opt(&r.buybox_seller_id),
                opt(&r.comparison_group_id),
                opt(&r.market),
            ];
            for e in &extras {
                rec.push(r.extra.get(e).map(|v| v.to_string()).unwrap_or_default());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Multiplier applied to prices of rows whose market is listed in
    /// `foreign_markets`.
    pub currency_rate: f64,
    pub foreign_markets: Vec<String>,
    /// Fills an empty `rating_seller` on platform rows.
    pub platform_seller_rating: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            currency_rate: 1.0,
            foreign_markets: Vec::new(),
            platform_seller_rating: DEFAULT_PLATFORM_SELLER_RATING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateGap {
    pub product_id: String,
    pub after: NaiveDate,
    pub missing_days: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub products: usize,
    pub converted_rows: usize,
    pub gaps: Vec<DateGap>,
}

/// Parses a `panel.csv` stream.
pub fn read_observations<R: Read>(reader: R, opts: &IngestOptions) -> Result<(Panel, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = HashMap::new();
    for name in PANEL_HEADER {
        let i = col(name).ok_or_else(|| PanelError::MissingColumn(name.to_string()))?;
        idx.insert(name, i);
    }
    let extras: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !PANEL_HEADER.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let foreign: BTreeSet<&str> = opts.foreign_markets.iter().map(String::as_str).collect();

    let mut rows = Vec::new();
    let mut diags = Vec::new();
    let mut converted = 0;
    for (n, rec) in rdr.records().enumerate() {
        let line = n as u64 + 2;
        let rec = rec?;
        let field = |name: &str| rec.get(idx[name]).unwrap_or("");
        let parsed = (|| -> std::result::Result<PanelObservation, String> {
            fn num<T: FromStr>(name: &str, s: &str) -> std::result::Result<T, String> {
                s.parse::<T>().map_err(|_| format!("{name}: cannot parse '{s}'"))
            }
            fn flag(name: &str, s: &str) -> std::result::Result<bool, String> {
                match s {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    _ => Err(format!("{name}: expected 0 or 1, got '{s}'")),
                }
            }
            let opt_str = |s: &str| (!s.is_empty()).then(|| s.to_string());
            let product_id = field("product_id");
            if product_id.is_empty() {
                return Err("product_id is empty".into());
            }
            let date = NaiveDate::parse_from_str(field("date"), "%Y-%m-%d")
                .map_err(|_| format!("date: cannot parse '{}'", field("date")))?;
            let is_amazon = flag("is_amazon", field("is_amazon"))?;
            let sponsored = match field("sponsored_visibility") {
                "" => None,
                s => Some(num::<f64>("sponsored_visibility", s)?),
            };
            let rating_seller = match field("rating_seller") {
                "" if is_amazon => opts.platform_seller_rating,
                s => num::<f64>("rating_seller", s)?,
            };
            let mut extra = BTreeMap::new();
            for (i, name) in &extras {
                let s = rec.get(*i).unwrap_or("");
                if !s.is_empty() {
                    extra.insert(name.clone(), num::<f64>(name, s)?);
                }
            }
            let obs = PanelObservation {
                product_id: product_id.to_string(),
                date,
                organic_visibility: num("organic_visibility", field("organic_visibility"))?,
                sponsored_visibility: sponsored,
                sales_rank: num("sales_rank", field("sales_rank"))?,
                price: num("price", field("price"))?,
                count_reviews: num("count_reviews", field("count_reviews"))?,
                rating_product: num("rating_product", field("rating_product"))?,
                rating_seller,
                is_prime: flag("is_prime", field("is_prime"))?,
                is_amazon,
                buybox_seller_id: opt_str(field("buybox_seller_id")),
                comparison_group_id: opt_str(field("comparison_group_id")),
                market: opt_str(field("market")),
                extra,
            };
            obs.validate()?;
            Ok(obs)
        })();
        match parsed {
            Ok(mut obs) => {
                if obs.market.as_deref().is_some_and(|m| foreign.contains(m)) {
                    obs.price *= opts.currency_rate;
                    converted += 1;
                }
                rows.push(obs);
            }
            Err(message) => diags.push(RowDiagnostic { line, message }),
        }
    }
    if !diags.is_empty() {
        return Err(PanelError::Validation(diags));
    }

    let mut panel = Panel::new(rows);
    panel.sort();
    for w in panel.rows.windows(2) {
        if w[0].product_id == w[1].product_id && w[0].date == w[1].date {
            return Err(PanelError::Duplicate {
                product: w[0].product_id.clone(),
                date: w[0].date,
            });
        }
    }
    let mut gaps = Vec::new();
    for w in panel.rows.windows(2) {
        if w[0].product_id == w[1].product_id {
            let missing = (w[1].date - w[0].date).num_days() - 1;
            if missing > 0 {
                gaps.push(DateGap {
                    product_id: w[0].product_id.clone(),
                    after: w[0].date,
                    missing_days: missing,
                });
            }
        }
    }
    if !gaps.is_empty() {
        log::warn!("{} date gap(s) in panel", gaps.len());
    }
    let report = IngestReport {
        rows: panel.len(),
        products: panel.product_ids().len(),
        converted_rows: converted,
        gaps,
    };
    Ok((panel, report))
}

pub fn ingest_observations(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<(Panel, IngestReport)> {
    let f = std::fs::File::open(path)?;
    read_observations(std::io::BufReader::new(f), opts)
}

/// Replaces every column except `outcome`, the date and the identifiers with
/// its value `lag_days` earlier. Rows whose predecessor date is absent are
/// dropped.
pub fn lag_for_outcome(panel: &Panel, lag_days: u32, outcome: Variable) -> Result<Panel> {
    let days = match &panel.lag {
        Some(prev) if prev.outcome != outcome => {
            return Err(PanelError::LagMismatch(format!(
                "panel already lagged around {}, requested {}",
                prev.outcome, outcome
            )))
        }
        Some(prev) => prev.days + lag_days,
        None => lag_days,
    };
    let mut sorted = panel.clone();
    sorted.sort();
    let lagged_info = Some(LagInfo {
        days,
        outcome: outcome.clone(),
    });
    if lag_days == 0 {
        sorted.lag = lagged_info;
        return Ok(sorted);
    }
    let index: HashMap<(&str, NaiveDate), usize> = sorted
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.product_id.as_str(), r.date), i))
        .collect();
    let mut out = Vec::with_capacity(sorted.len());
    for cur in &sorted.rows {
        let Some(prev_date) = cur.date.checked_sub_days(chrono::Days::new(lag_days as u64)) else {
            continue;
        };
        let Some(&j) = index.get(&(cur.product_id.as_str(), prev_date)) else {
            continue;
        };
        let mut row = sorted.rows[j].clone();
        row.date = cur.date;
        row.comparison_group_id = cur.comparison_group_id.clone();
        row.market = cur.market.clone();
        match &outcome {
            Variable::OrganicVisibility => row.organic_visibility = cur.organic_visibility,
            Variable::SponsoredVisibility => row.sponsored_visibility = cur.sponsored_visibility,
            Variable::SalesRank => row.sales_rank = cur.sales_rank,
            Variable::Price => row.price = cur.price,
            Variable::CountReviews => row.count_reviews = cur.count_reviews,
            Variable::RatingProduct => row.rating_product = cur.rating_product,
            Variable::RatingSeller => row.rating_seller = cur.rating_seller,
            Variable::IsPrime => row.is_prime = cur.is_prime,
            Variable::IsAmazon => row.is_amazon = cur.is_amazon,
            Variable::Extra(name) => match cur.extra.get(name) {
                Some(&v) => {
                    row.extra.insert(name.clone(), v);
                }
                None => {
                    row.extra.remove(name);
                }
            },
        }
        out.push(row);
    }
    if out.is_empty() {
        log::warn!("lag of {lag_days} day(s) leaves an empty panel");
    }
    Ok(Panel {
        rows: out,
        lag: lagged_info,
        markets: sorted.markets,
    })
}

/// Lags every covariate by `lag_days`, keeping organic visibility as the
/// current-day outcome.
pub fn lag_covariates(panel: &Panel, lag_days: u32) -> Result<Panel> {
    lag_for_outcome(panel, lag_days, Variable::OrganicVisibility)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFilter {
    /// Inclusive bounds on a product's average sales rank over present days.
    pub sales_rank_range: (f64, f64),
    /// Minimum share of window days on which the product has a row.
    pub availability_min_share: f64,
    /// Products must have been first observed strictly before this date.
    pub first_listed_before: Option<NaiveDate>,
    pub require_buybox_variation: bool,
    /// Observation window; defaults to the panel's date span.
    pub window: Option<(NaiveDate, NaiveDate)>,
}

impl Default for SampleFilter {
    fn default() -> Self {
        Self {
            sales_rank_range: (1.0, f64::INFINITY),
            availability_min_share: 0.0,
            first_listed_before: None,
            require_buybox_variation: false,
            window: None,
        }
    }
}

impl SampleFilter {
    /// Best-selling buy-box sample: average rank 1..=1000 with changing sellers.
    pub fn best_selling() -> Self {
        Self {
            sales_rank_range: (1.0, 1000.0),
            require_buybox_variation: true,
            ..Self::default()
        }
    }

    /// Private-label sample: average rank at most 50,000 and available on at
    /// least half of the window.
    pub fn private_label(first_listed_before: Option<NaiveDate>) -> Self {
        Self {
            sales_rank_range: (1.0, 50_000.0),
            availability_min_share: 0.5,
            first_listed_before,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sales_rank_range;
        if !(lo <= hi) {
            return Err(PanelError::InvalidFilter(format!("sales rank range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.availability_min_share) {
            return Err(PanelError::InvalidFilter(format!(
                "availability share {}",
                self.availability_min_share
            )));
        }
        if let Some((a, b)) = self.window {
            if a > b {
                return Err(PanelError::InvalidFilter(format!("window {a}..{b}")));
            }
        }
        Ok(())
    }
}

/// Per-product quantities the sample filter looks at.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductProfile {
    pub mean_sales_rank: f64,
    pub availability: f64,
    pub first_seen: NaiveDate,
    pub distinct_sellers: usize,
}

pub fn product_profiles(panel: &Panel, window: Option<(NaiveDate, NaiveDate)>) -> BTreeMap<String, ProductProfile> {
    let mut by_product: BTreeMap<&str, Vec<&PanelObservation>> = BTreeMap::new();
    for r in &panel.rows {
        by_product.entry(&r.product_id).or_default().push(r);
    }
    let span = window.or_else(|| {
        let lo = panel.rows.iter().map(|r| r.date).min()?;
        let hi = panel.rows.iter().map(|r| r.date).max()?;
        Some((lo, hi))
    });
    by_product
        .into_iter()
        .map(|(p, rows)| {
            let (lo, hi) = span.expect("non-empty panel");
            let in_window: Vec<&&PanelObservation> = rows.iter().filter(|r| r.date >= lo && r.date <= hi).collect();
            let window_days = (hi - lo).num_days() + 1;
            let mean_sales_rank = if in_window.is_empty() {
                f64::NAN
            } else {
                in_window.iter().map(|r| r.sales_rank as f64).sum::<f64>() / in_window.len() as f64
            };
            let sellers: BTreeSet<&str> = rows.iter().filter_map(|r| r.buybox_seller_id.as_deref()).collect();
            (
                p.to_string(),
                ProductProfile {
                    mean_sales_rank,
                    availability: in_window.len() as f64 / window_days as f64,
                    first_seen: rows.iter().map(|r| r.date).min().expect("non-empty"),
                    distinct_sellers: sellers.len(),
                },
            )
        })
        .collect()
}

/// Keeps the products that satisfy every criterion of `filter`.
pub fn filter_sample(panel: &Panel, filter: &SampleFilter) -> Result<Panel> {
    filter.validate()?;
    if panel.is_empty() {
        return Ok(panel.clone());
    }
    let profiles = product_profiles(panel, filter.window);
    let (lo, hi) = filter.sales_rank_range;
    let keep: BTreeSet<&str> = profiles
        .iter()
        .filter(|(_, p)| {
            p.mean_sales_rank >= lo
                && p.mean_sales_rank <= hi
                && p.availability >= filter.availability_min_share
                && filter.first_listed_before.is_none_or(|d| p.first_seen < d)
                && (!filter.require_buybox_variation || p.distinct_sellers >= 2)
        })
        .map(|(id, _)| id.as_str())
        .collect();
    let rows = panel
        .rows
        .iter()
        .filter(|r| keep.contains(r.product_id.as_str()))
        .cloned()
        .collect();
    Ok(panel.with_rows(rows))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonGroup {
    pub group_id: String,
    pub platform_product_id: String,
    pub substitute_product_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformProduct {
    pub product_id: String,
    /// Narrowest category node.
    pub category: String,
}

pub const MAX_SUBSTITUTES: usize = 5;

/// Forms one group per platform product from third-party candidates of the
/// same category, sampling `max_substitutes` uniformly when there are more.
///
/// Platform products are processed in id order and a candidate joins at most
/// one group. Returns the groups and the ids of platform products left
/// without candidates.
pub fn build_comparison_groups(
    platform_products: &[PlatformProduct],
    candidates: &BTreeMap<String, Vec<String>>,
    max_substitutes: usize,
    seed: u64,
) -> (Vec<ComparisonGroup>, Vec<String>) {
    let mut platform: Vec<&PlatformProduct> = platform_products.iter().collect();
    platform.sort_by(|a, b| a.product_id.cmp(&b.product_id));
    platform.dedup_by(|a, b| a.product_id == b.product_id);
    let platform_ids: BTreeSet<&str> = platform.iter().map(|p| p.product_id.as_str()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut groups = Vec::new();
    let mut omitted = Vec::new();
    for p in platform {
        let mut pool: Vec<&String> = candidates
            .get(&p.category)
            .map(|c| c.iter().collect())
            .unwrap_or_default();
        pool.sort();
        pool.dedup();
        pool.retain(|c| !used.contains(*c) && !platform_ids.contains(c.as_str()));
        if pool.is_empty() {
            log::warn!("no substitutes for platform product {}", p.product_id);
            omitted.push(p.product_id.clone());
            continue;
        }
        let chosen: Vec<String> = if pool.len() > max_substitutes {
            let mut idx = rand::seq::index::sample(&mut rng, pool.len(), max_substitutes).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pool[i].clone()).collect()
        } else {
            pool.into_iter().cloned().collect()
        };
        used.extend(chosen.iter().cloned());
        groups.push(ComparisonGroup {
            group_id: format!("grp-{}", p.product_id),
            platform_product_id: p.product_id.clone(),
            substitute_product_ids: chosen,
        });
    }
    (groups, omitted)
}

/// Tags member rows with their group id and drops rows of non-members.
pub fn assign_comparison_groups(panel: &Panel, groups: &[ComparisonGroup]) -> Panel {
    let mut member: HashMap<&str, &str> = HashMap::new();
    for g in groups {
        member.insert(&g.platform_product_id, &g.group_id);
        for s in &g.substitute_product_ids {
            member.insert(s, &g.group_id);
        }
    }
    let rows = panel
        .rows
        .iter()
        .filter_map(|r| {
            member.get(r.product_id.as_str()).map(|g| {
                let mut r = r.clone();
                r.comparison_group_id = Some(g.to_string());
                r
            })
        })
        .collect();
    panel.with_rows(rows)
}

/// Prefixes product ids (and group ids) with `market:` and records the market.
pub fn prefix_market(panel: &Panel, market: &str) -> Panel {
    let rows = panel
        .rows
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.product_id = format!("{market}:{}", r.product_id);
            r.comparison_group_id = r.comparison_group_id.map(|g| format!("{market}:{g}"));
            r.market = Some(market.to_string());
            r
        })
        .collect();
    Panel {
        rows,
        lag: panel.lag.clone(),
        markets: vec![market.to_string()],
    }
}

/// Concatenates panels with disjoint product ids.
pub fn pool_samples(panels: &[Panel]) -> Result<Panel> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for p in panels {
        let ids = p.product_ids();
        if let Some(c) = ids.iter().find(|id| seen.contains(*id)) {
            return Err(PanelError::IdCollision(c.to_string()));
        }
        seen.extend(ids);
    }
    let lag = panels.first().and_then(|p| p.lag.clone());
    if let Some(p) = panels.iter().find(|p| p.lag != lag) {
        return Err(PanelError::LagMismatch(format!("{:?} vs {:?}", lag, p.lag)));
    }
    let mut markets = BTreeSet::new();
    let mut rows = Vec::with_capacity(panels.iter().map(Panel::len).sum());
    for p in panels {
        markets.extend(p.markets.iter().cloned());
        rows.extend(p.rows.iter().cloned());
    }
    Ok(Panel {
        rows,
        lag,
        markets: markets.into_iter().collect(),
    })
}

/// Overwrites the seller rating of platform-held rows.
pub fn impute_platform_seller_rating(panel: &Panel, rating: f64) -> Panel {
    let mut out = panel.clone();
    for r in out.rows.iter_mut().filter(|r| r.is_amazon) {
        r.rating_seller = rating;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variable: String,
    /// `third_party`, `amazon` or `all`.
    pub group: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
    pub sd: f64,
}

/// Min, quartiles (type 7), mean, max and sample SD per variable, split by
/// the platform indicator.
pub fn summary_stats(panel: &Panel) -> Vec<SummaryRow> {
    let mut vars = vec![Variable::OrganicVisibility];
    if panel.rows.iter().any(|r| r.sponsored_visibility.is_some()) {
        vars.push(Variable::SponsoredVisibility);
    }
    vars.extend([
        Variable::SalesRank,
        Variable::Price,
        Variable::CountReviews,
        Variable::RatingProduct,
        Variable::RatingSeller,
        Variable::IsPrime,
    ]);
    let groups: [(&str, Option<bool>); 3] = [("third_party", Some(false)), ("amazon", Some(true)), ("all", None)];
    let mut out = Vec::new();
    for var in &vars {
        for (label, sel) in groups {
            let mut v: Vec<f64> = panel
                .rows
                .iter()
                .filter(|r| sel.is_none_or(|a| r.is_amazon == a))
                .filter_map(|r| var.value(r))
                .collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            out.push(SummaryRow {
                variable: var.name().to_string(),
                group: label.to_string(),
                n: v.len(),
                min: v[0],
                q1: stats::quantile_sorted(&v, 0.25),
                median: stats::quantile_sorted(&v, 0.5),
                mean: stats::mean(&v),
                q3: stats::quantile_sorted(&v, 0.75),
                max: v[v.len() - 1],
                sd: stats::sample_sd(&v),
            });
        }
    }
    out
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn obs(product: &str, day: u32) -> PanelObservation {
        PanelObservation {
            product_id: product.to_string(),
            date: NaiveDate::from_ymd_opt(2020, 6, day).unwrap(),
            organic_visibility: day as f64,
            sponsored_visibility: Some(1.0),
            sales_rank: 100 + day,
            price: 10.0 + day as f64,
            count_reviews: 50,
            rating_product: 4.5,
            rating_seller: 95.0,
            is_prime: true,
            is_amazon: false,
            buybox_seller_id: Some("s1".into()),
            comparison_group_id: None,
            market: Some("GER".into()),
            extra: BTreeMap::new(),
        }
    }

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 6, day).unwrap()
    }

    fn csv_of(panel: &Panel) -> String {
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn currency_conversion_applies_to_foreign_rows() {
        let mut a = obs("a", 1);
        a.price = 10.0;
        a.market = Some("UK".into());
        let text = csv_of(&Panel::new(vec![a]));
        let opts = IngestOptions {
            currency_rate: 1.1248,
            foreign_markets: vec!["UK".into()],
            ..IngestOptions::default()
        };
        let (p, rep) = read_observations(text.as_bytes(), &opts).unwrap();
        assert!((p.rows[0].price - 11.248).abs() < 1e-12);
        assert_eq!(rep.converted_rows, 1);
    }

    #[test]
    fn three_rows_roundtrip() {
        let panel = Panel::new(vec![obs("a", 1), obs("a", 2), obs("b", 1)]);
        let text = csv_of(&panel);
        let (back, rep) = read_observations(text.as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(rep.products, 2);
        assert_eq!(csv_of(&back), text);
    }

    #[test]
    fn out_of_range_rating_is_a_row_diagnostic() {
        let mut bad = obs("a", 2);
        bad.rating_product = 5.5;
        let text = csv_of(&Panel::new(vec![obs("a", 1), bad]));
        match read_observations(text.as_bytes(), &IngestOptions::default()) {
            Err(PanelError::Validation(d)) => {
                assert_eq!(d.len(), 1);
                assert_eq!(d[0].line, 3);
                assert!(d[0].message.contains("rating_product"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_keys_and_missing_columns_fail() {
        let text = csv_of(&Panel::new(vec![obs("a", 1), obs("a", 1)]));
        assert!(matches!(
            read_observations(text.as_bytes(), &IngestOptions::default()),
            Err(PanelError::Duplicate { .. })
        ));
        assert!(matches!(
            read_observations("product_id,date\n".as_bytes(), &IngestOptions::default()),
            Err(PanelError::MissingColumn(_))
        ));
    }

    #[test]
    fn platform_rows_get_imputed_seller_rating() {
        let mut a = obs("a", 1);
        a.is_amazon = true;
        let text = csv_of(&Panel::new(vec![a])).replace(",95,", ",,");
        let (p, _) = read_observations(text.as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(p.rows[0].rating_seller, 100.0);
    }

    #[test]
    fn gaps_are_reported() {
        let text = csv_of(&Panel::new(vec![obs("a", 1), obs("a", 4)]));
        let (_, rep) = read_observations(text.as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(rep.gaps.len(), 1);
        assert_eq!(rep.gaps[0].missing_days, 2);
    }

    #[test]
    fn lag_one_shifts_covariates() {
        let panel = Panel::new((1..=3).map(|t| obs("a", t)).collect());
        let lagged = lag_covariates(&panel, 1).unwrap();
        assert_eq!(lagged.len(), 2);
        assert_eq!(lagged.rows[0].date, d(2));
        assert_eq!(lagged.rows[0].organic_visibility, 2.0);
        assert_eq!(lagged.rows[0].sales_rank, 101);
        assert_eq!(lagged.rows[1].price, 12.0);
        assert_eq!(lagged.lag.as_ref().unwrap().days, 1);
    }

    #[test]
    fn lag_zero_is_identity() {
        let panel = Panel::new((1..=3).map(|t| obs("a", t)).collect());
        let lagged = lag_covariates(&panel, 0).unwrap();
        assert_eq!(lagged.rows, panel.rows);
    }

    #[test]
    fn lagged_seller_flip_attribution() {
        // Brute-force enumeration over a 10-day toy series.
        let rows: Vec<_> = (1..=10)
            .map(|t| {
                let mut o = obs("a", t);
                o.is_amazon = t >= 5;
                o.buybox_seller_id = Some(if t >= 5 { "AMZ" } else { "s1" }.into());
                o
            })
            .collect();
        let lagged = lag_covariates(&Panel::new(rows.clone()), 1).unwrap();
        for row in &lagged.rows {
            let src = rows.iter().find(|r| r.date + chrono::Days::new(1) == row.date).unwrap();
            assert_eq!(row.is_amazon, src.is_amazon);
        }
        let day6 = lagged.rows.iter().find(|r| r.date == d(6)).unwrap();
        assert!(day6.is_amazon);
        assert_eq!(day6.organic_visibility, 6.0);
        let day5 = lagged.rows.iter().find(|r| r.date == d(5)).unwrap();
        assert!(!day5.is_amazon);
    }

    #[test]
    fn oversized_lag_empties_panel() {
        let panel = Panel::new((1..=3).map(|t| obs("a", t)).collect());
        assert!(lag_covariates(&panel, 5).unwrap().is_empty());
    }

    #[test]
    fn lag_outcome_mismatch_is_rejected() {
        let panel = Panel::new((1..=3).map(|t| obs("a", t)).collect());
        let l = lag_covariates(&panel, 1).unwrap();
        assert!(lag_for_outcome(&l, 1, Variable::SalesRank).is_err());
    }

    #[test]
    fn filter_on_average_rank_and_variation() {
        let mut rows = Vec::new();
        for t in 1..=4 {
            let mut a = obs("a", t);
            a.sales_rank = 500;
            a.buybox_seller_id = Some(if t % 2 == 0 { "x" } else { "y" }.into());
            rows.push(a);
            let mut b = obs("b", t);
            b.sales_rank = 1500;
            rows.push(b);
            let mut c = obs("c", t);
            c.sales_rank = 10;
            rows.push(c);
        }
        let panel = Panel::new(rows);
        let range_only = SampleFilter {
            sales_rank_range: (1.0, 1000.0),
            ..SampleFilter::default()
        };
        let kept = filter_sample(&panel, &range_only).unwrap();
        assert_eq!(kept.product_ids(), ["a", "c"].into());
        let kept = filter_sample(&panel, &SampleFilter::best_selling()).unwrap();
        assert_eq!(kept.product_ids(), ["a"].into());
    }

    #[test]
    fn filter_on_availability() {
        let mut rows: Vec<_> = (1..=10).map(|t| obs("full", t)).collect();
        rows.extend((1..=4).map(|t| obs("sparse", t)));
        let panel = Panel::new(rows);
        let kept = filter_sample(&panel, &SampleFilter::private_label(None)).unwrap();
        assert_eq!(kept.product_ids(), ["full"].into());
        let bad = SampleFilter {
            availability_min_share: 1.5,
            ..SampleFilter::default()
        };
        assert!(filter_sample(&panel, &bad).is_err());
    }

    fn candidates(n: usize) -> BTreeMap<String, Vec<String>> {
        [("gloves".to_string(), (0..n).map(|i| format!("c{i}")).collect())].into()
    }

    #[test]
    fn comparison_groups_are_seeded() {
        let plat = vec![PlatformProduct {
            product_id: "amz1".into(),
            category: "gloves".into(),
        }];
        let (g1, _) = build_comparison_groups(&plat, &candidates(8), MAX_SUBSTITUTES, 7);
        let (g2, _) = build_comparison_groups(&plat, &candidates(8), MAX_SUBSTITUTES, 7);
        assert_eq!(g1, g2);
        assert_eq!(g1[0].substitute_product_ids.len(), 5);

        let mut reversed = candidates(8);
        reversed.get_mut("gloves").unwrap().reverse();
        let (g3, _) = build_comparison_groups(&plat, &reversed, MAX_SUBSTITUTES, 7);
        assert_eq!(g1, g3);

        let (small, _) = build_comparison_groups(&plat, &candidates(3), MAX_SUBSTITUTES, 7);
        assert_eq!(small[0].substitute_product_ids.len(), 3);
    }

    #[test]
    fn groups_never_share_products() {
        let plat: Vec<_> = ["a1", "a2", "a3"]
            .iter()
            .map(|p| PlatformProduct {
                product_id: p.to_string(),
                category: "gloves".into(),
            })
            .collect();
        let (groups, omitted) = build_comparison_groups(&plat, &candidates(7), MAX_SUBSTITUTES, 1);
        let all: Vec<&String> = groups.iter().flat_map(|g| &g.substitute_product_ids).collect();
        let unique: BTreeSet<_> = all.iter().collect();
        assert_eq!(all.len(), unique.len());
        assert_eq!(all.len(), 7);
        assert_eq!(omitted, vec!["a3".to_string()]);
    }

    #[test]
    fn pooling_checks_collisions() {
        let a = Panel::new(vec![obs("a", 1)]);
        let b = Panel::new(vec![obs("b", 1), obs("b", 2)]);
        assert_eq!(pool_samples(&[a.clone(), b.clone()]).unwrap().len(), 3);
        assert_eq!(pool_samples(std::slice::from_ref(&a)).unwrap().rows, a.rows);
        assert!(matches!(
            pool_samples(&[a.clone(), a.clone()]),
            Err(PanelError::IdCollision(_))
        ));
        let pa = prefix_market(&a, "GER");
        let pb = prefix_market(&a, "FR");
        let pooled = pool_samples(&[pa, pb]).unwrap();
        assert_eq!(pooled.markets, vec!["FR".to_string(), "GER".to_string()]);
    }

    #[test]
    fn pooled_row_counts_add_up() {
        assert_eq!(87_488 + 86_678 + 96_316, 270_482);
    }

    #[test]
    fn summary_of_constant_and_small_columns() {
        let rows: Vec<_> = (1..=4).map(|t| obs("a", t)).collect();
        let s = summary_stats(&Panel::new(rows));
        let vis = s
            .iter()
            .find(|r| r.variable == "organic_visibility" && r.group == "all")
            .unwrap();
        assert_eq!(vis.median, 2.5);
        assert_eq!(vis.mean, 2.5);
        let rating = s
            .iter()
            .find(|r| r.variable == "rating_product" && r.group == "all")
            .unwrap();
        assert_eq!(rating.sd, 0.0);
        assert_eq!(rating.min, rating.max);
        assert_eq!(rating.q1, rating.q3);
        assert!(!s.iter().any(|r| r.group == "amazon"));
    }

    #[test]
    fn key_digest_ignores_row_order() {
        let a = Panel::new(vec![obs("a", 1), obs("b", 2)]);
        let b = Panel::new(vec![obs("b", 2), obs("a", 1)]);
        assert_eq!(a.key_digest(), b.key_digest());
    }
}
