//! Platform-wide search visibility.
//!
//! Keyword-rank observations are turned into an offer-level visibility share
//! in four stages:
//!
//! 1. raw keyword visibility `V_kit = N_kt * f(rank_kit)`;
//! 2. the query volume `N_kt` is replaced by its trailing seasonal mean
//!    `N̄_kt` over the last `cycle_length` days, giving `VI_kit`;
//! 3. keyword values are summed per offer and day (`V_it`, `VI_it`), with
//!    offers missing from a keyword's results contributing zero;
//! 4. `VI_it` is divided by the day's total and multiplied by a display
//!    scale (one million by default).
//!
//! All reductions walk keywords and offers in sorted order so that results
//! do not depend on input order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default length of the seasonal cycle for daily data (one year).
pub const DEFAULT_CYCLE_LENGTH: usize = 365;

/// Default multiplier applied to visibility shares.
pub const DEFAULT_SCALE: f64 = 1_000_000.0;

#[derive(Debug, Error)]
pub enum VisibilityError {
    #[error("invalid record for keyword {keyword} / offer {offer}: {reason}")]
    InvalidRecord {
        keyword: String,
        offer: String,
        reason: String,
    },
    #[error("invalid click-probability curve: {0}")]
    InvalidCurve(String),
    #[error("duplicate record for keyword {keyword}, offer {offer} on {day}")]
    DuplicateRecord {
        keyword: String,
        offer: String,
        day: NaiveDate,
    },
    #[error("keyword {keyword} has conflicting query volumes on {day}: {a} vs {b}")]
    InconsistentVolume {
        keyword: String,
        day: NaiveDate,
        a: f64,
        b: f64,
    },
    #[error("seasonal window is empty")]
    EmptyWindow,
    #[error("total visibility is zero on {0}; shares are undefined")]
    ZeroTotal(String),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VisibilityError>;

/// One observed position of an offer in the organic results for a keyword.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRankRecord {
    pub keyword_id: String,
    pub day: NaiveDate,
    pub offer_id: String,
    pub rank: u32,
    /// Searches for the keyword on `day`.
    pub query_volume: f64,
}

impl KeywordRankRecord {
    pub fn new(
        keyword_id: impl Into<String>,
        day: NaiveDate,
        offer_id: impl Into<String>,
        rank: u32,
        query_volume: f64,
    ) -> Self {
        Self {
            keyword_id: keyword_id.into(),
            day,
            offer_id: offer_id.into(),
            rank,
            query_volume,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reason = if self.rank == 0 {
            Some("rank must be at least 1".to_string())
        } else if !self.query_volume.is_finite() || self.query_volume < 0.0 {
            Some(format!(
                "query volume must be finite and non-negative, got {}",
                self.query_volume
            ))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(VisibilityError::InvalidRecord {
                keyword: self.keyword_id.clone(),
                offer: self.offer_id.clone(),
                reason,
            }),
            None => Ok(()),
        }
    }
}

/// Expected click probability by organic rank.
///
/// `probs[r - 1]` is the probability for rank `r`; ranks past the end of
/// the table have probability zero. Probabilities lie in `[0, 1]` and never
/// increase with rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcpCurve {
    probs: Vec<f64>,
}

impl EcpCurve {
    /// Builds a curve from probabilities for ranks `1..=probs.len()`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(VisibilityError::InvalidCurve("curve has no entries".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(VisibilityError::InvalidCurve(format!(
                    "probability {p} at rank {} is outside [0, 1]",
                    i + 1
                )));
            }
            if i > 0 && p > probs[i - 1] {
                return Err(VisibilityError::InvalidCurve(format!(
                    "probability increases from rank {} ({}) to rank {} ({p})",
                    i,
                    probs[i - 1],
                    i + 1
                )));
            }
        }
        Ok(Self { probs })
    }

    /// Builds a curve from `(rank, probability)` pairs in any order. Ranks
    /// must cover `1..=n` without gaps.
    pub fn from_entries(entries: &[(u32, f64)]) -> Result<Self> {
        let mut sorted = entries.to_vec();
        sorted.sort_by_key(|&(r, _)| r);
        for (i, &(rank, _)) in sorted.iter().enumerate() {
            if rank as usize != i + 1 {
                return Err(VisibilityError::InvalidCurve(format!(
                    "ranks must be contiguous from 1; found rank {rank} at position {}",
                    i + 1
                )));
            }
        }
        Self::new(sorted.into_iter().map(|(_, p)| p).collect())
    }

    /// `first * decay^(rank - 1)` for ranks `1..=max_rank`.
    pub fn geometric(first: f64, decay: f64, max_rank: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(VisibilityError::InvalidCurve(format!("decay {decay} outside [0, 1]")));
        }
        let probs = (0..max_rank).map(|r| first * decay.powi(r as i32)).collect();
        Self::new(probs)
    }

    pub fn click_probability(&self, rank: u32) -> f64 {
        if rank == 0 {
            return 0.0;
        }
        self.probs.get(rank as usize - 1).copied().unwrap_or(0.0)
    }

    pub fn max_rank(&self) -> u32 {
        self.probs.len() as u32
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.probs.iter().enumerate().map(|(i, &p)| (i as u32 + 1, p))
    }

    /// Reads an `ecp.csv` table with header `rank,click_prob`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            rank: u32,
            click_prob: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut entries = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            entries.push((row.rank, row.click_prob));
        }
        Self::from_entries(&entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }
}

impl Default for EcpCurve {
    /// 30% click probability at rank 1 decaying by 20% per position over
    /// the first 100 ranks.
    fn default() -> Self {
        Self::geometric(0.30, 0.80, 100).expect("default curve is valid")
    }
}

/// A base curve plus optional curves for classes of keywords.
#[derive(Debug, Clone, Default)]
pub struct EcpCurves {
    pub base: EcpCurve,
    pub by_class: BTreeMap<String, EcpCurve>,
    pub keyword_class: HashMap<String, String>,
}

impl EcpCurves {
    pub fn single(curve: EcpCurve) -> Self {
        Self {
            base: curve,
            ..Self::default()
        }
    }

    pub fn with_class(mut self, class: impl Into<String>, curve: EcpCurve) -> Self {
        self.by_class.insert(class.into(), curve);
        self
    }

    pub fn assign(mut self, keyword: impl Into<String>, class: impl Into<String>) -> Self {
        self.keyword_class.insert(keyword.into(), class.into());
        self
    }

    pub fn curve_for(&self, keyword: &str) -> &EcpCurve {
        self.keyword_class
            .get(keyword)
            .and_then(|c| self.by_class.get(c))
            .unwrap_or(&self.base)
    }
}

/// `N_kt * f(rank)`.
pub fn raw_keyword_visibility(record: &KeywordRankRecord, curve: &EcpCurve) -> Result<f64> {
    record.validate()?;
    Ok(record.query_volume * curve.click_probability(record.rank))
}

/// Mean of `volumes[focal + 1 - cycle_length ..= focal]`, truncated at the
/// start of the series when fewer than `cycle_length` days are available.
pub fn seasonal_volume_at(volumes: &[f64], focal: usize, cycle_length: usize) -> Result<f64> {
    if cycle_length == 0 || focal >= volumes.len() {
        return Err(VisibilityError::EmptyWindow);
    }
    let start = (focal + 1).saturating_sub(cycle_length);
    let window = &volumes[start..=focal];
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

/// Trailing seasonal mean for every day of a contiguous daily series.
pub fn seasonal_volume(volumes: &[f64], cycle_length: usize) -> Result<Vec<f64>> {
    if volumes.is_empty() {
        return Err(VisibilityError::EmptyWindow);
    }
    (0..volumes.len())
        .map(|t| seasonal_volume_at(volumes, t, cycle_length))
        .collect()
}

/// `N̄_kt * f(rank)`.
pub fn keyword_visibility_index(record: &KeywordRankRecord, seasonal: f64, curve: &EcpCurve) -> Result<f64> {
    record.validate()?;
    if !seasonal.is_finite() || seasonal < 0.0 {
        return Err(VisibilityError::InvalidRecord {
            keyword: record.keyword_id.clone(),
            offer: record.offer_id.clone(),
            reason: format!("seasonal volume must be non-negative, got {seasonal}"),
        });
    }
    Ok(seasonal * curve.click_probability(record.rank))
}

/// Sum of keyword-level values for one offer and day.
pub fn aggregate_visibility(values: &[f64]) -> f64 {
    values.iter().sum()
}

/// Each offer's share of the period total, multiplied by `scale`.
pub fn relative_visibility(per_offer: &BTreeMap<String, f64>, scale: f64) -> Result<BTreeMap<String, f64>> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(VisibilityError::InvalidScale(scale));
    }
    let total: f64 = per_offer.values().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(VisibilityError::ZeroTotal(format!(
            "a period with {} offers",
            per_offer.len()
        )));
    }
    Ok(per_offer
        .iter()
        .map(|(offer, &vi)| (offer.clone(), vi / total * scale))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityOptions {
    pub cycle_length: usize,
    pub scale: f64,
}

impl Default for VisibilityOptions {
    fn default() -> Self {
        Self {
            cycle_length: DEFAULT_CYCLE_LENGTH,
            scale: DEFAULT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalVolume {
    pub keyword_id: String,
    pub day: NaiveDate,
    pub volume: f64,
    pub seasonal: f64,
    /// Days with an observed volume inside the trailing window.
    pub window_days: usize,
    /// Whether the window reached back before the keyword's first day.
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordOfferVisibility {
    pub keyword_id: String,
    pub offer_id: String,
    pub day: NaiveDate,
    pub raw: f64,
    pub index: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferVisibility {
    pub offer_id: String,
    pub day: NaiveDate,
    pub raw: f64,
    pub index: f64,
    pub relative: f64,
}

/// Output of [`compute_visibility`]. Rows are sorted by day, then offer
/// (and keyword for keyword-level rows).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisibilityTable {
    pub options: VisibilityOptions,
    pub offers: Vec<OfferVisibility>,
    pub keywords: Vec<KeywordOfferVisibility>,
    pub seasonal: Vec<SeasonalVolume>,
    /// Keyword-days whose seasonal mean used a shortened window.
    pub partial_windows: usize,
}

impl VisibilityTable {
    pub fn offer(&self, offer_id: &str, day: NaiveDate) -> Option<&OfferVisibility> {
        self.offers.iter().find(|o| o.offer_id == offer_id && o.day == day)
    }

    /// Writes `visibility.csv` (`offer_id,date,relative_visibility`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["offer_id", "date", "relative_visibility"])?;
        for o in &self.offers {
            wtr.write_record([o.offer_id.as_str(), &o.day.to_string(), &format!("{}", o.relative)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Computes raw, seasonal and relative visibility for every offer and day.
pub fn compute_visibility(
    records: &[KeywordRankRecord],
    curves: &EcpCurves,
    options: VisibilityOptions,
) -> Result<VisibilityTable> {
    if options.cycle_length == 0 {
        return Err(VisibilityError::EmptyWindow);
    }
    if !options.scale.is_finite() || options.scale <= 0.0 {
        return Err(VisibilityError::InvalidScale(options.scale));
    }

    // (keyword, day) -> volume, (keyword, day, offer) -> rank
    let mut volumes: BTreeMap<(&str, NaiveDate), f64> = BTreeMap::new();
    let mut ranks: BTreeMap<(NaiveDate, &str, &str), u32> = BTreeMap::new();
    for rec in records {
        rec.validate()?;
        let key = (rec.keyword_id.as_str(), rec.day);
        match volumes.get(&key) {
            Some(&v) if v != rec.query_volume => {
                return Err(VisibilityError::InconsistentVolume {
                    keyword: rec.keyword_id.clone(),
                    day: rec.day,
                    a: v,
                    b: rec.query_volume,
                })
            }
            _ => {
                volumes.insert(key, rec.query_volume);
            }
        }
        let rkey = (rec.day, rec.keyword_id.as_str(), rec.offer_id.as_str());
        if ranks.insert(rkey, rec.rank).is_some() {
            return Err(VisibilityError::DuplicateRecord {
                keyword: rec.keyword_id.clone(),
                offer: rec.offer_id.clone(),
                day: rec.day,
            });
        }
    }

    // Seasonal means over calendar-day windows, per keyword.
    let mut seasonal_rows = Vec::with_capacity(volumes.len());
    let mut seasonal: HashMap<(&str, NaiveDate), f64> = HashMap::with_capacity(volumes.len());
    let mut partial_windows = 0;
    let keywords: BTreeSet<&str> = volumes.keys().map(|(k, _)| *k).collect();
    for kw in keywords {
        let series: Vec<(NaiveDate, f64)> = volumes
            .range((kw, NaiveDate::MIN)..=(kw, NaiveDate::MAX))
            .map(|(&(_, d), &v)| (d, v))
            .collect();
        let first_day = series[0].0;
        let mut start = 0;
        for (end, &(day, volume)) in series.iter().enumerate() {
            let oldest = day - chrono::Days::new(options.cycle_length as u64 - 1);
            while series[start].0 < oldest {
                start += 1;
            }
            // Summed afresh per window; a running sum would drift.
            let window = &series[start..=end];
            let mean = window.iter().map(|(_, v)| v).sum::<f64>() / window.len() as f64;
            let partial = oldest < first_day;
            if partial {
                partial_windows += 1;
            }
            seasonal.insert((kw, day), mean);
            seasonal_rows.push(SeasonalVolume {
                keyword_id: kw.to_string(),
                day,
                volume,
                seasonal: mean,
                window_days: window.len(),
                partial,
            });
        }
    }
    seasonal_rows.sort_by(|a, b| (a.day, &a.keyword_id).cmp(&(b.day, &b.keyword_id)));

    // Keyword-level values, then per-offer sums in (day, offer, keyword) order.
    let mut keyword_rows = Vec::with_capacity(ranks.len());
    for (&(day, kw, offer), &rank) in &ranks {
        let f = curves.curve_for(kw).click_probability(rank);
        keyword_rows.push(KeywordOfferVisibility {
            keyword_id: kw.to_string(),
            offer_id: offer.to_string(),
            day,
            raw: volumes[&(kw, day)] * f,
            index: seasonal[&(kw, day)] * f,
        });
    }
    keyword_rows.sort_by(|a, b| (a.day, &a.offer_id, &a.keyword_id).cmp(&(b.day, &b.offer_id, &b.keyword_id)));

    let mut offers = Vec::new();
    let mut i = 0;
    while i < keyword_rows.len() {
        let day = keyword_rows[i].day;
        let mut day_offers: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        while i < keyword_rows.len() && keyword_rows[i].day == day {
            let offer = &keyword_rows[i].offer_id;
            let mut j = i;
            let mut raw = Vec::new();
            let mut index = Vec::new();
            while j < keyword_rows.len() && keyword_rows[j].day == day && &keyword_rows[j].offer_id == offer {
                raw.push(keyword_rows[j].raw);
                index.push(keyword_rows[j].index);
                j += 1;
            }
            day_offers.insert(
                offer.clone(),
                (aggregate_visibility(&raw), aggregate_visibility(&index)),
            );
            i = j;
        }
        let vi: BTreeMap<String, f64> = day_offers.iter().map(|(o, &(_, idx))| (o.clone(), idx)).collect();
        let shares = relative_visibility(&vi, options.scale).map_err(|e| match e {
            VisibilityError::ZeroTotal(_) => VisibilityError::ZeroTotal(day.to_string()),
            other => other,
        })?;
        for (offer, (raw, index)) in day_offers {
            let relative = shares[&offer];
            offers.push(OfferVisibility {
                offer_id: offer,
                day,
                raw,
                index,
                relative,
            });
        }
    }

    Ok(VisibilityTable {
        options,
        offers,
        keywords: keyword_rows,
        seasonal: seasonal_rows,
        partial_windows,
    })
}

/// Parses `YYYY-MM-DD` or an ISO-8601 timestamp.
fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

/// Reads `keyword_ranks.csv` (`keyword_id,date,offer_id,rank,query_volume`).
///
/// When a `(keyword, day, offer)` triple is observed several times within a
/// day, the last observation of the day wins, and the keyword's volume for
/// that day is taken from its latest snapshot.
pub fn read_keyword_ranks<R: Read>(reader: R) -> Result<Vec<KeywordRankRecord>> {
    #[derive(Deserialize)]
    struct Row {
        keyword_id: String,
        date: String,
        offer_id: String,
        rank: u32,
        query_volume: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut latest: BTreeMap<(String, NaiveDate, String), (NaiveDateTime, u32, f64)> = BTreeMap::new();
    let mut day_volume: BTreeMap<(String, NaiveDate), (NaiveDateTime, f64)> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        let ts = parse_timestamp(&row.date).ok_or_else(|| VisibilityError::Parse {
            line,
            message: format!("unrecognised date '{}'", row.date),
        })?;
        let day = ts.date();
        let rec = KeywordRankRecord::new(&row.keyword_id, day, &row.offer_id, row.rank, row.query_volume);
        rec.validate()?;

        let key = (row.keyword_id.clone(), day, row.offer_id.clone());
        match latest.get(&key) {
            Some(&(prev, _, _)) if prev == ts => {
                return Err(VisibilityError::DuplicateRecord {
                    keyword: row.keyword_id,
                    offer: row.offer_id,
                    day,
                })
            }
            Some(&(prev, _, _)) if prev > ts => {}
            _ => {
                latest.insert(key, (ts, row.rank, row.query_volume));
            }
        }
        let vkey = (row.keyword_id.clone(), day);
        match day_volume.get(&vkey) {
            Some(&(prev, v)) if prev == ts && v != row.query_volume => {
                return Err(VisibilityError::InconsistentVolume {
                    keyword: row.keyword_id,
                    day,
                    a: v,
                    b: row.query_volume,
                })
            }
            Some(&(prev, _)) if prev >= ts => {}
            _ => {
                day_volume.insert(vkey, (ts, row.query_volume));
            }
        }
    }
    Ok(latest
        .into_iter()
        .map(|((kw, day, offer), (_, rank, _))| {
            let volume = day_volume[&(kw.clone(), day)].1;
            KeywordRankRecord::new(kw, day, offer, rank, volume)
        })
        .collect())
}

pub fn load_keyword_ranks(path: impl AsRef<Path>) -> Result<Vec<KeywordRankRecord>> {
    read_keyword_ranks(std::fs::File::open(path)?)
}
