//! Synthetic marketplace panels with known self-preferencing, the
//! omitted-variable injection and Monte Carlo studies.
//!
//! Mean visibility follows the estimated model exactly:
//!
//! ```text
//! E[V_it] = exp(c + δ·isAmazon + β'x + α_i + γ_t)
//! ```
//!
//! with the regressors taken `covariate_lag` days earlier, so that the
//! lagged panel is correctly specified. Each product draws from its own
//! ChaCha stream, which keeps generation reproducible and lets products be
//! generated in any order.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fe_glm::{FixedEffect, ModelSpec, DEFAULT_Z};
use crate::panel::{lag_covariates, Panel, PanelObservation};
use crate::sp_tests::coo_test;
use crate::stats;

pub const PLATFORM_SELLER: &str = "amazon";

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SimulationError>;

/// True slopes of the unprotected attributes. Defaults follow the pooled
/// best-selling estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Betas {
    pub ln_sales_rank: f64,
    pub ln_price: f64,
    pub ln_count_reviews: f64,
    pub rating_product: f64,
    pub rating_seller: f64,
    pub is_prime: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Betas {
            ln_sales_rank: -0.120,
            ln_price: -0.368,
            ln_count_reviews: 0.033,
            rating_product: 0.104,
            rating_seller: 0.0,
            is_prime: 0.029,
        }
    }
}

impl Betas {
    pub fn named(&self) -> BTreeMap<String, f64> {
        [
            ("ln_sales_rank", self.ln_sales_rank),
            ("ln_price", self.ln_price),
            ("ln_count_reviews", self.ln_count_reviews),
            ("rating_product", self.rating_product),
            ("rating_seller", self.rating_seller),
            ("is_prime", self.is_prime),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// How products and the platform indicator are arranged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StudyDesign {
    /// Sellers compete for the buy box of each product; the indicator varies
    /// within product.
    BuyBox,
    /// Groups of one platform private label and `substitutes` third-party
    /// products; the indicator is fixed per product.
    PrivateLabel { substitutes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SalesRankProcess {
    /// AR(1) in logs around a product-specific mean.
    Autoregressive { rho: f64, sd: f64 },
    /// Rank responds to lagged visibility net of any platform bias, sponsored
    /// visibility and price.
    DemandDriven {
        visibility_elasticity: f64,
        sponsored_elasticity: f64,
        price_elasticity: f64,
        noise_cv: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub seed: Option<u64>,
    pub n_products: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub delta_true: f64,
    pub betas: Betas,
    pub design: StudyDesign,
    pub sales_rank: SalesRankProcess,
    /// Log-scale intercept of mean visibility.
    pub visibility_offset: f64,
    pub unit_effect_sd: f64,
    pub date_effect_sd: f64,
    /// Coefficient of variation of the multiplicative gamma noise.
    pub visibility_noise_cv: f64,
    pub covariate_lag: u32,
    /// Bounds of the product-mean sales rank.
    pub sales_rank_range: (f64, f64),
    pub price_median: f64,
    pub price_dispersion: f64,
    /// Daily SD of log price changes.
    pub price_volatility: f64,
    pub max_review_rate: f64,
    pub amazon_share: f64,
    pub sellers_per_product: usize,
    pub mean_holding_days: f64,
    pub third_party_prime_prob: f64,
    pub platform_seller_rating: f64,
    pub sponsored_sd: f64,
    pub omitted_multiplier: f64,
    pub omitted_noise_sd: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            seed: None,
            n_products: 500,
            n_days: 200,
            start_date: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            delta_true: 0.0,
            betas: Betas::default(),
            design: StudyDesign::BuyBox,
            sales_rank: SalesRankProcess::Autoregressive { rho: 0.9, sd: 0.2 },
            visibility_offset: 0.0,
            unit_effect_sd: 1.0,
            date_effect_sd: 0.2,
            visibility_noise_cv: 0.5,
            covariate_lag: 1,
            sales_rank_range: (20.0, 800.0),
            price_median: 25.0,
            price_dispersion: 0.8,
            price_volatility: 0.02,
            max_review_rate: 3.0,
            amazon_share: 0.5,
            sellers_per_product: 3,
            mean_holding_days: 10.0,
            third_party_prime_prob: 0.6,
            platform_seller_rating: 100.0,
            sponsored_sd: 0.5,
            omitted_multiplier: 15.0,
            omitted_noise_sd: 1.0,
        }
    }
}

impl SimulationConfig {
    pub fn with_seed(seed: u64) -> Self {
        SimulationConfig {
            seed: Some(seed),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<u64> {
        let bad = |m: &str| Err(SimulationError::Config(m.to_string()));
        let Some(seed) = self.seed else {
            return bad("a seed is required");
        };
        if self.n_products < 2 || self.n_days < 2 {
            return bad("need at least two products and two days");
        }
        if !(self.visibility_noise_cv > 0.0) {
            return bad("visibility_noise_cv must be positive");
        }
        if !(self.mean_holding_days >= 1.0) {
            return bad("mean_holding_days must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.amazon_share) || !(0.0..=1.0).contains(&self.third_party_prime_prob) {
            return bad("shares and probabilities must lie in [0, 1]");
        }
        if !(self.sales_rank_range.0 >= 1.0 && self.sales_rank_range.0 <= self.sales_rank_range.1) {
            return bad("sales_rank_range must satisfy 1 <= min <= max");
        }
        if !(0.0..=100.0).contains(&self.platform_seller_rating) {
            return bad("platform_seller_rating must lie in [0, 100]");
        }
        match self.design {
            StudyDesign::BuyBox if self.sellers_per_product < 2 => {
                return bad("buy-box design needs at least two sellers per product")
            }
            StudyDesign::PrivateLabel { substitutes: 0 } => {
                return bad("private-label design needs at least one substitute")
            }
            _ => {}
        }
        if let SalesRankProcess::DemandDriven { noise_cv, .. } = self.sales_rank {
            if self.covariate_lag == 0 {
                return bad("demand-driven sales rank needs covariate_lag >= 1");
            }
            if !(noise_cv > 0.0) {
                return bad("sales-rank noise_cv must be positive");
            }
        }
        if (self.covariate_lag as usize) >= self.n_days {
            return bad("covariate_lag must be shorter than the panel");
        }
        Ok(seed)
    }

    /// Fixed effect that identifies the platform coefficient under this design.
    pub fn unit_effect(&self) -> FixedEffect {
        match self.design {
            StudyDesign::BuyBox => FixedEffect::Product,
            StudyDesign::PrivateLabel { .. } => FixedEffect::ComparisonGroup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub delta_true: f64,
    pub betas: BTreeMap<String, f64>,
    pub visibility_offset: f64,
    pub covariate_lag: u32,
    pub alpha: BTreeMap<String, f64>,
    pub gamma: Vec<f64>,
    /// Log mean visibility of each panel row, in row order. The covariate
    /// trajectories are the panel's own columns.
    pub eta: Vec<f64>,
}

struct Seller {
    id: String,
    prime: bool,
    rating: f64,
}

fn gamma_noise(cv: f64) -> Gamma<f64> {
    let shape = 1.0 / (cv * cv);
    Gamma::new(shape, 1.0 / shape).expect("positive shape")
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Product-level draws shared by all its days.
struct ProductSpec {
    id: String,
    group: Option<usize>,
    alpha: f64,
    sellers: Vec<Seller>,
}

/// Generates a panel and the parameters it was drawn from.
pub fn simulate_panel(config: &SimulationConfig) -> Result<(Panel, GroundTruth)> {
    let seed = config.validate()?;
    let mut global = stream(seed, 0);
    let n_days = config.n_days;
    let date_sd = Normal::new(0.0, config.date_effect_sd.max(0.0)).expect("finite sd");
    let gamma: Vec<f64> = (0..n_days).map(|_| date_sd.sample(&mut global)).collect();
    let unit_sd = Normal::new(0.0, config.unit_effect_sd.max(0.0)).expect("finite sd");
    let group_size = match config.design {
        StudyDesign::PrivateLabel { substitutes } => substitutes + 1,
        StudyDesign::BuyBox => 1,
    };
    let n_groups = config.n_products.div_ceil(group_size);
    let group_alpha: Vec<f64> = (0..n_groups).map(|_| unit_sd.sample(&mut global)).collect();

    let products: Vec<(ProductSpec, Vec<PanelObservation>, Vec<f64>)> = (0..config.n_products)
        .map(|p| simulate_product(config, seed, p, &gamma, &group_alpha, group_size))
        .collect();

    let mut rows = Vec::with_capacity(config.n_products * n_days);
    let mut eta = Vec::with_capacity(config.n_products * n_days);
    let mut alpha = BTreeMap::new();
    for (spec, r, e) in products {
        alpha.insert(spec.id, spec.alpha);
        rows.extend(r);
        eta.extend(e);
    }
    let truth = GroundTruth {
        delta_true: config.delta_true,
        betas: config.betas.named(),
        visibility_offset: config.visibility_offset,
        covariate_lag: config.covariate_lag,
        alpha,
        gamma,
        eta,
    };
    Ok((Panel::new(rows), truth))
}

fn product_spec(
    config: &SimulationConfig,
    rng: &mut ChaCha8Rng,
    p: usize,
    group_alpha: &[f64],
    group_size: usize,
) -> ProductSpec {
    let id = format!("P{p:05}");
    let third_party = |rng: &mut ChaCha8Rng, j: usize| Seller {
        id: format!("S{p:05}-{j}"),
        prime: rng.random_bool(config.third_party_prime_prob),
        rating: rng.random_range(80.0..=100.0),
    };
    let platform = || Seller {
        id: PLATFORM_SELLER.to_string(),
        prime: true,
        rating: config.platform_seller_rating,
    };
    match config.design {
        StudyDesign::BuyBox => {
            let with_platform = rng.random_bool(config.amazon_share);
            let sellers = (0..config.sellers_per_product)
                .map(|j| {
                    if j == 0 && with_platform {
                        platform()
                    } else {
                        third_party(rng, j)
                    }
                })
                .collect();
            let alpha = Normal::new(0.0, config.unit_effect_sd.max(0.0))
                .expect("finite sd")
                .sample(rng);
            ProductSpec {
                id,
                group: None,
                alpha,
                sellers,
            }
        }
        StudyDesign::PrivateLabel { .. } => {
            let g = p / group_size;
            let seller = if p.is_multiple_of(group_size) {
                platform()
            } else {
                third_party(rng, 0)
            };
            let within: f64 = Normal::new(0.0, 0.3).expect("finite sd").sample(rng);
            ProductSpec {
                id,
                group: Some(g),
                alpha: group_alpha[g] + within,
                sellers: vec![seller],
            }
        }
    }
}

fn simulate_product(
    config: &SimulationConfig,
    seed: u64,
    p: usize,
    gamma: &[f64],
    group_alpha: &[f64],
    group_size: usize,
) -> (ProductSpec, Vec<PanelObservation>, Vec<f64>) {
    let mut rng = stream(seed, p as u64 + 1);
    let spec = product_spec(config, &mut rng, p, group_alpha, group_size);
    let n = config.n_days;
    let lag = config.covariate_lag as usize;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = gamma_noise(config.visibility_noise_cv);

    // Seller holding the buy box each day.
    let switch_prob = 1.0 / config.mean_holding_days;
    let mut holder = Vec::with_capacity(n);
    let mut h = rng.random_range(0..spec.sellers.len());
    for _ in 0..n {
        holder.push(h);
        if spec.sellers.len() > 1 && rng.random_bool(switch_prob) {
            let next = rng.random_range(0..spec.sellers.len() - 1);
            h = if next >= h { next + 1 } else { next };
        }
    }

    let (lo, hi) = config.sales_rank_range;
    let rank_mean = rng.random_range(lo.ln()..=hi.ln());
    let mut price = Vec::with_capacity(n);
    let mut lp = config.price_median.ln() + config.price_dispersion * std.sample(&mut rng);
    let mut reviews = Vec::with_capacity(n);
    let mut c = (200f64.ln() + std.sample(&mut rng)).exp().round().max(1.0);
    let review_rate: f64 = rng.random_range(0.0..config.max_review_rate.max(1e-9));
    let reviews_step = Poisson::new(review_rate.max(1e-9)).expect("positive rate");
    let mut rating = Vec::with_capacity(n);
    let mut r: f64 = rng.random_range(3.5..4.9);
    for _ in 0..n {
        price.push(lp.exp());
        lp += config.price_volatility * std.sample(&mut rng);
        reviews.push(c as u32);
        c += reviews_step.sample(&mut rng);
        rating.push(r);
        r = (r + 0.01 * std.sample(&mut rng)).clamp(1.0, 5.0);
    }
    let alpha_s = 0.5 * spec.alpha + 0.5 * std.sample(&mut rng);
    let sponsored: Vec<f64> = (0..n)
        .map(|_| (config.visibility_offset + alpha_s + config.sponsored_sd * std.sample(&mut rng)).exp())
        .collect();

    let b = &config.betas;
    let mut rank = vec![0u32; n];
    let mut visibility = vec![0.0f64; n];
    let mut eta = vec![0.0; n];
    let mut log_rank = rank_mean;
    let to_rank = |v: f64| v.round().clamp(1.0, u32::MAX as f64) as u32;
    for t in 0..n {
        let s = t.saturating_sub(lag);
        match config.sales_rank {
            SalesRankProcess::Autoregressive { rho, sd } => {
                if t > 0 {
                    log_rank = rank_mean + rho * (log_rank - rank_mean) + sd * std.sample(&mut rng);
                }
                rank[t] = to_rank(log_rank.exp());
            }
            SalesRankProcess::DemandDriven {
                visibility_elasticity,
                sponsored_elasticity,
                price_elasticity,
                noise_cv,
            } => {
                let mut lr = rank_mean + price_elasticity * (price[s] / config.price_median).ln();
                if t >= lag {
                    let amazon = spec.sellers[holder[s]].id == PLATFORM_SELLER;
                    // Visibility consumers would have seen without any bias.
                    let deserved = visibility[s].max(1e-12).ln() - config.delta_true * f64::from(amazon as u8);
                    lr -= visibility_elasticity * (deserved - config.visibility_offset - spec.alpha);
                    lr -= sponsored_elasticity * (sponsored[s].ln() - config.visibility_offset - alpha_s);
                }
                let draw = gamma_noise(noise_cv).sample(&mut rng);
                rank[t] = to_rank(lr.exp() * draw);
            }
        }
        let seller = &spec.sellers[holder[s]];
        let amazon = seller.id == PLATFORM_SELLER;
        let e = config.visibility_offset
            + config.delta_true * f64::from(amazon as u8)
            + b.ln_sales_rank * f64::from(rank[s]).ln()
            + b.ln_price * price[s].ln()
            + b.ln_count_reviews * f64::from(reviews[s]).ln()
            + b.rating_product * rating[s]
            + b.rating_seller * seller.rating
            + b.is_prime * f64::from(seller.prime as u8)
            + spec.alpha
            + gamma[t];
        eta[t] = e;
        visibility[t] = e.exp() * noise.sample(&mut rng);
    }

    let group_id = spec.group.map(|g| format!("grp-{g:04}"));
    let rows = (0..n)
        .map(|t| {
            let seller = &spec.sellers[holder[t]];
            PanelObservation {
                product_id: spec.id.clone(),
                date: config.start_date + Days::new(t as u64),
                organic_visibility: visibility[t],
                sponsored_visibility: Some(sponsored[t]),
                sales_rank: rank[t],
                price: price[t],
                count_reviews: reviews[t],
                rating_product: rating[t],
                rating_seller: seller.rating,
                is_prime: seller.prime,
                is_amazon: seller.id == PLATFORM_SELLER,
                buybox_seller_id: Some(seller.id.clone()),
                comparison_group_id: group_id.clone(),
                market: None,
                extra: BTreeMap::new(),
            }
        })
        .collect();
    (spec, rows, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmittedKind {
    Advantage,
    Disadvantage,
}

impl OmittedKind {
    pub fn column_name(&self) -> &'static str {
        match self {
            OmittedKind::Advantage => "omitted_advantage",
            OmittedKind::Disadvantage => "omitted_disadvantage",
        }
    }
}

/// Adds `±multiplier·isAmazon + organic_visibility + v`, `v ~ N(0, noise_sd²)`,
/// as a derived column. Draws follow row order; other columns are untouched.
pub fn inject_omitted_variable(panel: &Panel, kind: OmittedKind, multiplier: f64, noise_sd: f64, seed: u64) -> Panel {
    let sign = match kind {
        OmittedKind::Advantage => 1.0,
        OmittedKind::Disadvantage => -1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Normal::new(0.0, noise_sd).expect("finite sd");
    let rows = panel
        .rows
        .iter()
        .map(|r| {
            let mut r = r.clone();
            let value = sign * multiplier * f64::from(r.is_amazon as u8) + r.organic_visibility + v.sample(&mut rng);
            r.extra.insert(kind.column_name().to_string(), value);
            r
        })
        .collect();
    panel.with_rows(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloCell {
    pub delta_true: f64,
    pub replications: usize,
    pub successes: usize,
    pub failures: Vec<String>,
    pub mean_estimate: f64,
    pub bias: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    /// Share of replications rejecting δ = 0 at the 5% level.
    pub rejection_rate: f64,
    /// Share whose 95% interval covers the true δ.
    pub coverage: f64,
    /// Share with `|δ̂ − δ| ≤ 3·SE`.
    pub within_3se: f64,
    /// Too few successful replications for stable rates.
    pub wide_variance: bool,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Below this many successful replications a cell is flagged.
pub const MIN_STABLE_REPLICATIONS: usize = 30;

/// Seed of replication `rep` derived from a base seed.
pub fn replication_seed(base: u64, rep: usize) -> u64 {
    base.wrapping_add((rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Simulates, lags and fits the COO model on each replication of each cell.
/// Replications run in parallel; results are collected in replication order.
pub fn monte_carlo_study(grid: &[SimulationConfig], replications: usize) -> Result<Vec<MonteCarloCell>> {
    if replications < 2 {
        return Err(SimulationError::Config("at least two replications are required".into()));
    }
    grid.iter()
        .map(|cell| {
            let base = cell.validate()?;
            let outcomes: Vec<std::result::Result<(f64, f64), String>> = (0..replications)
                .into_par_iter()
                .map(|rep| {
                    let cfg = SimulationConfig {
                        seed: Some(replication_seed(base, rep)),
                        ..cell.clone()
                    };
                    run_replication(&cfg).map_err(|e| format!("replication {rep}: {e}"))
                })
                .collect();
            Ok(summarise(cell.delta_true, replications, outcomes))
        })
        .collect()
}

fn run_replication(cfg: &SimulationConfig) -> std::result::Result<(f64, f64), String> {
    let (panel, _) = simulate_panel(cfg).map_err(|e| e.to_string())?;
    let lagged = lag_covariates(&panel, cfg.covariate_lag.max(1)).map_err(|e| e.to_string())?;
    let report = coo_test(&lagged, &ModelSpec::coo(cfg.unit_effect())).map_err(|e| e.to_string())?;
    Ok((report.estimate, report.se))
}

fn summarise(
    delta: f64,
    replications: usize,
    outcomes: Vec<std::result::Result<(f64, f64), String>>,
) -> MonteCarloCell {
    let mut estimates = Vec::new();
    let mut ses = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok((e, s)) => {
                estimates.push(e);
                ses.push(s);
            }
            Err(msg) => failures.push(msg),
        }
    }
    let k = estimates.len();
    let share = |pred: &dyn Fn(f64, f64) -> bool| {
        if k == 0 {
            f64::NAN
        } else {
            estimates.iter().zip(&ses).filter(|(e, s)| pred(**e, **s)).count() as f64 / k as f64
        }
    };
    let mean_estimate = if k == 0 { f64::NAN } else { stats::mean(&estimates) };
    MonteCarloCell {
        delta_true: delta,
        replications,
        successes: k,
        mean_estimate,
        bias: mean_estimate - delta,
        empirical_sd: stats::sample_sd(&estimates),
        mean_se: if k == 0 { f64::NAN } else { stats::mean(&ses) },
        rejection_rate: share(&|e, s| (e / s).abs() > DEFAULT_Z),
        coverage: share(&|e, s| (e - delta).abs() <= DEFAULT_Z * s),
        within_3se: share(&|e, s| (e - delta).abs() <= 3.0 * s),
        wide_variance: k < MIN_STABLE_REPLICATIONS,
        failures,
        estimates,
        std_errors: ses,
    }
}
