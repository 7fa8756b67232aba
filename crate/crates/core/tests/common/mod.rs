//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, DVector};
use prefaudit_core::fe_glm::{Design, Factor};
use prefaudit_core::visibility::{EcpCurve, KeywordRankRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

pub fn day(n: u64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + Days::new(n)
}

/// Explicit-dummy Poisson fit by Newton's method on the full design
/// `[X | D_1 | D_2 without its first level]`, after iteratively removing
/// fixed-effect levels with an all-zero outcome. Returns the slopes on `X`
/// and the fitted means of the kept rows.
pub struct DenseFit {
    pub beta: Vec<f64>,
    pub kept: Vec<usize>,
    pub mu: Vec<f64>,
}

pub fn dense_poisson(design: &Design) -> DenseFit {
    let n_all = design.y.len();
    let mut keep: BTreeSet<usize> = (0..n_all).collect();
    loop {
        let before = keep.len();
        for f in &design.fixed_effects {
            let mut total: BTreeMap<u32, f64> = BTreeMap::new();
            for &r in &keep {
                *total.entry(f.codes[r]).or_default() += design.y[r];
            }
            keep.retain(|&r| total[&f.codes[r]] > 0.0);
        }
        if keep.len() == before {
            break;
        }
    }
    let kept: Vec<usize> = keep.into_iter().collect();
    let n = kept.len();
    let mut cols: Vec<Vec<f64>> = design
        .columns
        .iter()
        .map(|c| kept.iter().map(|&r| c[r]).collect())
        .collect();
    if design.fixed_effects.is_empty() {
        cols.insert(0, vec![1.0; n]);
    }
    let k = cols.len();
    for (d, f) in design.fixed_effects.iter().enumerate() {
        let levels: BTreeSet<u32> = kept.iter().map(|&r| f.codes[r]).collect();
        for (i, lvl) in levels.iter().enumerate() {
            if d > 0 && i == 0 {
                continue;
            }
            cols.push(kept.iter().map(|&r| f64::from(f.codes[r] == *lvl)).collect());
        }
    }
    let p = cols.len();
    let z_mat = DMatrix::from_fn(n, p, |i, j| cols[j][i]);
    let y = DVector::from_iterator(n, kept.iter().map(|&r| design.y[r]));
    let y_mean = y.mean();
    let mut mu = y.map(|v| v + 0.1 * y_mean);
    let mut eta = mu.map(f64::ln);
    let mut b = DVector::zeros(p);
    for _ in 0..500 {
        let w = mu.clone();
        let z = DVector::from_fn(n, |i, _| eta[i] + (y[i] - mu[i]) / mu[i]);
        let mut zw = z_mat.clone();
        for (i, mut row) in zw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let lhs = z_mat.transpose() * &zw;
        let rhs = zw.transpose() * &z;
        let b_new = lhs.lu().solve(&rhs).expect("dense design is full rank");
        let step = (&b_new - &b).amax();
        b = b_new;
        eta = &z_mat * &b;
        mu = eta.map(f64::exp);
        if step < 1e-13 {
            break;
        }
    }
    DenseFit {
        beta: b.iter().take(k).copied().collect(),
        kept,
        mu: mu.iter().copied().collect(),
    }
}

/// `B⁻¹ M B⁻¹` with `M = Σ_i Σ_j s_i s_j' (c_A [a_i = a_j] + c_B [b_i = b_j] − c_AB [both])`
/// written as a plain double loop over observation pairs.
pub fn brute_force_two_way(bread: &DMatrix<f64>, scores: &DMatrix<f64>, a: &Factor, b: &Factor) -> DMatrix<f64> {
    let n = scores.nrows();
    let k = scores.ncols();
    let ga = a.n_levels() as f64;
    let gb = b.n_levels() as f64;
    let pairs: BTreeSet<(u32, u32)> = a.codes.iter().zip(&b.codes).map(|(x, y)| (*x, *y)).collect();
    let gab = pairs.len() as f64;
    let (ca, cb, cab) = (ga / (ga - 1.0), gb / (gb - 1.0), gab / (gab - 1.0));
    let mut m = DMatrix::zeros(k, k);
    for i in 0..n {
        for j in 0..n {
            let same_a = a.codes[i] == a.codes[j];
            let same_b = b.codes[i] == b.codes[j];
            let c = if same_a { ca } else { 0.0 } + if same_b { cb } else { 0.0 }
                - if same_a && same_b { cab } else { 0.0 };
            if c == 0.0 {
                continue;
            }
            for p in 0..k {
                for q in 0..k {
                    m[(p, q)] += c * scores[(i, p)] * scores[(j, q)];
                }
            }
        }
    }
    let inv = bread.clone().try_inverse().expect("invertible bread");
    &inv * m * &inv
}

/// A random two-way panel with at most `max_units × max_dates` cells, some
/// missing, three regressors and Poisson counts.
pub fn random_design(seed: u64, max_units: usize, max_dates: usize) -> Design {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_units = rng.random_range((max_units / 2).max(4)..=max_units);
    let n_dates = rng.random_range((max_dates / 2).max(4)..=max_dates);
    let presence: f64 = rng.random_range(0.7..1.0);
    let std = Normal::new(0.0, 1.0).unwrap();
    let alpha: Vec<f64> = (0..n_units).map(|_| 0.7 * std.sample(&mut rng)).collect();
    let gamma: Vec<f64> = (0..n_dates).map(|_| 0.3 * std.sample(&mut rng)).collect();
    let (mut units, mut dates, mut y) = (Vec::new(), Vec::new(), Vec::new());
    let (mut x1, mut x2, mut x3) = (Vec::new(), Vec::new(), Vec::new());
    let dead_unit = if rng.random_bool(0.5) {
        Some(rng.random_range(0..n_units))
    } else {
        None
    };
    for (u, a_u) in alpha.iter().enumerate() {
        for (t, g_t) in gamma.iter().enumerate() {
            if !rng.random_bool(presence) {
                continue;
            }
            let a = f64::from(rng.random_bool(0.4) as u8);
            let b = std.sample(&mut rng) + 0.3 * a_u;
            let c: f64 = rng.random_range(0.5..3.0);
            let eta = 0.8 + 0.3 * a - 0.2 * b + 0.4 * c.ln() + a_u + g_t;
            let draw = if Some(u) == dead_unit {
                0.0
            } else {
                Poisson::new(eta.exp()).unwrap().sample(&mut rng)
            };
            units.push(format!("u{u:02}"));
            dates.push(format!("t{t:02}"));
            y.push(draw);
            x1.push(a);
            x2.push(b);
            x3.push(c.ln());
        }
    }
    let unit = Factor::from_labels("unit", units.iter().map(String::as_str));
    let date = Factor::from_labels("date", dates.iter().map(String::as_str));
    Design {
        outcome: "y".into(),
        y,
        names: vec!["a".into(), "b".into(), "ln_c".into()],
        columns: vec![x1, x2, x3],
        clusters: vec![unit.clone(), date.clone()],
        fixed_effects: vec![unit, date],
    }
}

/// Relative visibility by a direct loop over offers, keywords and days,
/// looking every rank and volume up by linear scan.
pub fn naive_relative_visibility(
    records: &[KeywordRankRecord],
    curve: &EcpCurve,
    cycle: usize,
    scale: f64,
) -> BTreeMap<(String, NaiveDate), f64> {
    let keywords: BTreeSet<&str> = records.iter().map(|r| r.keyword_id.as_str()).collect();
    let offers: BTreeSet<&str> = records.iter().map(|r| r.offer_id.as_str()).collect();
    let days: BTreeSet<NaiveDate> = records.iter().map(|r| r.day).collect();
    let volume = |k: &str, d: NaiveDate| {
        records
            .iter()
            .find(|r| r.keyword_id == k && r.day == d)
            .map(|r| r.query_volume)
    };
    let mut out = BTreeMap::new();
    for &t in &days {
        let mut vi: BTreeMap<&str, f64> = BTreeMap::new();
        for &i in &offers {
            let mut total = 0.0;
            let mut ranked = false;
            for &k in &keywords {
                let Some(rec) = records
                    .iter()
                    .find(|r| r.keyword_id == k && r.offer_id == i && r.day == t)
                else {
                    continue;
                };
                ranked = true;
                let mut sum = 0.0;
                let mut count = 0.0;
                for m in 0..cycle as u64 {
                    let Some(d) = t.checked_sub_days(Days::new(m)) else {
                        break;
                    };
                    if let Some(v) = volume(k, d) {
                        sum += v;
                        count += 1.0;
                    }
                }
                total += sum / count * curve.click_probability(rec.rank);
            }
            if ranked {
                vi.insert(i, total);
            }
        }
        let sum: f64 = vi.values().sum();
        for (i, v) in vi {
            out.insert((i.to_string(), t), v / sum * scale);
        }
    }
    out
}

/// Random keyword-rank log: every keyword has a volume on every day and
/// ranks a random subset of offers in random order.
pub fn random_rank_log(seed: u64, keywords: usize, offers: usize, days: usize) -> Vec<KeywordRankRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in 0..keywords {
        let base: f64 = rng.random_range(10.0..1000.0);
        for t in 0..days {
            let volume = (base * rng.random_range(0.5..1.5f64)).round();
            let mut ranked: Vec<usize> = (0..offers).filter(|_| rng.random_bool(0.7)).collect();
            if ranked.is_empty() {
                ranked.push(rng.random_range(0..offers));
            }
            for i in (1..ranked.len()).rev() {
                let j = rng.random_range(0..=i);
                ranked.swap(i, j);
            }
            for (pos, o) in ranked.iter().enumerate() {
                out.push(KeywordRankRecord {
                    keyword_id: format!("k{k}"),
                    day: day(t as u64),
                    offer_id: format!("o{o}"),
                    rank: pos as u32 + 1,
                    query_volume: volume,
                });
            }
        }
    }
    out
}

/// Decreasing curve over ten ranks, unrelated to the default.
pub fn test_curve() -> EcpCurve {
    EcpCurve::new(vec![0.35, 0.20, 0.12, 0.09, 0.07, 0.05, 0.04, 0.03, 0.02, 0.01]).unwrap()
}
