use chrono::{Days, NaiveDate};
use criterion::{criterion_group, criterion_main, Criterion};
use prefaudit_core::visibility::{compute_visibility, EcpCurve, EcpCurves, KeywordRankRecord, VisibilityOptions};

/// Every keyword ranks every offer each day, in a rotating order.
fn rank_log(keywords: usize, offers: usize, days: usize) -> Vec<KeywordRankRecord> {
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    let mut out = Vec::with_capacity(keywords * offers * days);
    for k in 0..keywords {
        for t in 0..days {
            let volume = 100.0 + ((k * 31 + t * 7) % 50) as f64;
            for o in 0..offers {
                out.push(KeywordRankRecord {
                    keyword_id: format!("k{k}"),
                    day: start + Days::new(t as u64),
                    offer_id: format!("o{o}"),
                    rank: ((o + k + t) % offers) as u32 + 1,
                    query_volume: volume,
                });
            }
        }
    }
    out
}

fn relative_visibility(c: &mut Criterion) {
    let curves = EcpCurves::single(EcpCurve::geometric(0.3, 0.8, 50).unwrap());
    let small = rank_log(10, 10, 30);
    let large = rank_log(200, 50, 365);
    c.bench_function("visibility_10x10x30", |b| {
        b.iter(|| compute_visibility(&small, &curves, VisibilityOptions::default()).unwrap())
    });
    let mut group = c.benchmark_group("visibility_large");
    group.sample_size(10);
    group.bench_function("200x50x365", |b| {
        b.iter(|| compute_visibility(&large, &curves, VisibilityOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, relative_visibility);
criterion_main!(benches);
