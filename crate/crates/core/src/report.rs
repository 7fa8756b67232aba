//! Report envelopes with audit digests, and coefficient plots as SVG plus
//! the CSV they are drawn from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sp_tests::TestReport;

pub const SCHEMA_VERSION: u32 = 1;

/// Wraps any payload with what is needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of the configuration as serialised in `config`.
    pub config_digest: String,
    /// SHA-256 of each input file, keyed by the name it was given under.
    pub input_digests: BTreeMap<String, String>,
    pub payload: T,
}

impl<T> Envelope<T> {
    pub fn new(command: &str, config: serde_json::Value, input_digests: BTreeMap<String, String>, payload: T) -> Self {
        let config_digest = bytes_digest(config.to_string().as_bytes());
        Envelope {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            config_digest,
            input_digests,
            payload,
        }
    }
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: impl AsRef<Path>) -> io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// One estimate on a coefficient plot, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub label: String,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PlotPoint {
    pub fn from_report(label: &str, report: &TestReport) -> Self {
        PlotPoint {
            label: label.to_string(),
            estimate: report.percent,
            ci_low: report.ci_low,
            ci_high: report.ci_high,
        }
    }
}

pub fn write_plot_csv<W: Write>(points: &[PlotPoint], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "estimate_percent", "ci_low_percent", "ci_high_percent"])?;
    for p in points {
        w.write_record([
            p.label.clone(),
            p.estimate.to_string(),
            p.ci_low.to_string(),
            p.ci_high.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Round step giving roughly `target` intervals over `span`.
fn tick_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// Samples along the horizontal axis; for each, a point at the estimate
/// and a whisker over its 95% interval, with a dashed line at zero.
pub fn render_coefficient_svg(points: &[PlotPoint], title: &str, y_label: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 70.0;

    let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for p in points {
        for v in [p.estimate, p.ci_low, p.ci_high].into_iter().filter_map(finite) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi - lo < 1e-9 {
        hi += 1.0;
        lo -= 1.0;
    }
    let step = tick_step(hi - lo, 6.0);
    let lo = (lo / step).floor() * step;
    let hi = (hi / step).ceil() * step;
    let plot_h = H - TOP - BOTTOM;
    let plot_w = W - LEFT - RIGHT;
    let y = |v: f64| TOP + (hi - v) / (hi - lo) * plot_h;
    let x = |i: usize| LEFT + (i as f64 + 0.5) * plot_w / points.len().max(1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        H - BOTTOM
    );
    let mut t = lo;
    while t <= hi + step * 1e-9 {
        let ty = y(t);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ty:.2}" x2="{LEFT}" y2="{ty:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            ty + 4.0,
            format_tick(t, step)
        );
        t += step;
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    let zero = y(0.0);
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{zero:.2}" x2="{}" y2="{zero:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        W - RIGHT
    );
    for (i, p) in points.iter().enumerate() {
        let px = x(i);
        if let (Some(a), Some(b)) = (finite(p.ci_low), finite(p.ci_high)) {
            let (ya, yb) = (y(a), y(b));
            let _ = writeln!(
                s,
                r#"<g class="ci"><line x1="{px:.2}" y1="{ya:.2}" x2="{px:.2}" y2="{yb:.2}" stroke="black"/><line x1="{:.2}" y1="{ya:.2}" x2="{:.2}" y2="{ya:.2}" stroke="black"/><line x1="{:.2}" y1="{yb:.2}" x2="{:.2}" y2="{yb:.2}" stroke="black"/></g>"#,
                px - 6.0,
                px + 6.0,
                px - 6.0,
                px + 6.0
            );
        }
        if let Some(e) = finite(p.estimate) {
            let _ = writeln!(
                s,
                r#"<circle class="estimate" cx="{px:.2}" cy="{:.2}" r="4" fill="black"><title>{}: {:.1}%</title></circle>"#,
                y(e),
                escape(&p.label),
                e
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            escape(&p.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10()).ceil() as usize
    };
    let v = if v.abs() < step * 1e-9 { 0.0 } else { v };
    format!("{v:.decimals$}")
}
