use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use prefaudit_core::fe_glm::{FixedEffect, ModelSpec};
use prefaudit_core::panel::{
    filter_sample, ingest_observations, lag_covariates, lag_for_outcome, IngestOptions, IngestReport, Panel,
    SampleFilter,
};
use prefaudit_core::report::{file_digest, render_coefficient_svg, write_plot_csv, Envelope, PlotPoint};
use prefaudit_core::robustness::{
    buybox_change_sensitivity, cutoff_rows, ratio_cutoff_sensitivity, seller_rating_sensitivity, variant_rows,
    write_sensitivity_csv, CutoffResult, RatingImputation, Variant,
};
use prefaudit_core::sp_tests::{compare_tests, coo_test, ob_test, TestReport};
use prefaudit_core::synthetic::{monte_carlo_study, simulate_panel, GroundTruth, MonteCarloCell};
use prefaudit_core::visibility::{compute_visibility, load_keyword_ranks, EcpCurve, EcpCurves, VisibilityOptions};
use prefaudit_core::{SimulationConfig, Variable};

#[derive(Parser)]
#[command(
    name = "prefaudit",
    version,
    about = "Audit a marketplace's search ranking for self-preferencing"
)]
struct Cli {
    /// TOML file with `[simulate]`, `[ingest]`, `[visibility]` and `[filter]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel refits and replications.
    #[arg(long, global = true, env = "PREFAUDIT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Relative visibility per offer and day from keyword rankings.
    Visibility {
        #[arg(long)]
        keywords: PathBuf,
        /// Rank to click-probability table (`rank,click_prob`).
        #[arg(long)]
        ecp: Option<PathBuf>,
        /// Length in days of the seasonal window.
        #[arg(long)]
        cycle: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validates a panel, converts currencies and applies a sample filter.
    Ingest {
        #[arg(long)]
        panel: PathBuf,
        /// Multiplier for prices in `--foreign-market` rows.
        #[arg(long)]
        currency_rate: Option<f64>,
        #[arg(long)]
        foreign_market: Vec<String>,
        /// Seller rating filled in where the platform holds the buy box.
        #[arg(long)]
        seller_rating_impute: Option<f64>,
        #[arg(long, value_enum, default_value_t = Sample::All)]
        sample: Sample,
        #[arg(long)]
        out: PathBuf,
    },
    /// Conditioning-on-observables test on organic visibility.
    TestCoo {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, default_value_t = 1)]
        lag: u32,
        #[arg(long, value_enum, default_value_t = Unit::Product)]
        unit: Unit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Outcome-based test on sales rank; with `--coo`, also the joint verdict.
    TestOb {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, default_value_t = 1)]
        lag: u32,
        /// A `coo.json` from the same panel.
        #[arg(long)]
        coo: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic panel with known platform effect, or a Monte Carlo study.
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<f64>,
        /// Run this many replications per `--deltas` value instead of writing a panel.
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        deltas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Buy-box change, seller-rating and visibility-ratio sensitivity refits.
    Robustness {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, default_value_t = 1)]
        lag: u32,
        #[arg(long, value_enum, default_value_t = Unit::Product)]
        unit: Unit,
        /// Ratio cutoffs, e.g. `1-30` or `2,5,10,inf`.
        #[arg(long)]
        cutoffs: Option<String>,
        /// Platform seller ratings to try; `none` drops the regressor.
        #[arg(long, value_delimiter = ',')]
        seller_rating_impute: Vec<RatingImputation>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coefficient plot and summary over test reports.
    Report {
        /// `coo.json` or `ob.json` files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// One label per report; defaults to the markets or the file name.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long, default_value = "Effect of platform supply")]
        title: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sample {
    All,
    BestSelling,
    PrivateLabel,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Unit {
    Product,
    ComparisonGroup,
}

impl Unit {
    fn effect(self) -> FixedEffect {
        match self {
            Unit::Product => FixedEffect::Product,
            Unit::ComparisonGroup => FixedEffect::ComparisonGroup,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    simulate: Option<SimulationConfig>,
    ingest: Option<IngestOptions>,
    visibility: Option<VisibilityOptions>,
    filter: Option<SampleFilter>,
}

fn load_config(path: Option<&Path>) -> Result<(ConfigFile, BTreeMap<String, String>)> {
    let Some(path) = path else {
        return Ok(Default::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((cfg, digests(&[("config", path)])?))
}

fn digests(files: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|(name, p)| {
            Ok((
                name.to_string(),
                file_digest(p).with_context(|| format!("reading {}", p.display()))?,
            ))
        })
        .collect()
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_panel(path: &Path) -> Result<Panel> {
    let (panel, report) =
        ingest_observations(path, &IngestOptions::default()).with_context(|| format!("loading {}", path.display()))?;
    if !report.gaps.is_empty() {
        log::warn!(
            "{} date gaps; rows after a gap lose their lagged covariates",
            report.gaps.len()
        );
    }
    Ok(panel)
}

/// `1-30`, `2,5,10`, `inf` or any mix.
fn parse_cutoffs(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u32, u32) = (a.trim().parse()?, b.trim().parse()?);
            if a > b {
                bail!("empty cutoff range {part}");
            }
            out.extend((a..=b).map(f64::from));
        } else if part.eq_ignore_ascii_case("inf") {
            out.push(f64::INFINITY);
        } else {
            out.push(part.parse().with_context(|| format!("cutoff {part:?}"))?);
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let (config, config_digests) = load_config(cli.config.as_deref())?;
    let out_dir = match &cli.command {
        Command::Visibility { out, .. }
        | Command::Ingest { out, .. }
        | Command::TestCoo { out, .. }
        | Command::TestOb { out, .. }
        | Command::Simulate { out, .. }
        | Command::Robustness { out, .. }
        | Command::Report { out, .. } => out.clone(),
    };
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let out = out_dir.as_path();
    let inputs = |files: &[(&str, &Path)]| -> Result<BTreeMap<String, String>> {
        let mut d = digests(files)?;
        d.extend(config_digests.clone());
        Ok(d)
    };

    match cli.command {
        Command::Visibility {
            keywords, ecp, cycle, ..
        } => {
            let mut opts = config.visibility.unwrap_or_default();
            if let Some(c) = cycle {
                opts.cycle_length = c;
            }
            let curve = match &ecp {
                Some(p) => EcpCurve::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => EcpCurve::default(),
            };
            let records = load_keyword_ranks(&keywords).with_context(|| format!("loading {}", keywords.display()))?;
            let table = compute_visibility(&records, &EcpCurves::single(curve.clone()), opts)?;
            table.write_csv(create(&out.join("visibility.csv"))?)?;
            let mut files = vec![("keywords", keywords.as_path())];
            if let Some(p) = &ecp {
                files.push(("ecp", p.as_path()));
            }
            #[derive(Serialize)]
            struct Summary {
                records: usize,
                offer_days: usize,
                partial_windows: usize,
            }
            let summary = Summary {
                records: records.len(),
                offer_days: table.offers.len(),
                partial_windows: table.partial_windows,
            };
            let cfg = serde_json::json!({ "options": opts, "ecp": curve.entries().collect::<Vec<_>>() });
            write_json(
                out,
                "visibility.json",
                &Envelope::new("visibility", cfg, inputs(&files)?, summary),
            )?;
            println!(
                "{} offer-days, {} partial seasonal windows",
                table.offers.len(),
                table.partial_windows
            );
        }
        Command::Ingest {
            panel,
            currency_rate,
            foreign_market,
            seller_rating_impute,
            sample,
            ..
        } => {
            let mut opts = config.ingest.unwrap_or_default();
            if let Some(r) = currency_rate {
                opts.currency_rate = r;
            }
            if !foreign_market.is_empty() {
                opts.foreign_markets = foreign_market;
            }
            if let Some(r) = seller_rating_impute {
                opts.platform_seller_rating = r;
            }
            let (raw, report) =
                ingest_observations(&panel, &opts).with_context(|| format!("loading {}", panel.display()))?;
            let filter = match (sample, config.filter) {
                (Sample::All, Some(f)) => f,
                (Sample::All, None) => SampleFilter::default(),
                (Sample::BestSelling, _) => SampleFilter::best_selling(),
                (Sample::PrivateLabel, _) => SampleFilter::private_label(None),
            };
            let kept = filter_sample(&raw, &filter)?;
            kept.save(out.join("panel.csv"))?;
            #[derive(Serialize)]
            struct Summary {
                ingest: IngestReport,
                rows_kept: usize,
                products_kept: usize,
            }
            let summary = Summary {
                ingest: report,
                rows_kept: kept.len(),
                products_kept: kept.product_ids().len(),
            };
            println!("kept {} of {} rows", summary.rows_kept, summary.ingest.rows);
            let cfg = serde_json::json!({ "ingest": opts, "filter": filter });
            write_json(
                out,
                "ingest.json",
                &Envelope::new("ingest", cfg, inputs(&[("panel", &panel)])?, summary),
            )?;
        }
        Command::TestCoo { panel, lag, unit, .. } => {
            let raw = load_panel(&panel)?;
            let spec = ModelSpec::coo(unit.effect());
            let report = coo_test(&lag_covariates(&raw, lag)?, &spec)?;
            println!("{report}");
            let cfg = serde_json::json!({ "lag": lag, "unit": unit, "spec": spec });
            write_json(
                out,
                "coo.json",
                &Envelope::new("test-coo", cfg, inputs(&[("panel", &panel)])?, report),
            )?;
        }
        Command::TestOb { panel, lag, coo, .. } => {
            let raw = load_panel(&panel)?;
            let spec = ModelSpec::ob();
            let report = ob_test(&lag_for_outcome(&raw, lag, Variable::SalesRank)?, &spec)?;
            println!("{report}");
            let cfg = serde_json::json!({ "lag": lag, "spec": spec });
            let digests = inputs(&[("panel", &panel)])?;
            write_json(
                out,
                "ob.json",
                &Envelope::new("test-ob", cfg.clone(), digests.clone(), report.clone()),
            )?;
            if let Some(path) = coo {
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let coo: Envelope<TestReport> =
                    serde_json::from_str(&text).with_context(|| format!("{} is not a test report", path.display()))?;
                let joint = compare_tests(coo.payload, report)?;
                println!("verdict: {}", joint.verdict);
                let mut digests = digests;
                digests.insert("coo".into(), file_digest(&path)?);
                write_json(out, "verdict.json", &Envelope::new("test-ob", cfg, digests, joint))?;
            }
        }
        Command::Simulate {
            seed,
            delta,
            replications,
            deltas,
            ..
        } => {
            let mut sim = config.simulate.unwrap_or_default();
            if seed.is_some() {
                sim.seed = seed;
            }
            if let Some(d) = delta {
                sim.delta_true = d;
            }
            sim.validate()?;
            let cfg = serde_json::to_value(&sim)?;
            if let Some(reps) = replications {
                let grid: Vec<SimulationConfig> = if deltas.is_empty() {
                    vec![sim.clone()]
                } else {
                    deltas
                        .iter()
                        .map(|&d| SimulationConfig {
                            delta_true: d,
                            ..sim.clone()
                        })
                        .collect()
                };
                let cells: Vec<MonteCarloCell> = monte_carlo_study(&grid, reps)?;
                for c in &cells {
                    println!(
                        "delta {:+.3}: mean {:+.4}, sd {:.4}, mean se {:.4}, rejection {:.1}%, coverage {:.1}%{}",
                        c.delta_true,
                        c.mean_estimate,
                        c.empirical_sd,
                        c.mean_se,
                        100.0 * c.rejection_rate,
                        100.0 * c.coverage,
                        if c.wide_variance { " (few replications)" } else { "" }
                    );
                }
                let cfg = serde_json::json!({ "base": cfg, "replications": reps, "deltas": deltas });
                write_json(
                    out,
                    "monte_carlo.json",
                    &Envelope::new("simulate", cfg, inputs(&[])?, cells),
                )?;
            } else {
                let (panel, truth): (Panel, GroundTruth) = simulate_panel(&sim)?;
                panel.save(out.join("panel.csv"))?;
                println!("{} rows, {} products", panel.len(), panel.product_ids().len());
                write_json(out, "truth.json", &Envelope::new("simulate", cfg, inputs(&[])?, truth))?;
            }
        }
        Command::Robustness {
            panel,
            lag,
            unit,
            cutoffs,
            seller_rating_impute,
            ..
        } => {
            let raw = load_panel(&panel)?;
            let spec = ModelSpec::coo(unit.effect());
            let lagged = lag_covariates(&raw, lag)?;
            let mut rows = Vec::new();
            #[derive(Serialize, Default)]
            struct Payload {
                buybox_change: Option<Vec<Variant>>,
                seller_rating: Option<Vec<Variant>>,
                ratio_cutoff: Option<Vec<CutoffResult>>,
            }
            let mut payload = Payload::default();
            if matches!(unit, Unit::Product) {
                if raw.rows.iter().all(|r| r.buybox_seller_id.is_some()) {
                    let v = buybox_change_sensitivity(&raw, lag, &spec)?;
                    rows.extend(variant_rows("buybox_change", &v));
                    payload.buybox_change = Some(v);
                } else {
                    log::warn!("skipping buy-box change analysis: rows without a seller id");
                }
            }
            let imputations = if seller_rating_impute.is_empty() && matches!(unit, Unit::Product) {
                RatingImputation::sweep()
            } else {
                seller_rating_impute
            };
            if !imputations.is_empty() {
                let v = seller_rating_sensitivity(&lagged, &spec, &imputations)?;
                rows.extend(variant_rows("seller_rating", &v));
                payload.seller_rating = Some(v);
            }
            let cut = match (&cutoffs, unit) {
                (Some(s), _) => Some(parse_cutoffs(s)?),
                (None, Unit::ComparisonGroup) => Some((1..=30).map(f64::from).collect()),
                (None, Unit::Product) => None,
            };
            if let Some(cut) = &cut {
                let r = ratio_cutoff_sensitivity(&lagged, &spec, cut)?;
                rows.extend(cutoff_rows(&r));
                payload.ratio_cutoff = Some(r);
            }
            if rows.is_empty() {
                bail!("no analysis applies; give --cutoffs or --seller-rating-impute");
            }
            for r in &rows {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:+.4}"));
                println!(
                    "{:<14} {:<16} {} [{}, {}]",
                    r.analysis,
                    r.variant,
                    fmt(r.delta),
                    fmt(r.ci_low),
                    fmt(r.ci_high)
                );
            }
            write_sensitivity_csv(&rows, create(&out.join("sensitivity.csv"))?)?;
            let cfg = serde_json::json!({
                "lag": lag,
                "unit": unit,
                "spec": spec,
                "cutoffs": cut.map(|c| c.iter().map(|x| x.to_string()).collect::<Vec<_>>()),
                "seller_rating_impute": imputations.iter().map(ToString::to_string).collect::<Vec<_>>(),
            });
            write_json(
                out,
                "robustness.json",
                &Envelope::new("robustness", cfg, inputs(&[("panel", &panel)])?, payload),
            )?;
        }
        Command::Report {
            reports, labels, title, ..
        } => {
            if !labels.is_empty() && labels.len() != reports.len() {
                bail!("{} labels for {} reports", labels.len(), reports.len());
            }
            let mut points = Vec::new();
            let mut files = Vec::new();
            let mut summary = String::from(
                "| sample | test | estimate | SE | effect | 95% CI | conclusion |\n|---|---|---|---|---|---|---|\n",
            );
            for (i, path) in reports.iter().enumerate() {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let env: Envelope<TestReport> =
                    serde_json::from_str(&text).with_context(|| format!("{} is not a test report", path.display()))?;
                let r = env.payload;
                let label = labels.get(i).cloned().unwrap_or_else(|| {
                    if r.sample.markets.is_empty() {
                        path.file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default()
                    } else {
                        r.sample.markets.join("+")
                    }
                });
                summary.push_str(&format!(
                    "| {label} | {} | {:.3} | {:.3} | {:+.1}% | [{:+.1}%, {:+.1}%] | {} |\n",
                    r.kind, r.estimate, r.se, r.percent, r.ci_low, r.ci_high, r.conclusion
                ));
                points.push(PlotPoint::from_report(&label, &r));
                files.push((format!("report{i}"), path.clone()));
            }
            fs::write(
                out.join("plot.svg"),
                render_coefficient_svg(&points, &title, "Effect in %"),
            )?;
            write_plot_csv(&points, create(&out.join("plot.csv"))?)?;
            fs::write(out.join("summary.md"), &summary)?;
            print!("{summary}");
            let named: Vec<(&str, &Path)> = files.iter().map(|(n, p)| (n.as_str(), p.as_path())).collect();
            let cfg = serde_json::json!({ "title": title, "labels": labels });
            write_json(
                out,
                "report.json",
                &Envelope::new("report", cfg, inputs(&named)?, points),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_lists() {
        assert_eq!(parse_cutoffs("1-3,10").unwrap(), vec![1.0, 2.0, 3.0, 10.0]);
        assert_eq!(parse_cutoffs("inf").unwrap(), vec![f64::INFINITY]);
        assert!(parse_cutoffs("5-2").is_err());
        assert!(parse_cutoffs("x").is_err());
    }
}
