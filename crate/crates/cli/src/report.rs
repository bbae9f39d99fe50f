use std::path::Path;

use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::Serialize;

use datasuff_core::sufficiency::{sweep_traces, SilvermanKde, Traces};
use datasuff_core::{
    compute_traces, minutes_for, summarize, AnalysisMode, CarFollowingEvent, MultivariateWeighting, Series,
    SufficiencyConfig, SufficiencyResultF64,
};

use crate::input::Loaded;
use crate::{write_atomic, Common};

pub const SCHEMA_VERSION: u32 = 1;

/// Rounds to 6 significant digits, the precision of every float in the outputs.
fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

#[derive(Serialize)]
struct ConfigEcho {
    mode: AnalysisMode,
    variables: Vec<String>,
    block_size: usize,
    epsilon: f64,
    rate_hz: f64,
    grid_points: usize,
    grid_points_per_dim: usize,
    pad_factor: f64,
    weighting: MultivariateWeighting,
    pool_drivers: bool,
    max_distance: f64,
    min_speed: f64,
    min_duration: f64,
}

impl ConfigEcho {
    fn new(config: &SufficiencyConfig, loaded: &Loaded, pool_drivers: bool) -> Self {
        Self {
            mode: config.mode,
            variables: config.variables.iter().map(|v| v.name().to_string()).collect(),
            block_size: config.block_size,
            epsilon: config.epsilon,
            rate_hz: config.rate_hz,
            grid_points: config.grid_points,
            grid_points_per_dim: config.grid_points_per_dim,
            pad_factor: config.pad_factor,
            weighting: config.weighting,
            pool_drivers,
            max_distance: loaded.rules.max_distance,
            min_speed: loaded.rules.min_speed,
            min_duration: loaded.rules.min_duration,
        }
    }
}

#[derive(Serialize)]
struct DriverExtraction {
    driver: String,
    events: usize,
    samples: usize,
    below_minimum_events: bool,
}

#[derive(Serialize)]
struct Extraction {
    records: usize,
    events: usize,
    event_samples: usize,
    drivers: Vec<DriverExtraction>,
}

impl Extraction {
    fn new(loaded: &Loaded) -> Self {
        let drivers = loaded
            .events
            .per_driver
            .iter()
            .map(|d| DriverExtraction {
                driver: d.driver_id.clone(),
                events: d.events,
                samples: loaded.events.events_for(&d.driver_id).map(CarFollowingEvent::len).sum(),
                below_minimum_events: d.below_minimum,
            })
            .collect();
        Self {
            records: loaded.records,
            events: loaded.events.events.len(),
            event_samples: loaded.events.total_samples(),
            drivers,
        }
    }
}

#[derive(Serialize)]
struct TracePoint {
    n: usize,
    t_minutes: f64,
    kl: f64,
}

#[derive(Serialize)]
struct SeriesReport {
    series: String,
    converged: bool,
    n_star: Option<usize>,
    t_star_minutes: Option<f64>,
    trace: Vec<TracePoint>,
}

#[derive(Serialize)]
struct DriverReport {
    driver: String,
    samples: usize,
    converged: bool,
    n_star: Option<usize>,
    t_star_minutes: Option<f64>,
    not_converged: Vec<String>,
    series: Vec<SeriesReport>,
}

impl DriverReport {
    fn new(driver: &str, samples: usize, result: &SufficiencyResultF64) -> Self {
        let rate = result.config.rate_hz;
        let series = result
            .per_series
            .iter()
            .map(|(series, outcome)| SeriesReport {
                series: series.to_string(),
                converged: outcome.n_star.is_some(),
                n_star: outcome.n_star,
                t_star_minutes: outcome.t_star_minutes.map(sig6),
                trace: outcome
                    .trace
                    .entries
                    .iter()
                    .map(|e| TracePoint { n: e.n, t_minutes: sig6(minutes_for(e.n, rate)), kl: sig6(e.kl.value) })
                    .collect(),
            })
            .collect();
        Self {
            driver: driver.to_string(),
            samples,
            converged: result.converged(),
            n_star: result.overall_n_star,
            t_star_minutes: result.overall_t_star_minutes.map(sig6),
            not_converged: result.not_converged.iter().map(Series::to_string).collect(),
            series,
        }
    }
}

#[derive(Serialize)]
pub struct Report {
    schema_version: u32,
    inputs: Vec<String>,
    config: ConfigEcho,
    extraction: Extraction,
    status: &'static str,
    results: Vec<DriverReport>,
    warnings: Vec<String>,
}

/// A group of events analyzed together: one driver, or everyone when pooled.
struct Group {
    driver: String,
    events: Vec<CarFollowingEvent>,
}

impl Group {
    fn samples(&self) -> usize {
        self.events.iter().map(CarFollowingEvent::len).sum()
    }
}

/// Splits the events into analysis groups. Groups too small to analyze are
/// dropped with a warning; if nothing is left the run fails.
fn groups(loaded: &Loaded, config: &SufficiencyConfig, pool: bool, warnings: &mut Vec<String>) -> Result<Vec<Group>> {
    for d in &loaded.events.per_driver {
        if d.below_minimum {
            warnings.push(format!(
                "{}: {} car-following events, fewer than the {} recommended",
                d.driver_id, d.events, loaded.rules.min_events_per_driver
            ));
        }
    }
    let all: Vec<Group> = if pool {
        vec![Group { driver: "all".into(), events: loaded.events.events.clone() }]
    } else {
        loaded
            .events
            .per_driver
            .iter()
            .map(|d| Group { driver: d.driver_id.clone(), events: loaded.events.events_for(&d.driver_id).cloned().collect() })
            .collect()
    };
    let needed = config.min_samples();
    let mut kept = Vec::new();
    let mut largest = 0;
    for group in all {
        let samples = group.samples();
        largest = largest.max(samples);
        if samples < needed {
            warnings.push(format!(
                "{}: skipped, {samples} car-following samples is fewer than the {needed} needed",
                group.driver
            ));
        } else {
            kept.push(group);
        }
    }
    if loaded.events.events.is_empty() {
        bail!("no car-following events found in the input");
    }
    if kept.is_empty() {
        bail!(
            "insufficient data for analysis: need at least {needed} car-following samples (3 blocks of {}), largest group has {largest}",
            config.block_size
        );
    }
    Ok(kept)
}

fn traces_for(groups: &[Group], config: &SufficiencyConfig) -> Result<Vec<Traces<f64>>> {
    let estimator = SilvermanKde::default();
    groups
        .par_iter()
        .map(|g| compute_traces(&g.events, config, &estimator).map_err(|e| anyhow::anyhow!("{}: {e}", g.driver)))
        .collect()
}

pub fn analyze(loaded: &Loaded, config: &SufficiencyConfig, common: &Common) -> Result<Report> {
    config.validate()?;
    let mut warnings = Vec::new();
    let groups = groups(loaded, config, common.pool_drivers, &mut warnings)?;
    let traces = traces_for(&groups, config)?;
    let mut results = Vec::new();
    for (group, traces) in groups.iter().zip(&traces) {
        let result = summarize(traces, config)?;
        for series in &result.not_converged {
            warnings.push(format!("{}: {series} did not converge within {} samples", group.driver, group.samples()));
        }
        results.push(DriverReport::new(&group.driver, group.samples(), &result));
    }
    let converged = results.iter().all(|r| r.converged);
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        inputs: loaded.inputs.clone(),
        config: ConfigEcho::new(config, loaded, common.pool_drivers),
        extraction: Extraction::new(loaded),
        status: if converged { "converged" } else { "not-converged" },
        results,
        warnings,
    })
}

impl Report {
    pub fn converged(&self) -> bool {
        self.status == "converged"
    }

    /// Writes `report.json` and one `trace_<series>.csv` per series.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&dir.join("report.json"), &json)?;

        let mut names: Vec<&str> = Vec::new();
        for r in &self.results {
            for s in &r.series {
                if !names.contains(&s.series.as_str()) {
                    names.push(&s.series);
                }
            }
        }
        for name in names {
            let mut out = csv::Writer::from_writer(Vec::new());
            out.write_record(["driver", "variable", "n", "t_minutes", "kl"])?;
            for r in &self.results {
                for s in r.series.iter().filter(|s| s.series == name) {
                    for p in &s.trace {
                        out.write_record([
                            r.driver.clone(),
                            s.series.clone(),
                            p.n.to_string(),
                            p.t_minutes.to_string(),
                            p.kl.to_string(),
                        ])?;
                    }
                }
            }
            write_atomic(&dir.join(format!("trace_{name}.csv")), &out.into_inner()?)?;
        }
        Ok(())
    }

    pub fn print_summary(&self) {
        for r in &self.results {
            let overall = match (r.n_star, r.t_star_minutes) {
                (Some(n), Some(t)) => format!("n* = {n} samples ({t} min)"),
                _ => format!("not converged ({})", r.not_converged.join(", ")),
            };
            println!("{}: {overall}", r.driver);
            for s in &r.series {
                match (s.n_star, s.t_star_minutes) {
                    (Some(n), Some(t)) => println!("  {:<8} n* = {n} ({t} min)", s.series),
                    _ => println!("  {:<8} not converged", s.series),
                }
            }
        }
        for w in &self.warnings {
            eprintln!("warning: {w}");
        }
    }
}

#[derive(Serialize)]
struct SweepRow {
    driver: String,
    epsilon: f64,
    converged: bool,
    n_star: Option<usize>,
    t_star_minutes: Option<f64>,
    per_series: Vec<SweepSeries>,
}

#[derive(Serialize)]
struct SweepSeries {
    series: String,
    n_star: Option<usize>,
}

#[derive(Serialize)]
pub struct SweepReport {
    schema_version: u32,
    inputs: Vec<String>,
    config: ConfigEcho,
    epsilons: Vec<f64>,
    rows: Vec<SweepRow>,
    warnings: Vec<String>,
}

pub fn sweep(loaded: &Loaded, config: &SufficiencyConfig, common: &Common, epsilons: &[f64]) -> Result<SweepReport> {
    config.validate()?;
    let mut warnings = Vec::new();
    let groups = groups(loaded, config, common.pool_drivers, &mut warnings)?;
    let traces = traces_for(&groups, config)?;
    let mut rows = Vec::new();
    for (group, traces) in groups.iter().zip(&traces) {
        for (epsilon, result) in sweep_traces(traces, config, epsilons)? {
            rows.push(SweepRow {
                driver: group.driver.clone(),
                epsilon,
                converged: result.converged(),
                n_star: result.overall_n_star,
                t_star_minutes: result.overall_t_star_minutes.map(sig6),
                per_series: result
                    .per_series
                    .iter()
                    .map(|(s, o)| SweepSeries { series: s.to_string(), n_star: o.n_star })
                    .collect(),
            });
        }
    }
    Ok(SweepReport {
        schema_version: SCHEMA_VERSION,
        inputs: loaded.inputs.clone(),
        config: ConfigEcho::new(config, loaded, common.pool_drivers),
        epsilons: epsilons.to_vec(),
        rows,
        warnings,
    })
}

impl SweepReport {
    pub fn converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }

    /// Writes `sweep.json` and `sweep.csv` (one row per driver and threshold).
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&dir.join("sweep.json"), &json)?;
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(["driver", "epsilon", "n_star", "t_minutes"])?;
        for r in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_default();
            out.write_record([
                r.driver.clone(),
                r.epsilon.to_string(),
                opt(r.n_star.map(|n| n.to_string())),
                opt(r.t_star_minutes.map(|t| t.to_string())),
            ])?;
        }
        write_atomic(&dir.join("sweep.csv"), &out.into_inner()?)?;
        Ok(())
    }

    pub fn print_summary(&self) {
        println!("{:<12} {:>10} {:>10} {:>10}", "driver", "epsilon", "n*", "minutes");
        for r in &self.rows {
            let n = r.n_star.map_or("-".to_string(), |n| n.to_string());
            let t = r.t_star_minutes.map_or("-".to_string(), |t| t.to_string());
            println!("{:<12} {:>10e} {:>10} {:>10}", r.driver, r.epsilon, n, t);
        }
        for w in &self.warnings {
            eprintln!("warning: {w}");
        }
    }
}
