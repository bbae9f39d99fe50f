//! Driving-log parsing and car-following event extraction.
//!
//! Logs are delimited text with a header row. The canonical columns are
//! `timestamp,driver_id,trip_id,v_e,a_e,delta_v,delta_d,lane_change,cut_in`;
//! booleans are `0`/`1` and an empty `delta_d` means no preceding vehicle.
//! Any column can be renamed through a [`ColumnMap`].

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("unknown variable `{0}` (expected one of v_e, a_e, delta_v, delta_d)")]
    UnknownVariable(String),
    #[error("unknown column field `{0}`")]
    UnknownField(String),
    #[error("no car-following events to pool")]
    NoEvents,
    #[error("invalid scenario rules: {0}")]
    InvalidRules(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One observation of the car-following variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Seconds since an arbitrary per-driver origin.
    pub timestamp: f64,
    pub driver_id: String,
    pub trip_id: String,
    /// Ego speed, m/s.
    pub v_e: f64,
    /// Ego acceleration, m/s².
    pub a_e: f64,
    /// Preceding minus ego speed, m/s.
    pub delta_v: f64,
    /// Gap to the preceding vehicle in metres; `None` when there is no target.
    pub delta_d: Option<f64>,
    pub lane_change: bool,
    pub cut_in: bool,
}

/// The four car-following variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variable {
    #[serde(rename = "v_e")]
    EgoSpeed,
    #[serde(rename = "a_e")]
    EgoAcceleration,
    #[serde(rename = "delta_v")]
    RelativeSpeed,
    #[serde(rename = "delta_d")]
    RelativeDistance,
}

impl Variable {
    pub const ALL: [Variable; 4] = [
        Variable::EgoSpeed,
        Variable::EgoAcceleration,
        Variable::RelativeSpeed,
        Variable::RelativeDistance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::EgoSpeed => "v_e",
            Variable::EgoAcceleration => "a_e",
            Variable::RelativeSpeed => "delta_v",
            Variable::RelativeDistance => "delta_d",
        }
    }

    /// Value of this variable in `record`. A missing gap reads as NaN.
    pub fn of(self, record: &SampleRecord) -> f64 {
        match self {
            Variable::EgoSpeed => record.v_e,
            Variable::EgoAcceleration => record.a_e,
            Variable::RelativeSpeed => record.delta_v,
            Variable::RelativeDistance => record.delta_d.unwrap_or(f64::NAN),
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variable {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variable::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| IngestError::UnknownVariable(s.to_string()))
    }
}

/// Header names for each field of [`SampleRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub timestamp: String,
    pub driver_id: String,
    pub trip_id: String,
    pub v_e: String,
    pub a_e: String,
    pub delta_v: String,
    pub delta_d: String,
    pub lane_change: String,
    pub cut_in: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            driver_id: "driver_id".into(),
            trip_id: "trip_id".into(),
            v_e: "v_e".into(),
            a_e: "a_e".into(),
            delta_v: "delta_v".into(),
            delta_d: "delta_d".into(),
            lane_change: "lane_change".into(),
            cut_in: "cut_in".into(),
        }
    }
}

impl ColumnMap {
    pub const HEADER: [&'static str; 9] = [
        "timestamp",
        "driver_id",
        "trip_id",
        "v_e",
        "a_e",
        "delta_v",
        "delta_d",
        "lane_change",
        "cut_in",
    ];

    /// Renames the column that holds canonical field `field`.
    pub fn rename(&mut self, field: &str, column: &str) -> Result<(), IngestError> {
        let slot = match field {
            "timestamp" => &mut self.timestamp,
            "driver_id" => &mut self.driver_id,
            "trip_id" => &mut self.trip_id,
            "v_e" => &mut self.v_e,
            "a_e" => &mut self.a_e,
            "delta_v" => &mut self.delta_v,
            "delta_d" => &mut self.delta_d,
            "lane_change" => &mut self.lane_change,
            "cut_in" => &mut self.cut_in,
            other => return Err(IngestError::UnknownField(other.to_string())),
        };
        *slot = column.to_string();
        Ok(())
    }

    fn names(&self) -> [&str; 9] {
        [
            &self.timestamp,
            &self.driver_id,
            &self.trip_id,
            &self.v_e,
            &self.a_e,
            &self.delta_v,
            &self.delta_d,
            &self.lane_change,
            &self.cut_in,
        ]
    }
}

/// A row that could not be turned into a [`SampleRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    /// 1-based line number in the input, counting the header as line 1.
    pub line: u64,
    pub column: String,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: column `{}`: {}", self.line, self.column, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    /// Records grouped by (driver, trip) in order of first appearance, file order within a group.
    pub records: Vec<SampleRecord>,
    pub row_errors: Vec<RowError>,
}

/// Parses a delimited driving log. Comma is the default delimiter; a header
/// containing tabs and no commas switches to tab-separated input.
pub fn parse_log<R: Read>(mut input: R, columns: &ColumnMap) -> Result<ParsedLog, IngestError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let header_line = bytes.split(|&b| b == b'\n').next().unwrap_or(&[]);
    let delimiter = if header_line.contains(&b'\t') && !header_line.contains(&b',') {
        b'\t'
    } else {
        b','
    };

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());

    let headers = reader.headers()?.clone();
    let mut index = [0usize; 9];
    for (slot, name) in index.iter_mut().zip(columns.names()) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
    }
    let names = columns.names();

    let mut groups: Vec<Vec<SampleRecord>> = Vec::new();
    let mut group_of: HashMap<(String, String), usize> = HashMap::new();
    let mut row_errors = Vec::new();

    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |k: usize| row.get(index[k]);
        let mut error = None;
        let mut fail = |k: usize, message: String| {
            if error.is_none() {
                error = Some(RowError { line, column: names[k].to_string(), message });
            }
        };

        let number = |k: usize, fail: &mut dyn FnMut(usize, String)| -> f64 {
            match field(k) {
                None => {
                    fail(k, "missing field".into());
                    f64::NAN
                }
                Some(s) => match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        fail(k, format!("non-numeric value `{s}`"));
                        f64::NAN
                    }
                },
            }
        };
        let flag = |k: usize, fail: &mut dyn FnMut(usize, String)| -> bool {
            match field(k) {
                Some("1") | Some("true") => true,
                Some("0") | Some("false") | Some("") => false,
                Some(s) => {
                    fail(k, format!("expected 0 or 1, got `{s}`"));
                    false
                }
                None => {
                    fail(k, "missing field".into());
                    false
                }
            }
        };

        let timestamp = number(0, &mut fail);
        let v_e = number(3, &mut fail);
        let a_e = number(4, &mut fail);
        let delta_v = number(5, &mut fail);
        let delta_d = match field(6) {
            Some("") => None,
            _ => {
                let d = number(6, &mut fail);
                if d < 0.0 {
                    fail(6, format!("negative distance {d}"));
                }
                Some(d)
            }
        };
        let lane_change = flag(7, &mut fail);
        let cut_in = flag(8, &mut fail);
        let driver_id = field(1).unwrap_or_default().to_string();
        let trip_id = field(2).unwrap_or_default().to_string();
        if field(1).is_none() {
            fail(1, "missing field".into());
        }
        if field(2).is_none() {
            fail(2, "missing field".into());
        }

        if let Some(e) = error {
            row_errors.push(e);
            continue;
        }
        let key = (driver_id.clone(), trip_id.clone());
        let g = *group_of.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(SampleRecord {
            timestamp,
            driver_id,
            trip_id,
            v_e,
            a_e,
            delta_v,
            delta_d,
            lane_change,
            cut_in,
        });
    }

    Ok(ParsedLog { records: groups.into_iter().flatten().collect(), row_errors })
}

/// Writes records in the canonical log format.
pub fn write_log<W: std::io::Write>(records: &[SampleRecord], out: W) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(ColumnMap::HEADER)?;
    for r in records {
        writer.write_record([
            r.timestamp.to_string(),
            r.driver_id.clone(),
            r.trip_id.clone(),
            r.v_e.to_string(),
            r.a_e.to_string(),
            r.delta_v.to_string(),
            r.delta_d.map(|d| d.to_string()).unwrap_or_default(),
            u8::from(r.lane_change).to_string(),
            u8::from(r.cut_in).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Thresholds that define a car-following event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRules {
    /// Largest admissible gap to the preceding vehicle, inclusive (m).
    pub max_distance: f64,
    /// Ego speed must be strictly above this (m/s).
    pub min_speed: f64,
    /// Shortest event kept, inclusive (s).
    pub min_duration: f64,
    /// Drivers with fewer events than this are flagged.
    pub min_events_per_driver: usize,
    /// Nominal sample rate (Hz).
    pub sample_rate_hz: f64,
    /// A timestamp step larger than this many sample periods ends an event.
    pub max_gap_periods: f64,
}

impl Default for ScenarioRules {
    fn default() -> Self {
        Self {
            max_distance: 120.0,
            min_speed: 5.0,
            min_duration: 30.0,
            min_events_per_driver: 300,
            sample_rate_hz: 10.0,
            max_gap_periods: 1.5,
        }
    }
}

impl ScenarioRules {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidRules(m.to_string()));
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample rate must be positive");
        }
        if !(self.max_gap_periods >= 1.0 && self.max_gap_periods <= 2.0) {
            return bad("max_gap_periods must lie in [1, 2]");
        }
        if !(self.max_distance >= 0.0) || !(self.min_duration >= 0.0) || self.min_speed.is_nan() {
            return bad("thresholds must be non-negative numbers");
        }
        Ok(())
    }

    /// Whether a single sample is admissible inside a car-following event.
    pub fn admits(&self, r: &SampleRecord) -> bool {
        let close = matches!(r.delta_d, Some(d) if d >= 0.0 && d <= self.max_distance);
        close && r.v_e > self.min_speed && !r.lane_change && !r.cut_in
    }

    fn period(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    fn continues(&self, prev: &SampleRecord, next: &SampleRecord) -> bool {
        let step = next.timestamp - prev.timestamp;
        prev.driver_id == next.driver_id
            && prev.trip_id == next.trip_id
            && step > 0.0
            && step <= self.max_gap_periods * self.period()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarFollowingEvent {
    pub driver_id: String,
    pub trip_id: String,
    pub samples: Vec<SampleRecord>,
    /// Span covered by the samples, counting the last sample's period.
    pub duration: f64,
}

impl CarFollowingEvent {
    pub fn start(&self) -> f64 {
        self.samples.first().map_or(f64::NAN, |s| s.timestamp)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriverEventCount {
    pub driver_id: String,
    pub events: usize,
    /// Set when `events` is below [`ScenarioRules::min_events_per_driver`].
    pub below_minimum: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EventSet {
    pub events: Vec<CarFollowingEvent>,
    /// One entry per driver seen in the input, in order of first appearance.
    pub per_driver: Vec<DriverEventCount>,
}

impl EventSet {
    pub fn total_samples(&self) -> usize {
        self.events.iter().map(CarFollowingEvent::len).sum()
    }

    pub fn events_for<'a>(&'a self, driver: &'a str) -> impl Iterator<Item = &'a CarFollowingEvent> + 'a {
        self.events.iter().filter(move |e| e.driver_id == driver)
    }
}

/// Cuts records into maximal runs of admissible, contiguous samples and keeps
/// those lasting at least `rules.min_duration`.
///
/// `records` must be sorted by (driver, trip, timestamp), as [`parse_log`]
/// returns them for well-formed logs.
pub fn extract_events(records: &[SampleRecord], rules: &ScenarioRules) -> EventSet {
    let mut events = Vec::new();
    let mut drivers: Vec<DriverEventCount> = Vec::new();
    let mut run: Vec<SampleRecord> = Vec::new();

    let close_run = |run: &mut Vec<SampleRecord>, events: &mut Vec<CarFollowingEvent>| {
        if let (Some(first), Some(last)) = (run.first(), run.last()) {
            let duration = last.timestamp - first.timestamp + rules.period();
            if duration + 1e-9 >= rules.min_duration {
                events.push(CarFollowingEvent {
                    driver_id: first.driver_id.clone(),
                    trip_id: first.trip_id.clone(),
                    duration,
                    samples: std::mem::take(run),
                });
            }
        }
        run.clear();
    };

    for r in records {
        if drivers.last().map_or(true, |d| d.driver_id != r.driver_id)
            && !drivers.iter().any(|d| d.driver_id == r.driver_id)
        {
            drivers.push(DriverEventCount { driver_id: r.driver_id.clone(), events: 0, below_minimum: false });
        }
        if !rules.admits(r) {
            close_run(&mut run, &mut events);
            continue;
        }
        if let Some(prev) = run.last() {
            if !rules.continues(prev, r) {
                close_run(&mut run, &mut events);
            }
        }
        run.push(r.clone());
    }
    close_run(&mut run, &mut events);

    for d in &mut drivers {
        d.events = events.iter().filter(|e| e.driver_id == d.driver_id).count();
        d.below_minimum = d.events < rules.min_events_per_driver;
    }
    EventSet { events, per_driver: drivers }
}

/// Orders events by driver, trip and start time.
pub fn sort_chronologically(events: &mut [CarFollowingEvent]) {
    events.sort_by(|a, b| {
        (&a.driver_id, &a.trip_id)
            .cmp(&(&b.driver_id, &b.trip_id))
            .then(a.start().total_cmp(&b.start()))
    });
}

/// Concatenates one variable across events, in the order the events are given.
pub fn pool_variable(events: &[CarFollowingEvent], which: Variable) -> Result<Vec<f64>, IngestError> {
    if events.is_empty() {
        return Err(IngestError::NoEvents);
    }
    Ok(events.iter().flat_map(|e| e.samples.iter().map(move |s| which.of(s))).collect())
}
