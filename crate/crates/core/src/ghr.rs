//! Synthetic car-following data from the Gazis-Herman-Rothery model.
//!
//! The follower obeys
//!
//! ```text
//! a(t) = c · v(t)^r · Δv(t − T) / Δx(t − T)^l
//! ```
//!
//! with `Δv` the lead minus follower speed and `Δx` the gap. The state is
//! integrated with explicit Euler at a small step and sampled at the output
//! rate. Before `t = 0` the follower is assumed to have been in its initial
//! state, so delayed terms read the initial gap and relative speed.
//!
//! Optional acceleration noise is Gaussian, redrawn once per output period and
//! held constant in between; the noise path therefore depends on the seed and
//! the output rate but not on the integration step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::{write_log, IngestError, SampleRecord};

#[derive(Debug, Error)]
pub enum GhrError {
    #[error("collision at t = {time:.2} s in {driver_id}/{trip_id}: gap fell to {gap:.3} m")]
    Collision { time: f64, gap: f64, driver_id: String, trip_id: String },
    #[error("invalid simulation setup: {0}")]
    InvalidSetup(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Minimum admissible gap before the run is aborted (m).
pub const COLLISION_GAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhrParams {
    /// Gain constant.
    pub c: f64,
    /// Speed exponent.
    pub r: f64,
    /// Spacing exponent.
    pub l: f64,
    /// Driver reaction time in seconds.
    pub reaction_time: f64,
}

/// One piece of the lead vehicle's speed profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LeadSegment {
    Constant { duration: f64, speed: f64 },
    Ramp { duration: f64, from: f64, to: f64 },
    Sinusoid { duration: f64, mean: f64, amplitude: f64, period: f64 },
}

impl LeadSegment {
    pub fn duration(&self) -> f64 {
        match *self {
            LeadSegment::Constant { duration, .. }
            | LeadSegment::Ramp { duration, .. }
            | LeadSegment::Sinusoid { duration, .. } => duration,
        }
    }

    /// Speed `t` seconds into the segment.
    fn speed(&self, t: f64) -> f64 {
        match *self {
            LeadSegment::Constant { speed, .. } => speed,
            LeadSegment::Ramp { duration, from, to } => {
                if duration > 0.0 {
                    from + (to - from) * (t / duration).clamp(0.0, 1.0)
                } else {
                    to
                }
            }
            LeadSegment::Sinusoid { mean, amplitude, period, .. } => {
                mean + amplitude * (std::f64::consts::TAU * t / period).sin()
            }
        }
    }

    fn lowest_speed(&self) -> f64 {
        match *self {
            LeadSegment::Constant { speed, .. } => speed,
            LeadSegment::Ramp { from, to, .. } => from.min(to),
            LeadSegment::Sinusoid { mean, amplitude, .. } => mean - amplitude.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterruptionKind {
    CutIn,
    LaneChange,
}

/// A flagged interval, relative to the trip start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interruption {
    pub time: f64,
    pub kind: InterruptionKind,
    /// Seconds the flag stays set; one output sample when absent.
    #[serde(default)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LeadProfile {
    pub segments: Vec<LeadSegment>,
    #[serde(default)]
    pub interruptions: Vec<Interruption>,
}

impl LeadProfile {
    pub fn validate(&self) -> Result<(), GhrError> {
        if self.segments.is_empty() {
            return Err(GhrError::InvalidSetup("lead profile has no segments".into()));
        }
        for s in &self.segments {
            if !(s.duration() >= 0.0 && s.duration().is_finite()) {
                return Err(GhrError::InvalidSetup("segment durations must be non-negative".into()));
            }
            if !(s.lowest_speed() >= 0.0) {
                return Err(GhrError::InvalidSetup("lead speed must stay non-negative".into()));
            }
            if let LeadSegment::Sinusoid { period, .. } = s {
                if !(*period > 0.0) {
                    return Err(GhrError::InvalidSetup("sinusoid period must be positive".into()));
                }
            }
        }
        if self.interruptions.iter().any(|i| !(i.time >= 0.0) || i.duration.is_some_and(|d| !(d >= 0.0))) {
            return Err(GhrError::InvalidSetup("interruption times must be non-negative".into()));
        }
        Ok(())
    }

    /// Lead speed at time `t`; the last segment's final value holds afterwards.
    pub fn speed_at(&self, t: f64) -> f64 {
        let mut start = 0.0;
        for s in &self.segments {
            if t < start + s.duration() {
                return s.speed(t - start);
            }
            start += s.duration();
        }
        self.segments.last().map_or(0.0, |s| s.speed(s.duration()))
    }

    fn flags_at(&self, t: f64, sample_period: f64) -> (bool, bool) {
        let mut lane_change = false;
        let mut cut_in = false;
        for i in &self.interruptions {
            let length = i.duration.unwrap_or(sample_period);
            // Half-sample slack absorbs rounding in k·dt.
            let slack = 0.5 * sample_period;
            if t >= i.time - slack && t < i.time + length - slack {
                match i.kind {
                    InterruptionKind::CutIn => cut_in = true,
                    InterruptionKind::LaneChange => lane_change = true,
                }
            }
        }
        (lane_change, cut_in)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    /// Follower speed (m/s).
    pub speed: f64,
    /// Gap to the lead vehicle (m).
    pub spacing: f64,
}

/// Everything needed to simulate one trip.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSetup {
    pub params: GhrParams,
    pub lead: LeadProfile,
    pub initial: InitialState,
    /// Integration step (s).
    pub dt: f64,
    /// Trip length (s).
    pub duration: f64,
    pub output_rate_hz: f64,
    /// Standard deviation of the additive acceleration noise (m/s²).
    pub noise_std: f64,
    pub driver_id: String,
    pub trip_id: String,
    /// Timestamp of the first output sample.
    pub start_time: f64,
}

impl SimulationSetup {
    pub fn new(params: GhrParams, lead: LeadProfile, initial: InitialState, duration: f64) -> Self {
        Self {
            params,
            lead,
            initial,
            dt: 0.01,
            duration,
            output_rate_hz: 10.0,
            noise_std: 0.0,
            driver_id: "driver".into(),
            trip_id: "trip".into(),
            start_time: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub records: Vec<SampleRecord>,
    pub warnings: Vec<String>,
}

fn whole_multiple(value: f64, step: f64) -> Option<usize> {
    let ratio = value / step;
    let rounded = ratio.round();
    ((ratio - rounded).abs() < 1e-6 && rounded >= 0.0).then_some(rounded as usize)
}

/// Integrates one trip and samples it at the output rate.
pub fn simulate(setup: &SimulationSetup, seed: u64) -> Result<Simulation, GhrError> {
    let invalid = |m: &str| Err(GhrError::InvalidSetup(m.to_string()));
    let p = setup.params;
    if !(setup.dt > 0.0 && setup.dt.is_finite()) {
        return invalid("dt must be positive");
    }
    if !(setup.initial.spacing > COLLISION_GAP) {
        return invalid("initial spacing must be positive");
    }
    if !(p.c.is_finite() && p.r.is_finite() && p.l.is_finite()) {
        return invalid("GHR constants must be finite");
    }
    if !(setup.noise_std >= 0.0) || !(setup.duration >= 0.0) || !(setup.output_rate_hz > 0.0) {
        return invalid("noise, duration and output rate must be non-negative");
    }
    let Some(delay) = (p.reaction_time >= 0.0).then(|| whole_multiple(p.reaction_time, setup.dt)).flatten() else {
        return invalid("reaction time must be a non-negative multiple of dt");
    };
    let sample_period = 1.0 / setup.output_rate_hz;
    let Some(every) = whole_multiple(sample_period, setup.dt).filter(|&e| e >= 1) else {
        return invalid("output period must be a multiple of dt");
    };
    setup.lead.validate()?;

    let steps = (setup.duration / setup.dt).round() as usize;
    let fractional_r = p.r.fract() != 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, setup.noise_std).map_err(|e| GhrError::InvalidSetup(e.to_string()))?;

    let mut speed = setup.initial.speed;
    let mut gap = setup.initial.spacing;
    let lead0 = setup.lead.speed_at(0.0);
    let ring = delay + 1;
    let mut history = vec![(lead0 - speed, gap); ring];
    let mut noise = 0.0;
    let mut clamped = false;
    let mut records = Vec::with_capacity(steps / every + 1);

    for k in 0..steps {
        let t = k as f64 * setup.dt;
        let lead = setup.lead.speed_at(t);
        let relative = lead - speed;
        history[k % ring] = (relative, gap);
        let (delayed_dv, delayed_gap) = history[(k + 1) % ring];

        if k % every == 0 && setup.noise_std > 0.0 {
            noise = normal.sample(&mut rng);
        }
        let accel = p.c * speed.powf(p.r) * delayed_dv / delayed_gap.powf(p.l) + noise;

        if k % every == 0 {
            let (lane_change, cut_in) = setup.lead.flags_at(t, sample_period);
            records.push(SampleRecord {
                timestamp: setup.start_time + t,
                driver_id: setup.driver_id.clone(),
                trip_id: setup.trip_id.clone(),
                v_e: speed,
                a_e: accel,
                delta_v: relative,
                delta_d: Some(gap),
                lane_change,
                cut_in,
            });
        }

        gap += relative * setup.dt;
        speed += accel * setup.dt;
        if speed <= 0.0 && fractional_r {
            speed = 0.0;
            clamped = true;
        }
        if gap <= COLLISION_GAP {
            return Err(GhrError::Collision {
                time: t + setup.dt,
                gap,
                driver_id: setup.driver_id.clone(),
                trip_id: setup.trip_id.clone(),
            });
        }
    }

    let mut warnings = Vec::new();
    if clamped {
        warnings.push(format!(
            "{}/{}: follower speed reached zero with non-integer r = {}; clamped at 0",
            setup.driver_id, setup.trip_id, p.r
        ));
    }
    Ok(Simulation { records, warnings })
}

/// Closed interval sampled uniformly by [`Scenario`] random trips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    fn valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.1 >= self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripSpec {
    pub id: String,
    pub duration: f64,
    pub initial: InitialState,
    pub lead: Vec<LeadSegment>,
    #[serde(default)]
    pub interruptions: Vec<Interruption>,
}

/// Recipe for trips whose lead vehicle cruises in sinusoidal segments joined
/// by ramps, all parameters drawn uniformly from the given ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTrips {
    pub count: usize,
    pub duration: Range,
    pub mean_speed: Range,
    pub amplitude: Range,
    pub period: Range,
    pub segment_duration: Range,
    pub ramp_duration: Range,
    pub initial_spacing: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSpec {
    pub id: String,
    pub params: GhrParams,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub trips: Vec<TripSpec>,
    #[serde(default)]
    pub random_trips: Option<RandomTrips>,
}

fn default_dt() -> f64 {
    0.01
}

fn default_rate() -> f64 {
    10.0
}

fn default_gap() -> f64 {
    60.0
}

/// A synthetic dataset description, normally read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_rate")]
    pub output_rate_hz: f64,
    /// Idle seconds between consecutive trips of a driver.
    #[serde(default = "default_gap")]
    pub gap_between_trips: f64,
    pub drivers: Vec<DriverSpec>,
}

/// Scenario shipped with the crate: one driver with about three hours of
/// randomized car following.
pub const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.toml");

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, GhrError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| GhrError::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn bundled() -> Self {
        Self::from_toml(DEFAULT_SCENARIO).expect("bundled scenario is valid")
    }

    pub fn validate(&self) -> Result<(), GhrError> {
        let bad = |m: String| Err(GhrError::Scenario(m));
        if self.drivers.is_empty() {
            return bad("no drivers".into());
        }
        if !(self.gap_between_trips >= 0.0) {
            return bad("gap_between_trips must be non-negative".into());
        }
        for d in &self.drivers {
            if d.trips.is_empty() && d.random_trips.as_ref().map_or(true, |r| r.count == 0) {
                return bad(format!("driver {} has no trips", d.id));
            }
            if let Some(r) = &d.random_trips {
                let ranges = [
                    r.duration,
                    r.mean_speed,
                    r.amplitude,
                    r.period,
                    r.segment_duration,
                    r.ramp_duration,
                    r.initial_spacing,
                ];
                if ranges.iter().any(|x| !x.valid()) {
                    return bad(format!("driver {}: ranges must be finite with lo <= hi", d.id));
                }
                if r.mean_speed.0 < r.amplitude.1 || r.period.0 <= 0.0 || r.segment_duration.0 <= 0.0 {
                    return bad(format!("driver {}: random lead speeds could go negative", d.id));
                }
            }
        }
        Ok(())
    }

    fn random_trip(spec: &RandomTrips, id: String, rng: &mut impl Rng) -> TripSpec {
        let duration = spec.duration.sample(rng);
        let mut lead = Vec::new();
        let mut elapsed = 0.0;
        let mut current: Option<f64> = None;
        while elapsed < duration {
            let mean = spec.mean_speed.sample(rng);
            if let Some(from) = current {
                let ramp = spec.ramp_duration.sample(rng);
                lead.push(LeadSegment::Ramp { duration: ramp, from, to: mean });
                elapsed += ramp;
            }
            let segment = LeadSegment::Sinusoid {
                duration: spec.segment_duration.sample(rng),
                mean,
                amplitude: spec.amplitude.sample(rng),
                period: spec.period.sample(rng),
            };
            elapsed += segment.duration();
            current = Some(segment.speed(segment.duration()));
            lead.push(segment);
        }
        let initial_speed = lead[0].speed(0.0);
        TripSpec {
            id,
            duration,
            initial: InitialState { speed: initial_speed, spacing: spec.initial_spacing.sample(rng) },
            lead,
            interruptions: Vec::new(),
        }
    }

    /// Expands the scenario into per-trip simulation setups and noise seeds.
    pub fn setups(&self, seed: u64) -> Vec<(SimulationSetup, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for driver in &self.drivers {
            let mut trips = driver.trips.clone();
            if let Some(random) = &driver.random_trips {
                for _ in 0..random.count {
                    trips.push(Self::random_trip(random, format!("trip-{:03}", trips.len() + 1), &mut rng));
                }
            }
            let mut start = 0.0;
            for trip in trips {
                let setup = SimulationSetup {
                    params: driver.params,
                    lead: LeadProfile { segments: trip.lead, interruptions: trip.interruptions },
                    initial: trip.initial,
                    dt: self.dt,
                    duration: trip.duration,
                    output_rate_hz: self.output_rate_hz,
                    noise_std: driver.noise_std,
                    driver_id: driver.id.clone(),
                    trip_id: trip.id,
                    start_time: start,
                };
                start += trip.duration + self.gap_between_trips;
                out.push((setup, rng.random::<u64>()));
            }
        }
        out
    }

    /// Simulates every trip; records are ordered by driver, then trip.
    pub fn simulate_all(&self, seed: u64) -> Result<Simulation, GhrError> {
        self.validate()?;
        let runs = self
            .setups(seed)
            .par_iter()
            .map(|(setup, trip_seed)| simulate(setup, *trip_seed))
            .collect::<Result<Vec<_>, _>>()?;
        let mut all = Simulation { records: Vec::new(), warnings: Vec::new() };
        for run in runs {
            all.records.extend(run.records);
            all.warnings.extend(run.warnings);
        }
        Ok(all)
    }
}

/// Simulates `scenario` and renders it in the canonical log format.
pub fn generate_dataset(scenario: &Scenario, seed: u64) -> Result<Vec<u8>, GhrError> {
    let simulation = scenario.simulate_all(seed)?;
    let mut bytes = Vec::new();
    write_log(&simulation.records, &mut bytes)?;
    Ok(bytes)
}
