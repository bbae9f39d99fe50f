//! Block-wise convergence analysis: how many samples until the density stops moving.
//!
//! The data is grown in blocks of `m` samples. After every block the density
//! is re-estimated (with its own Silverman bandwidth) on a grid frozen from the
//! full dataset, and the KL divergence between the new and previous estimate
//! is recorded. The sufficiency point `n*` is the first `n` for which
//!
//! ```text
//! | KL(f(n+m) ‖ f(n)) − KL(f(n+2m) ‖ f(n+m)) | ≤ ε
//! ```
//!
//! i.e. the left entry of the first pair of consecutive trace values that
//! differ by at most `ε`. Several variables are combined by taking the largest
//! per-variable `n*`, and sample counts convert to minutes as `n / (f · 60)`.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{kl_divergence_with, DivergenceError, KlOptions, KlValue, MultivariateWeighting};
use crate::ingestion::{pool_variable, CarFollowingEvent, IngestError, Variable};
use crate::kde::{
    build_grid, kde_with, silverman_bandwidth_matrix, Bandwidth, DensityEstimate, Grid, KdeError, KdeMethod,
    MatrixView, SampleMatrix,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SufficiencyError {
    #[error("insufficient data for analysis: need at least {needed} samples (3 blocks of {block_size}), got {got}")]
    InsufficientData { needed: usize, got: usize, block_size: usize },
    #[error("a trace needs at least 2 entries to test convergence, got {0}")]
    TraceTooShort(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{series}: {source}")]
    Series { series: Series, source: Box<SufficiencyError> },
    #[error(transparent)]
    Kde(#[from] KdeError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisMode {
    /// One trace per variable, combined with the max rule.
    #[default]
    Univariate,
    /// One trace of the joint density of all selected variables.
    Multivariate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyConfig {
    /// Block size `m` in samples.
    pub block_size: usize,
    pub epsilon: f64,
    /// Sample rate in Hz, used for the minutes conversion.
    pub rate_hz: f64,
    /// Grid resolution of univariate estimates.
    pub grid_points: usize,
    /// Grid resolution per dimension of joint estimates.
    pub grid_points_per_dim: usize,
    /// Grid padding beyond the data range, in bandwidths.
    pub pad_factor: f64,
    pub mode: AnalysisMode,
    pub variables: Vec<Variable>,
    pub weighting: MultivariateWeighting,
}

impl Default for SufficiencyConfig {
    fn default() -> Self {
        Self {
            block_size: 2000,
            epsilon: 1e-4,
            rate_hz: 10.0,
            grid_points: 256,
            grid_points_per_dim: 15,
            pad_factor: 4.0,
            mode: AnalysisMode::Univariate,
            variables: Variable::ALL.to_vec(),
            weighting: MultivariateWeighting::GridSum,
        }
    }
}

impl SufficiencyConfig {
    pub fn validate(&self) -> Result<(), SufficiencyError> {
        let bad = |m: &str| Err(SufficiencyError::InvalidConfig(m.to_string()));
        if self.block_size == 0 {
            return bad("block size must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return bad("sample rate must be positive");
        }
        if self.grid_points < 2 || self.grid_points_per_dim < 2 {
            return bad("grids need at least 2 points per dimension");
        }
        if !(self.pad_factor >= 0.0 && self.pad_factor.is_finite()) {
            return bad("pad factor must be non-negative");
        }
        if self.variables.is_empty() {
            return bad("no variables selected");
        }
        let mut seen = self.variables.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variables.len() {
            return bad("variables listed more than once");
        }
        Ok(())
    }

    /// Smallest sample count that yields two trace entries.
    pub fn min_samples(&self) -> usize {
        3 * self.block_size
    }

    fn points_for(&self, dim: usize) -> usize {
        if dim == 1 {
            self.grid_points
        } else {
            self.grid_points_per_dim
        }
    }
}

/// Minutes of driving represented by `n` samples at `rate_hz`.
pub fn minutes_for(n: usize, rate_hz: f64) -> f64 {
    n as f64 / (rate_hz * 60.0)
}

/// What a trace describes: one variable or the joint density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    Variable(Variable),
    Joint,
}

impl fmt::Display for Series {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Series::Variable(v) => write!(f, "{v}"),
            Series::Joint => f.write_str("joint"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry<T> {
    /// Size of the older prefix; the divergence compares prefix `n + m` against prefix `n`.
    pub n: usize,
    pub kl: KlValue<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlTrace<T> {
    pub block_size: usize,
    pub entries: Vec<TraceEntry<T>>,
}

impl<T: Scalar> KlTrace<T> {
    /// Builds a trace from raw divergence values at `n = m, 2m, …`.
    pub fn from_values(block_size: usize, values: &[T]) -> Self {
        let entries = values
            .iter()
            .enumerate()
            .map(|(k, &value)| {
                let n = (k + 1) * block_size;
                TraceEntry { n, kl: KlValue { value, n_new: n + block_size, n_old: n } }
            })
            .collect();
        Self { block_size, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.entries.iter().map(|e| e.kl.value)
    }

    pub fn value_at(&self, n: usize) -> Option<T> {
        self.entries.iter().find(|e| e.n == n).map(|e| e.kl.value)
    }

    pub fn terminal(&self) -> Option<T> {
        self.entries.last().map(|e| e.kl.value)
    }
}

/// Produces a density estimate for a prefix of the data on a fixed grid.
pub trait DensityEstimator<T: Scalar>: Sync {
    fn estimate(&self, samples: MatrixView<'_, T>, grid: &Grid<T>) -> Result<DensityEstimate<T>, KdeError>;
}

/// Gaussian KDE with a per-prefix Silverman bandwidth.
#[derive(Debug, Clone, Copy)]
pub struct SilvermanKde<T> {
    pub method: KdeMethod<T>,
}

impl<T: Scalar> Default for SilvermanKde<T> {
    fn default() -> Self {
        Self { method: KdeMethod::default() }
    }
}

impl<T: Scalar> DensityEstimator<T> for SilvermanKde<T> {
    fn estimate(&self, samples: MatrixView<'_, T>, grid: &Grid<T>) -> Result<DensityEstimate<T>, KdeError> {
        let bandwidth = silverman_bandwidth_matrix(samples)?;
        kde_with(samples, grid, &bandwidth, self.method)
    }
}

/// Largest Silverman bandwidth over the prefixes `m, 2m, …, last`, per dimension,
/// from running moments. Only used to size the grid padding.
fn widest_prefix_bandwidth<T: Scalar>(samples: MatrixView<'_, T>, m: usize, last: usize) -> Result<Bandwidth<T>, KdeError> {
    let dim = samples.dim();
    let mut widest = vec![0.0_f64; dim];
    let mut mean = vec![0.0_f64; dim];
    let mut m2 = vec![0.0_f64; dim];
    for i in 0..last {
        let row = samples.row(i);
        let count = (i + 1) as f64;
        for d in 0..dim {
            let x = row[d].as_f64();
            if !x.is_finite() {
                return Err(KdeError::NonFiniteSample { dim: d });
            }
            let delta = x - mean[d];
            mean[d] += delta / count;
            m2[d] += delta * (x - mean[d]);
        }
        if (i + 1) % m == 0 && i + 1 >= 2 {
            for d in 0..dim {
                let sigma = (m2[d] / (count - 1.0)).sqrt();
                widest[d] = widest[d].max(1.06 * sigma * count.powf(-0.2));
            }
        }
    }
    if let Some(d) = widest.iter().position(|&h| !(h > 0.0)) {
        return Err(KdeError::DegenerateVariable { dim: d });
    }
    Bandwidth::new(widest.into_iter().map(T::of).collect())
}

/// KL trace over prefixes of `samples` using Silverman-bandwidth Gaussian KDE.
pub fn kl_trace<T: Scalar>(samples: MatrixView<'_, T>, config: &SufficiencyConfig) -> Result<KlTrace<T>, SufficiencyError> {
    kl_trace_with(samples, config, &SilvermanKde::default())
}

/// KL trace with a caller-supplied estimator.
pub fn kl_trace_with<T: Scalar, E: DensityEstimator<T> + ?Sized>(
    samples: MatrixView<'_, T>,
    config: &SufficiencyConfig,
    estimator: &E,
) -> Result<KlTrace<T>, SufficiencyError> {
    config.validate()?;
    let m = config.block_size;
    let total = samples.rows();
    if total < config.min_samples() {
        return Err(SufficiencyError::InsufficientData { needed: config.min_samples(), got: total, block_size: m });
    }
    let prefixes = total / m;
    let used = prefixes * m;

    let pad_bandwidth = widest_prefix_bandwidth(samples, m, used)?;
    let grid = build_grid(samples, &pad_bandwidth, config.points_for(samples.dim()), T::of(config.pad_factor))?;
    let options = KlOptions { weighting: config.weighting, ..KlOptions::default() };

    let mut entries = Vec::with_capacity(prefixes - 1);
    let mut previous = estimator.estimate(samples.prefix(m), &grid)?;
    for k in 1..prefixes {
        let next = estimator.estimate(samples.prefix((k + 1) * m), &grid)?;
        let kl = kl_divergence_with(&next, &previous, &options)?;
        entries.push(TraceEntry { n: k * m, kl });
        previous = next;
    }
    Ok(KlTrace { block_size: m, entries })
}

/// First `n` whose divergence differs from the next entry's by at most `epsilon`.
/// `Ok(None)` means the trace never flattens.
pub fn find_n_star<T: Scalar>(trace: &KlTrace<T>, epsilon: f64) -> Result<Option<usize>, SufficiencyError> {
    if trace.len() < 2 {
        return Err(SufficiencyError::TraceTooShort(trace.len()));
    }
    let epsilon = T::of(epsilon);
    Ok(trace
        .entries
        .windows(2)
        .find(|pair| (pair[0].kl.value - pair[1].kl.value).abs() <= epsilon)
        .map(|pair| pair[0].n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesOutcome<T> {
    pub n_star: Option<usize>,
    pub t_star_minutes: Option<f64>,
    pub trace: KlTrace<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficiencyResult<T> {
    pub per_series: BTreeMap<Series, SeriesOutcome<T>>,
    /// Largest per-series `n*`; `None` unless every series converged.
    pub overall_n_star: Option<usize>,
    pub overall_t_star_minutes: Option<f64>,
    /// Series whose trace never satisfied the criterion.
    pub not_converged: Vec<Series>,
    pub config: SufficiencyConfig,
}

impl<T> SufficiencyResult<T> {
    pub fn converged(&self) -> bool {
        self.overall_n_star.is_some()
    }
}

/// Per-series traces, ready for any number of thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct Traces<T> {
    pub traces: Vec<(Series, KlTrace<T>)>,
}

fn pooled_columns<T: Scalar>(events: &[CarFollowingEvent], variables: &[Variable]) -> Result<Vec<Vec<T>>, SufficiencyError> {
    variables
        .iter()
        .map(|&v| Ok(pool_variable(events, v)?.into_iter().map(T::of).collect()))
        .collect()
}

/// Computes the traces `analyze` needs for the configured mode.
pub fn compute_traces<T: Scalar, E: DensityEstimator<T> + ?Sized>(
    events: &[CarFollowingEvent],
    config: &SufficiencyConfig,
    estimator: &E,
) -> Result<Traces<T>, SufficiencyError> {
    config.validate()?;
    let columns = pooled_columns::<T>(events, &config.variables)?;
    let traces = match config.mode {
        AnalysisMode::Univariate => config
            .variables
            .par_iter()
            .zip(columns.par_iter())
            .map(|(&v, column)| {
                let series = Series::Variable(v);
                kl_trace_with(MatrixView::column(column), config, estimator)
                    .map(|t| (series, t))
                    .map_err(|e| SufficiencyError::Series { series, source: Box::new(e) })
            })
            .collect::<Result<Vec<_>, _>>()?,
        AnalysisMode::Multivariate => {
            let matrix = SampleMatrix::from_columns(&columns)?;
            let trace = kl_trace_with(matrix.view(), config, estimator)
                .map_err(|e| SufficiencyError::Series { series: Series::Joint, source: Box::new(e) })?;
            vec![(Series::Joint, trace)]
        }
    };
    Ok(Traces { traces })
}

/// Applies the threshold and max rule to precomputed traces.
pub fn summarize<T: Scalar>(traces: &Traces<T>, config: &SufficiencyConfig) -> Result<SufficiencyResult<T>, SufficiencyError> {
    config.validate()?;
    let mut per_series = BTreeMap::new();
    for (series, trace) in &traces.traces {
        let n_star = find_n_star(trace, config.epsilon)?;
        let outcome = SeriesOutcome {
            n_star,
            t_star_minutes: n_star.map(|n| minutes_for(n, config.rate_hz)),
            trace: trace.clone(),
        };
        per_series.insert(*series, outcome);
    }
    let not_converged: Vec<Series> =
        per_series.iter().filter(|(_, o)| o.n_star.is_none()).map(|(s, _)| *s).collect();
    let overall_n_star = if not_converged.is_empty() {
        per_series.values().filter_map(|o| o.n_star).max()
    } else {
        None
    };
    Ok(SufficiencyResult {
        per_series,
        overall_n_star,
        overall_t_star_minutes: overall_n_star.map(|n| minutes_for(n, config.rate_hz)),
        not_converged,
        config: config.clone(),
    })
}

/// Full analysis of the pooled events: traces, per-series `n*` and overall `n*`.
pub fn analyze<T: Scalar>(events: &[CarFollowingEvent], config: &SufficiencyConfig) -> Result<SufficiencyResult<T>, SufficiencyError> {
    analyze_with(events, config, &SilvermanKde::default())
}

pub fn analyze_with<T: Scalar, E: DensityEstimator<T> + ?Sized>(
    events: &[CarFollowingEvent],
    config: &SufficiencyConfig,
    estimator: &E,
) -> Result<SufficiencyResult<T>, SufficiencyError> {
    summarize(&compute_traces(events, config, estimator)?, config)
}

/// Runs the analysis for each threshold, computing the traces only once.
pub fn epsilon_sweep<T: Scalar>(
    events: &[CarFollowingEvent],
    config: &SufficiencyConfig,
    epsilons: &[f64],
) -> Result<Vec<(f64, SufficiencyResult<T>)>, SufficiencyError> {
    epsilon_sweep_with(events, config, epsilons, &SilvermanKde::default())
}

pub fn epsilon_sweep_with<T: Scalar, E: DensityEstimator<T> + ?Sized>(
    events: &[CarFollowingEvent],
    config: &SufficiencyConfig,
    epsilons: &[f64],
    estimator: &E,
) -> Result<Vec<(f64, SufficiencyResult<T>)>, SufficiencyError> {
    validate_epsilons(epsilons)?;
    let traces = compute_traces(events, config, estimator)?;
    sweep_traces(&traces, config, epsilons)
}

/// Threshold sweep over traces that were computed elsewhere.
pub fn sweep_traces<T: Scalar>(
    traces: &Traces<T>,
    config: &SufficiencyConfig,
    epsilons: &[f64],
) -> Result<Vec<(f64, SufficiencyResult<T>)>, SufficiencyError> {
    validate_epsilons(epsilons)?;
    epsilons
        .iter()
        .map(|&epsilon| {
            let config = SufficiencyConfig { epsilon, ..config.clone() };
            Ok((epsilon, summarize(traces, &config)?))
        })
        .collect()
}

fn validate_epsilons(epsilons: &[f64]) -> Result<(), SufficiencyError> {
    if epsilons.is_empty() {
        return Err(SufficiencyError::InvalidConfig("epsilon list is empty".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(SufficiencyError::InvalidConfig("epsilons must be positive".into()));
    }
    let mut sorted = epsilons.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(SufficiencyError::InvalidConfig("epsilons must be distinct".into()));
    }
    Ok(())
}
