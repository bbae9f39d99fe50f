//! How much driving data is enough?
//!
//! `datasuff_core` estimates the smallest amount of longitudinal driving data
//! whose kernel density estimate stops changing as more data arrives. The
//! pipeline is:
//!
//! 1. [`ingestion`] parses 10 Hz driving logs and cuts them into
//!    car-following events.
//! 2. [`kde`] builds Gaussian kernel density estimates on a frozen grid.
//! 3. [`divergence`] measures the KL divergence between consecutive estimates.
//! 4. [`sufficiency`] grows the data in blocks, records the KL trace and finds
//!    the first point where the trace flattens below a threshold.
//!
//! [`ghr`] generates synthetic car-following data so the whole pipeline can be
//! exercised without proprietary recordings.
//!
//! The numerical modules are generic over the scalar type (see [`Scalar`]);
//! the aliases below fix the common `f64` instantiation.

pub mod divergence;
pub mod ghr;
pub mod ingestion;
pub mod kde;
mod scalar;
pub mod sufficiency;

pub use scalar::Scalar;

pub use divergence::{kl_divergence, KlOptions, KlValue, MultivariateWeighting};
pub use ingestion::{
    extract_events, parse_log, pool_variable, write_log, CarFollowingEvent, ColumnMap, EventSet, ParsedLog,
    SampleRecord, ScenarioRules, Variable,
};
pub use kde::{
    build_grid, kde_multivariate, kde_univariate, kde_with, silverman_bandwidth, silverman_bandwidth_matrix, Axis,
    Bandwidth, DensityEstimate, Grid, KdeMethod, MatrixView, SampleMatrix,
};
pub use sufficiency::{
    analyze, compute_traces, epsilon_sweep, find_n_star, kl_trace, minutes_for, summarize, AnalysisMode, KlTrace,
    Series, SeriesOutcome, SufficiencyConfig, SufficiencyResult,
};

pub type DensityEstimateF64 = kde::DensityEstimate<f64>;
pub type GridF64 = kde::Grid<f64>;
pub type BandwidthF64 = kde::Bandwidth<f64>;
pub type SampleMatrixF64 = kde::SampleMatrix<f64>;
pub type KlValueF64 = divergence::KlValue<f64>;
pub type KlTraceF64 = sufficiency::KlTrace<f64>;
pub type SufficiencyResultF64 = sufficiency::SufficiencyResult<f64>;

pub type DensityEstimateF32 = kde::DensityEstimate<f32>;
pub type GridF32 = kde::Grid<f32>;
pub type KlTraceF32 = sufficiency::KlTrace<f32>;
pub type SufficiencyResultF32 = sufficiency::SufficiencyResult<f32>;
