//! Kullback-Leibler divergence between two density estimates on a shared grid.
//!
//! One-dimensional estimates are integrated with the trapezoidal rule. For two
//! or more dimensions the default is the plain sum of `p·ln(p/q)` over grid
//! points with no cell-volume factor; [`MultivariateWeighting::VolumeWeighted`]
//! switches to product-trapezoid quadrature, which approximates the integral.
//!
//! By default `q` is first rescaled to carry the same mass as `p` under the
//! same weights. On a finite grid the estimates rarely carry identical mass
//! (tails fall outside, and a coarse joint grid is no quadrature at all), and
//! the raw sum can then go negative. After rescaling the result is the mass of
//! `p` times a discrete KL, so it is nonnegative, and it is unchanged whenever
//! the masses already agree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kde::DensityEstimate;
use crate::scalar::{compensated_sum, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivergenceError {
    #[error("estimates are defined on different grids")]
    GridMismatch,
    #[error("negative or non-finite density {value} at grid point {index}")]
    InvalidDensity { index: usize, value: f64 },
    #[error("density has zero mass on the grid")]
    ZeroMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultivariateWeighting {
    /// `Σ p(x̃ᵢ)·ln(p(x̃ᵢ)/q(x̃ᵢ))` over grid points.
    #[default]
    GridSum,
    /// Product-trapezoid quadrature of `p·ln(p/q)`.
    VolumeWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlOptions<T> {
    pub weighting: MultivariateWeighting,
    /// Points where `p` is below this contribute nothing.
    pub p_floor: T,
    /// `q` is clamped to at least this before dividing.
    pub q_floor: T,
    /// Rescale `q` to the mass of `p` under the quadrature weights first.
    pub normalize: bool,
}

impl<T: Scalar> Default for KlOptions<T> {
    fn default() -> Self {
        Self { weighting: MultivariateWeighting::GridSum, p_floor: T::of(1e-30), q_floor: T::of(1e-30), normalize: true }
    }
}

/// `KL(p‖q)` in nats, with the sample counts of both estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlValue<T> {
    pub value: T,
    pub n_new: usize,
    pub n_old: usize,
}

pub fn kl_divergence<T: Scalar>(p: &DensityEstimate<T>, q: &DensityEstimate<T>) -> Result<KlValue<T>, DivergenceError> {
    kl_divergence_with(p, q, &KlOptions::default())
}

pub fn kl_divergence_with<T: Scalar>(
    p: &DensityEstimate<T>,
    q: &DensityEstimate<T>,
    options: &KlOptions<T>,
) -> Result<KlValue<T>, DivergenceError> {
    if !p.grid().same_points(q.grid()) {
        return Err(DivergenceError::GridMismatch);
    }
    for values in [p.values(), q.values()] {
        if let Some((index, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= T::zero())) {
            return Err(DivergenceError::InvalidDensity { index, value: v.as_f64() });
        }
    }
    let (n_new, n_old) = (p.n(), q.n());
    if p.values() == q.values() {
        return Ok(KlValue { value: T::zero(), n_new, n_old });
    }

    let weights = if p.dim() == 1 || options.weighting == MultivariateWeighting::VolumeWeighted {
        Some(p.grid().quadrature_weights())
    } else {
        None
    };
    let mass = |values: &[T]| match &weights {
        Some(w) => compensated_sum(values.iter().zip(w).map(|(&v, &w)| v * w)),
        None => compensated_sum(values.iter().copied()),
    };
    let q_scale = if options.normalize {
        let (pm, qm) = (mass(p.values()), mass(q.values()));
        if !(pm > T::zero() && qm > T::zero()) {
            return Err(DivergenceError::ZeroMass);
        }
        pm / qm
    } else {
        T::one()
    };
    let terms: Vec<T> = p
        .values()
        .par_iter()
        .zip(q.values().par_iter())
        .enumerate()
        .map(|(i, (&pv, &qv))| {
            let qv = qv * q_scale;
            if pv < options.p_floor {
                return T::zero();
            }
            let term = pv * (pv / qv.max(options.q_floor)).ln();
            weights.as_ref().map_or(term, |w| term * w[i])
        })
        .collect();
    Ok(KlValue { value: compensated_sum(terms), n_new, n_old })
}
