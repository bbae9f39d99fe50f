//! Gaussian kernel density estimation on fixed grids.
//!
//! Estimates are evaluated at the points of a [`Grid`], never as closures, so
//! that two estimates built on the same grid can be compared point by point.
//! The multivariate estimator uses a product kernel with one bandwidth per
//! dimension; with a single dimension it is the same code path as the
//! univariate one and produces bit-identical values.
//!
//! Two evaluation methods are available. [`KdeMethod::Exact`] sums every
//! kernel term at every grid point. [`KdeMethod::Truncated`] skips terms whose
//! standardized distance exceeds a cutoff (9 bandwidths by default, where the
//! kernel has decayed below 3e-18 of its peak). Both use the same abscissae
//! and kernel evaluations, so they differ only by the dropped tail terms.

use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::{compensated_sum, CompensatedSum, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KdeError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate variable: dimension {dim} has zero standard deviation")]
    DegenerateVariable { dim: usize },
    #[error("non-finite sample in dimension {dim}")]
    NonFiniteSample { dim: usize },
    #[error("bandwidth must be positive and finite in every dimension")]
    InvalidBandwidth,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Per-dimension kernel bandwidths, all positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandwidth<T>(Vec<T>);

impl<T: Scalar> Bandwidth<T> {
    pub fn new(per_dim: Vec<T>) -> Result<Self, KdeError> {
        if per_dim.is_empty() || per_dim.iter().any(|h| !(h.is_finite() && *h > T::zero())) {
            return Err(KdeError::InvalidBandwidth);
        }
        Ok(Self(per_dim))
    }

    pub fn scalar(h: T) -> Result<Self, KdeError> {
        Self::new(vec![h])
    }

    pub fn per_dim(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// The bandwidth of a one-dimensional estimate (first dimension otherwise).
    pub fn h(&self) -> T {
        self.0[0]
    }
}

/// Uniformly spaced, strictly increasing abscissae along one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis<T> {
    points: Vec<T>,
    step: T,
}

impl<T: Scalar> Axis<T> {
    pub fn uniform(lo: T, hi: T, count: usize) -> Result<Self, KdeError> {
        if count < 2 {
            return Err(KdeError::InvalidGrid(format!("need at least 2 points per dimension, got {count}")));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(KdeError::InvalidGrid(format!("empty range [{lo}, {hi}]")));
        }
        let span = hi - lo;
        let last = T::of_usize(count - 1);
        let mut points: Vec<T> = (0..count).map(|i| lo + span * T::of_usize(i) / last).collect();
        points[count - 1] = hi;
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(KdeError::InvalidGrid("range too narrow for the requested resolution".into()));
        }
        Ok(Self { points, step: span / last })
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn step(&self) -> T {
        self.step
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Trapezoidal quadrature weights: `step/2` at the ends, `step` inside.
    pub fn trapezoid_weights(&self) -> Vec<T> {
        let half = self.step / T::of(2.0);
        let n = self.points.len();
        (0..n).map(|i| if i == 0 || i == n - 1 { half } else { self.step }).collect()
    }

    /// Indices of points within `radius` of `x`, as an inclusive range.
    fn window(&self, x: T, radius: T) -> Option<(usize, usize)> {
        let lo = self.points[0];
        let n = self.points.len() as isize;
        let first = ((x - radius - lo) / self.step).ceil().to_isize()?.max(0);
        let last = ((x + radius - lo) / self.step).floor().to_isize()?.min(n - 1);
        (first <= last).then_some((first as usize, last as usize))
    }
}

/// Cartesian product of per-dimension axes. Flattened indices are row-major
/// with the last dimension varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    axes: Vec<Axis<T>>,
}

impl<T: Scalar> Grid<T> {
    pub fn new(axes: Vec<Axis<T>>) -> Result<Self, KdeError> {
        if axes.is_empty() {
            return Err(KdeError::InvalidGrid("grid has no dimensions".into()));
        }
        Ok(Self { axes })
    }

    pub fn univariate(axis: Axis<T>) -> Self {
        Self { axes: vec![axis] }
    }

    pub fn axes(&self) -> &[Axis<T>] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.axes.iter().map(Axis::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of the flattened grid point `index`.
    pub fn point(&self, mut index: usize) -> Vec<T> {
        let mut coords = vec![T::zero(); self.dim()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            coords[d] = axis.points[index % axis.len()];
            index /= axis.len();
        }
        coords
    }

    /// Product of the per-axis cell widths.
    pub fn cell_volume(&self) -> T {
        self.axes.iter().fold(T::one(), |v, a| v * a.step)
    }

    /// Product-trapezoid weight of every flattened grid point.
    pub fn quadrature_weights(&self) -> Vec<T> {
        let per_axis: Vec<Vec<T>> = self.axes.iter().map(Axis::trapezoid_weights).collect();
        (0..self.len())
            .map(|mut index| {
                let mut w = T::one();
                for (d, axis) in self.axes.iter().enumerate().rev() {
                    w = w * per_axis[d][index % axis.len()];
                    index /= axis.len();
                }
                w
            })
            .collect()
    }

    /// Bitwise equality of every abscissa.
    pub fn same_points(&self, other: &Grid<T>) -> bool {
        self.axes.len() == other.axes.len()
            && self.axes.iter().zip(&other.axes).all(|(a, b)| {
                a.points.len() == b.points.len()
                    && a.points.iter().zip(&b.points).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Row-major `n × dim` sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix<T> {
    data: Vec<T>,
    dim: usize,
}

impl<T: Scalar> SampleMatrix<T> {
    pub fn from_rows(data: Vec<T>, dim: usize) -> Result<Self, KdeError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(KdeError::DimensionMismatch { expected: dim, got: data.len() });
        }
        Ok(Self { data, dim })
    }

    /// Builds a matrix whose columns are the given equal-length vectors.
    pub fn from_columns(columns: &[Vec<T>]) -> Result<Self, KdeError> {
        let dim = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(KdeError::DimensionMismatch { expected: 1, got: 0 });
        }
        if let Some(c) = columns.iter().find(|c| c.len() != n) {
            return Err(KdeError::DimensionMismatch { expected: n, got: c.len() });
        }
        let data = (0..n).flat_map(|i| columns.iter().map(move |c| c[i])).collect();
        Ok(Self { data, dim })
    }

    pub fn view(&self) -> MatrixView<'_, T> {
        MatrixView { data: &self.data, dim: self.dim }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Borrowed row-major sample matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixView<'a, T> {
    data: &'a [T],
    dim: usize,
}

impl<'a, T: Scalar> MatrixView<'a, T> {
    /// A single column of univariate samples.
    pub fn column(samples: &'a [T]) -> Self {
        Self { data: samples, dim: 1 }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The first `n` rows.
    pub fn prefix(&self, n: usize) -> MatrixView<'a, T> {
        let n = n.min(self.rows());
        Self { data: &self.data[..n * self.dim], dim: self.dim }
    }

    pub fn row(&self, i: usize) -> &'a [T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column_values(&self, d: usize) -> impl Iterator<Item = T> + Clone + 'a {
        self.data.iter().skip(d).step_by(self.dim).copied()
    }
}

/// A density evaluated on every point of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate<T> {
    grid: Grid<T>,
    values: Vec<T>,
    n: usize,
    bandwidth: Bandwidth<T>,
}

impl<T: Scalar> DensityEstimate<T> {
    /// Wraps precomputed values. Only the length is checked, so densities from
    /// other sources (analytic curves, external tools) can be compared too.
    pub fn from_values(grid: Grid<T>, values: Vec<T>, n: usize, bandwidth: Bandwidth<T>) -> Result<Self, KdeError> {
        if values.len() != grid.len() {
            return Err(KdeError::DimensionMismatch { expected: grid.len(), got: values.len() });
        }
        if bandwidth.dim() != grid.dim() {
            return Err(KdeError::DimensionMismatch { expected: grid.dim(), got: bandwidth.dim() });
        }
        Ok(Self { grid, values, n, bandwidth })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> &Bandwidth<T> {
        &self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Product-trapezoid integral of the values over the grid.
    pub fn mass(&self) -> T {
        let weights = self.grid.quadrature_weights();
        compensated_sum(self.values.iter().zip(weights).map(|(&v, w)| v * w))
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }
}

/// Evaluation strategy for kernel sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KdeMethod<T> {
    /// Every sample contributes to every grid point.
    Exact,
    /// Terms further than `cutoff` bandwidths from a grid point are dropped.
    Truncated { cutoff: T },
}

impl<T: Scalar> Default for KdeMethod<T> {
    fn default() -> Self {
        KdeMethod::Truncated { cutoff: T::of(9.0) }
    }
}

fn sample_std<T: Scalar>(values: impl Iterator<Item = T> + Clone, n: usize) -> T {
    let count = T::of_usize(n);
    let mean = compensated_sum(values.clone()) / count;
    let ss = compensated_sum(values.map(|x| (x - mean) * (x - mean)));
    (ss / (count - T::one())).sqrt()
}

/// Silverman's rule, `h = 1.06 · σ̂ · n^(-1/5)`, applied per dimension with the
/// `n - 1` standard deviation.
pub fn silverman_bandwidth_matrix<T: Scalar>(samples: MatrixView<'_, T>) -> Result<Bandwidth<T>, KdeError> {
    let n = samples.rows();
    if n < 2 {
        return Err(KdeError::TooFewSamples { needed: 2, got: n });
    }
    let factor = T::of(1.06) * T::of_usize(n).powf(T::of(-0.2));
    let mut per_dim = Vec::with_capacity(samples.dim());
    for d in 0..samples.dim() {
        if samples.column_values(d).any(|x| !x.is_finite()) {
            return Err(KdeError::NonFiniteSample { dim: d });
        }
        let sigma = sample_std(samples.column_values(d), n);
        if !(sigma > T::zero()) {
            return Err(KdeError::DegenerateVariable { dim: d });
        }
        per_dim.push(factor * sigma);
    }
    Bandwidth::new(per_dim)
}

/// Univariate Silverman bandwidth.
pub fn silverman_bandwidth<T: Scalar>(samples: &[T]) -> Result<Bandwidth<T>, KdeError> {
    silverman_bandwidth_matrix(MatrixView::column(samples))
}

/// Uniform grid over `[min - pad·h, max + pad·h]` in each dimension.
pub fn build_grid<T: Scalar>(
    samples: MatrixView<'_, T>,
    bandwidth: &Bandwidth<T>,
    points_per_dim: usize,
    pad_factor: T,
) -> Result<Grid<T>, KdeError> {
    if samples.rows() == 0 {
        return Err(KdeError::TooFewSamples { needed: 1, got: 0 });
    }
    if bandwidth.dim() != samples.dim() {
        return Err(KdeError::DimensionMismatch { expected: samples.dim(), got: bandwidth.dim() });
    }
    let axes = (0..samples.dim())
        .map(|d| {
            let (lo, hi) = samples
                .column_values(d)
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), x| (lo.min(x), hi.max(x)));
            let pad = pad_factor * bandwidth.per_dim()[d];
            Axis::uniform(lo - pad, hi + pad, points_per_dim)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Grid::new(axes)
}

/// Univariate Gaussian KDE, `f(x) = 1/(n h) Σ κ((x - xᵢ)/h)`, on `grid`.
pub fn kde_univariate<T: Scalar>(
    samples: &[T],
    grid: &Grid<T>,
    bandwidth: &Bandwidth<T>,
) -> Result<DensityEstimate<T>, KdeError> {
    kde_with(MatrixView::column(samples), grid, bandwidth, KdeMethod::default())
}

/// Product-Gaussian KDE, `f(x) = 1/n Σᵢ Π_d κ((x_d - x_{i,d})/h_d) / h_d`.
pub fn kde_multivariate<T: Scalar>(
    samples: MatrixView<'_, T>,
    grid: &Grid<T>,
    bandwidth: &Bandwidth<T>,
) -> Result<DensityEstimate<T>, KdeError> {
    kde_with(samples, grid, bandwidth, KdeMethod::default())
}

const CHUNK: usize = 4096;

/// KDE with an explicit evaluation method.
pub fn kde_with<T: Scalar>(
    samples: MatrixView<'_, T>,
    grid: &Grid<T>,
    bandwidth: &Bandwidth<T>,
    method: KdeMethod<T>,
) -> Result<DensityEstimate<T>, KdeError> {
    let n = samples.rows();
    if n == 0 {
        return Err(KdeError::TooFewSamples { needed: 1, got: 0 });
    }
    let dim = samples.dim();
    if grid.dim() != dim {
        return Err(KdeError::DimensionMismatch { expected: dim, got: grid.dim() });
    }
    if bandwidth.dim() != dim {
        return Err(KdeError::DimensionMismatch { expected: dim, got: bandwidth.dim() });
    }

    let norm = bandwidth
        .per_dim()
        .iter()
        .fold(T::one() / T::of_usize(n), |acc, &h| acc / (h * T::TAU().sqrt()));

    let sums = match method {
        KdeMethod::Exact => exact_sums(samples, grid, bandwidth),
        KdeMethod::Truncated { cutoff } => truncated_sums(samples, grid, bandwidth, cutoff),
    };
    let values = sums.into_iter().map(|s| s * norm).collect();
    DensityEstimate::from_values(grid.clone(), values, n, bandwidth.clone())
}

fn half_square_exp<T: Scalar>(x: T, center: T, h: T) -> T {
    let u = (x - center) / h;
    (-(u * u) / T::of(2.0)).exp()
}

fn exact_sums<T: Scalar>(samples: MatrixView<'_, T>, grid: &Grid<T>, bandwidth: &Bandwidth<T>) -> Vec<T> {
    let h = bandwidth.per_dim();
    (0..grid.len())
        .into_par_iter()
        .map(|g| {
            let point = grid.point(g);
            let mut acc = CompensatedSum::default();
            for i in 0..samples.rows() {
                let row = samples.row(i);
                let mut w = T::one();
                for d in 0..point.len() {
                    w = w * half_square_exp(point[d], row[d], h[d]);
                }
                acc.add(w);
            }
            acc.value()
        })
        .collect()
}

fn truncated_sums<T: Scalar>(
    samples: MatrixView<'_, T>,
    grid: &Grid<T>,
    bandwidth: &Bandwidth<T>,
    cutoff: T,
) -> Vec<T> {
    let h = bandwidth.per_dim();
    let axes = grid.axes();
    let dim = axes.len();
    let mut strides = vec![1usize; dim];
    for d in (0..dim.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * axes[d + 1].len();
    }
    let radii: Vec<T> = h.iter().map(|&hd| hd * cutoff).collect();
    let total = grid.len();

    let rows: Vec<usize> = (0..samples.rows()).collect();
    let partials: Vec<Vec<T>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![T::zero(); total];
            let mut windows: Vec<(usize, Vec<T>)> = vec![(0, Vec::new()); dim];
            'rows: for &i in chunk {
                let row = samples.row(i);
                for d in 0..dim {
                    let Some((first, last)) = axes[d].window(row[d], radii[d]) else {
                        continue 'rows;
                    };
                    let (start, weights) = &mut windows[d];
                    *start = first;
                    weights.clear();
                    weights.extend(axes[d].points[first..=last].iter().map(|&x| half_square_exp(x, row[d], h[d])));
                }
                scatter(&mut acc, &windows, &strides, 0, 0, T::one());
            }
            acc
        })
        .collect();

    let mut sums = vec![CompensatedSum::default(); total];
    for partial in partials {
        for (s, v) in sums.iter_mut().zip(partial) {
            s.add(v);
        }
    }
    sums.into_iter().map(|s| s.value()).collect()
}

fn scatter<T: Scalar>(acc: &mut [T], windows: &[(usize, Vec<T>)], strides: &[usize], d: usize, offset: usize, weight: T) {
    let (start, weights) = &windows[d];
    let base = offset + start * strides[d];
    if d + 1 == windows.len() {
        for (slot, &w) in acc[base..base + weights.len()].iter_mut().zip(weights) {
            *slot = *slot + weight * w;
        }
    } else {
        for (j, &w) in weights.iter().enumerate() {
            scatter(acc, windows, strides, d + 1, base + j * strides[d], weight * w);
        }
    }
}
