//! Ground-truth oracles and the timing harness.
//!
//! [`exact_wasserstein`] solves the uniform-mass transport problem exactly as
//! an assignment problem; [`grid_max_sw`] brute-forces the max-sliced
//! objective on the circle. Both are slow by design and capped to
//! desk-scale inputs.

pub mod alloc;
pub mod assignment;
pub mod bench;
pub mod prop2;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::measures::{sample_minibatch, Direction, EmpiricalMeasure, Order};

pub use bench::{bench_sweep, loss_flop_estimate, BenchGrid, BenchMethod, BenchRecord};
pub use prop2::{prop2_suite, Prop2Config, Prop2Record};

/// Largest support size accepted by [`exact_wasserstein`].
pub const EXACT_MAX_POINTS: usize = 1024;

/// `C_ij = ‖x_i − y_j‖_p^p`.
pub fn ground_cost(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, p: Order) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
        x.row(i)
            .iter()
            .zip(y.row(j))
            .map(|(a, b)| p.pow_abs(a - b))
            .sum()
    })
}

/// Exact `W_p` between two equal-size uniform measures.
pub fn exact_wasserstein(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: Order) -> Result<f64> {
    check_pair(mu, nu)?;
    if mu.m() > EXACT_MAX_POINTS {
        return Err(Error::Unsupported(format!(
            "exact transport oracle is capped at {EXACT_MAX_POINTS} points, got {}",
            mu.m()
        )));
    }
    // Canonical argument order: ties between optimal assignments would otherwise
    // round differently when the measures are swapped.
    let first_diff = mu.as_slice().iter().zip(nu.as_slice()).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne());
    let (mu, nu) = match first_diff {
        Some(std::cmp::Ordering::Greater) => (nu, mu),
        _ => (mu, nu),
    };
    let cost = ground_cost(mu.points(), nu.points(), p);
    let (sigma, _) = assignment::solve(cost.view());
    let mut matched: Vec<f64> = sigma.iter().enumerate().map(|(i, &j)| cost[[i, j]]).collect();
    matched.sort_by(f64::total_cmp);
    let total: f64 = matched.iter().sum();
    Ok(p.root((total / mu.m() as f64).max(0.0)))
}

pub(crate) fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.d() != nu.d() {
        return Err(Error::DimensionMismatch {
            expected: mu.d(),
            got: nu.d(),
        });
    }
    if mu.m() != nu.m() {
        return Err(Error::SizeMismatch {
            left: mu.m(),
            right: nu.m(),
        });
    }
    Ok(())
}

/// Projected `W_p` at `n_angles` evenly spaced angles in `[0, π)`; returns the
/// maximum and its direction. Two-dimensional inputs only.
pub fn grid_max_sw(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: Order,
    n_angles: usize,
) -> Result<(f64, Direction)> {
    check_pair(mu, nu)?;
    if mu.d() != 2 {
        return Err(Error::Unsupported(format!(
            "grid search over directions needs d = 2, got {}",
            mu.d()
        )));
    }
    if n_angles < 3 {
        return Err(Error::InvalidArgument("n_angles must be >= 3".into()));
    }
    let m = mu.m();
    let x = mu.points();
    let y = nu.points();
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut best = (f64::NEG_INFINITY, 0.0);
    for j in 0..n_angles {
        let angle = std::f64::consts::PI * j as f64 / n_angles as f64;
        let (s, c) = angle.sin_cos();
        for i in 0..m {
            u[i] = c * x[[i, 0]] + s * x[[i, 1]];
            v[i] = c * y[[i, 0]] + s * y[[i, 1]];
        }
        u.sort_unstable_by(f64::total_cmp);
        v.sort_unstable_by(f64::total_cmp);
        let total: f64 = u.iter().zip(&v).map(|(a, b)| p.pow_abs(a - b)).sum();
        let value = p.root(total / m as f64);
        if value > best.0 {
            best = (value, angle);
        }
    }
    let (s, c) = best.1.sin_cos();
    Ok((best.0, Direction::normalized(Array1::from(vec![c, s]))?))
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: Vec<f64>,
}

impl McEstimate {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
            samples,
        }
    }
}

/// `n_pairs` i.i.d. mini-batch pairs `(X, Y) ~ μ^{⊗m} ⊗ ν^{⊗m}`.
pub fn sample_pairs<R: Rng + ?Sized>(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    m: usize,
    n_pairs: usize,
    rng: &mut R,
) -> Result<Vec<(EmpiricalMeasure, EmpiricalMeasure)>> {
    (0..n_pairs)
        .map(|_| Ok((sample_minibatch(mu, m, rng)?, sample_minibatch(nu, m, rng)?)))
        .collect()
}

/// Grid-search max-sliced distance averaged over the given mini-batch pairs.
pub fn m_max_sw_on_pairs(
    pairs: &[(EmpiricalMeasure, EmpiricalMeasure)],
    p: Order,
    n_angles: usize,
) -> Result<McEstimate> {
    let samples = pairs
        .iter()
        .map(|(x, y)| grid_max_sw(x, y, p, n_angles).map(|(v, _)| v))
        .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_samples(samples))
}

/// Monte-Carlo estimate of the mini-batch max-sliced Wasserstein loss, with the
/// inner maximization done by [`grid_max_sw`].
pub fn m_max_sw_oracle<R: Rng + ?Sized>(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    m: usize,
    n_pairs: usize,
    n_angles: usize,
    p: Order,
    rng: &mut R,
) -> Result<McEstimate> {
    if mu.d() != 2 || nu.d() != 2 {
        return Err(Error::Unsupported("mini-batch max-sliced oracle needs d = 2".into()));
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be >= 1".into()));
    }
    let pairs = sample_pairs(mu, nu, m, n_pairs, rng)?;
    m_max_sw_on_pairs(&pairs, p, n_angles)
}
