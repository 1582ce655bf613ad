//! Values and analytic gradients of the projected transport objectives, plus
//! a central finite-difference verifier.
//!
//! All gradients treat the optimal matching as locally constant, which holds
//! almost everywhere. For a slice `θ` with sorted matching `σ`, residuals
//! `c_i = θᵀ(x_i − y_σ(i))` and `S = (1/m) Σ |c_i|^p`, the objective
//! `S^{1/p}` has
//!
//! ```text
//! ∂/∂c_i = (1/p) S^{1/p − 1} (1/m) p |c_i|^{p−1} sign(c_i)
//! ```
//!
//! and everything else follows by the chain rule. The gradient is zero when
//! `S < 1e-300`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView2};
use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::amortized::{AmortizedParams, ProjectedAmortizedParams};
use crate::error::{Error, Result};
use crate::eval::{assignment, ground_cost};
use crate::measures::{argsort, project_values, Direction, EmpiricalMeasure, Order};
use crate::params::ParamBlocks;
use crate::rng::{child_seed, seeded};
use crate::slicers::ProjectionFrame;
use crate::trainer::GeneratorParams;

/// Below this `S`, the root's derivative is taken to be zero.
pub const ZERO_DISTANCE: f64 = 1e-300;

/// A scalar together with its gradient, one array per named parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub grads: BTreeMap<String, ArrayD<f64>>,
}

impl ValueGrad {
    pub fn from_blocks(value: f64, grad: &impl ParamBlocks) -> Self {
        Self { value, grads: grad.named_arrays() }
    }

    pub fn single(value: f64, name: &str, grad: ArrayD<f64>) -> Self {
        Self { value, grads: BTreeMap::from([(name.to_string(), grad)]) }
    }

    pub fn grad(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.grads.get(name)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn root_scale(p: Order, s: f64) -> f64 {
    if s < ZERO_DISTANCE {
        return 0.0;
    }
    match p {
        Order::One => 1.0,
        Order::Two => 0.5 / s.sqrt(),
    }
}

/// Sorted matching along one direction and the per-pair derivatives of `S`.
#[derive(Debug, Clone)]
pub struct SliceCoupling {
    /// `W_p(θ♯P_X, θ♯P_Y)`.
    pub value: f64,
    /// `S = W_p^p`.
    pub pow: f64,
    /// `x_i` is matched with `y_sigma[i]`.
    pub sigma: Vec<usize>,
    /// `∂S/∂c_i`.
    pub dpow: Vec<f64>,
    /// `∂S^{1/p}/∂S`, zero at `S < 1e-300`.
    pub root_scale: f64,
}

pub fn slice_coupling(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    theta: &[f64],
    p: Order,
) -> SliceCoupling {
    let u = project_values(x, theta);
    let v = project_values(y, theta);
    let (ru, rv) = (argsort(&u), argsort(&v));
    let m = u.len();
    let mut sigma = vec![0; m];
    for (&i, &j) in ru.iter().zip(&rv) {
        sigma[i] = j;
    }
    let mut total = 0.0;
    let mut dpow = vec![0.0; m];
    for i in 0..m {
        let c = u[i] - v[sigma[i]];
        total += p.pow_abs(c);
        dpow[i] = p.pow_abs_derivative(c) / m as f64;
    }
    let pow = total / m as f64;
    SliceCoupling { value: p.root(pow), pow, sigma, dpow, root_scale: root_scale(p, pow) }
}

impl SliceCoupling {
    /// `Σ scale·∂S/∂c_i · (x_i − y_σ(i))`.
    pub fn grad_theta_scaled(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, scale: f64) -> Array1<f64> {
        let mut g = Array1::zeros(x.ncols());
        for (i, &j) in self.sigma.iter().enumerate() {
            let a = scale * self.dpow[i];
            if a != 0.0 {
                g.scaled_add(a, &(&x.row(i) - &y.row(j)));
            }
        }
        g
    }

    /// `∇_θ W_p`.
    pub fn grad_theta(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array1<f64> {
        self.grad_theta_scaled(x, y, self.root_scale)
    }

    /// Adds `scale·∂S/∂Y` into `dy`.
    pub fn add_grad_y(&self, theta: &[f64], scale: f64, dy: &mut Array2<f64>) {
        for (i, &j) in self.sigma.iter().enumerate() {
            let a = scale * self.dpow[i];
            for (g, t) in dy.row_mut(j).iter_mut().zip(theta) {
                *g -= a * t;
            }
        }
    }

    /// `(∂W_p/∂X, ∂W_p/∂Y)`.
    pub fn grad_points(&self, theta: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let (m, d) = (self.sigma.len(), theta.len());
        let mut dx = Array2::zeros((m, d));
        for i in 0..m {
            let a = self.root_scale * self.dpow[i];
            for (g, t) in dx.row_mut(i).iter_mut().zip(theta) {
                *g = a * t;
            }
        }
        let mut dy = Array2::zeros((m, d));
        self.add_grad_y(theta, self.root_scale, &mut dy);
        (dx, dy)
    }
}

/// Optimal matching under the cost `‖Uᵀ(x − y)‖_p^p` and the derivatives of `S`.
#[derive(Debug, Clone)]
pub struct FrameCoupling {
    pub value: f64,
    pub pow: f64,
    pub sigma: Vec<usize>,
    /// `∂S/∂z_i` as rows, with `z_i = Uᵀ(x_i − y_σ(i))`.
    pub dpow: Array2<f64>,
    pub root_scale: f64,
}

pub fn frame_coupling(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    u: ArrayView2<'_, f64>,
    p: Order,
) -> FrameCoupling {
    let k = u.ncols();
    if k == 1 {
        let c = slice_coupling(x, y, &u.column(0).to_vec(), p);
        let m = c.sigma.len();
        let dpow = Array2::from_shape_vec((m, 1), c.dpow).expect("shape");
        return FrameCoupling { value: c.value, pow: c.pow, sigma: c.sigma, dpow, root_scale: c.root_scale };
    }
    let px = x.dot(&u);
    let py = y.dot(&u);
    let (sigma, _) = assignment::solve(ground_cost(px.view(), py.view(), p).view());
    let m = sigma.len();
    let mut total = 0.0;
    let mut dpow = Array2::zeros((m, k));
    for i in 0..m {
        for j in 0..k {
            let z = px[[i, j]] - py[[sigma[i], j]];
            total += p.pow_abs(z);
            dpow[[i, j]] = p.pow_abs_derivative(z) / m as f64;
        }
    }
    let pow = total / m as f64;
    FrameCoupling { value: p.root(pow), pow, sigma, dpow, root_scale: root_scale(p, pow) }
}

impl FrameCoupling {
    /// `∇_U W_p = Σ_i (x_i − y_σ(i)) A_iᵀ`.
    pub fn grad_frame(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
        let (m, d) = x.dim();
        let mut diff = Array2::zeros((m, d));
        for (i, &j) in self.sigma.iter().enumerate() {
            diff.row_mut(i).assign(&(&x.row(i) - &y.row(j)));
        }
        diff.t().dot(&self.dpow) * self.root_scale
    }

    /// `(∂W_p/∂X, ∂W_p/∂Y)`.
    pub fn grad_points(&self, u: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let dx = self.dpow.dot(&u.t()) * self.root_scale;
        let mut dy = Array2::zeros(dx.dim());
        for (i, &j) in self.sigma.iter().enumerate() {
            dy.row_mut(j).assign(&(-&dx.row(i)));
        }
        (dx, dy)
    }
}

fn check_batches(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<()> {
    crate::eval::check_pair(x, y)
}

/// Value and `∇_θ` of `W_p(θ♯P_X, θ♯P_Y)`; the gradient block is named `"theta"`.
pub fn grad_theta_w1d(x: &EmpiricalMeasure, y: &EmpiricalMeasure, theta: &Direction, p: Order) -> Result<ValueGrad> {
    check_batches(x, y)?;
    if theta.d() != x.d() {
        return Err(Error::DimensionMismatch { expected: x.d(), got: theta.d() });
    }
    let c = slice_coupling(x.points(), y.points(), theta.as_slice(), p);
    let g = c.grad_theta(x.points(), y.points());
    Ok(ValueGrad::single(c.value, "theta", g.into_dyn()))
}

/// Value and `∇_U` of `W_p(U♯P_X, U♯P_Y)` under the ground cost `‖Uᵀ(x − y)‖_p^p`;
/// the gradient block is named `"frame"`.
pub fn grad_frame_w(x: &EmpiricalMeasure, y: &EmpiricalMeasure, frame: &ProjectionFrame, p: Order) -> Result<ValueGrad> {
    check_batches(x, y)?;
    if frame.d() != x.d() {
        return Err(Error::DimensionMismatch { expected: x.d(), got: frame.d() });
    }
    let c = frame_coupling(x.points(), y.points(), frame.cols(), p);
    let g = c.grad_frame(x.points(), y.points());
    Ok(ValueGrad::single(c.value, "frame", g.into_dyn()))
}

pub(crate) fn psi_loss_grad(
    psi: &AmortizedParams,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    p: Order,
) -> Result<(f64, AmortizedParams)> {
    let cache = psi.forward_cached(x, y)?;
    let c = slice_coupling(x, y, cache.theta.as_slice(), p);
    let g = c.grad_theta(x, y);
    let (grad, _, _) = psi.backward(x, y, &cache, &g);
    Ok((c.value, grad))
}

/// Value and `∇_ψ` of `W_p(f_ψ(X,Y)♯P_X, f_ψ(X,Y)♯P_Y)`.
pub fn grad_psi_loss(psi: &AmortizedParams, x: &EmpiricalMeasure, y: &EmpiricalMeasure, p: Order) -> Result<ValueGrad> {
    check_batches(x, y)?;
    let (value, grad) = psi_loss_grad(psi, x.points(), y.points(), p)?;
    Ok(ValueGrad::from_blocks(value, &grad))
}

pub(crate) fn psi_projected_loss_grad(
    psi: &ProjectedAmortizedParams,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    p: Order,
) -> Result<(f64, ProjectedAmortizedParams)> {
    let cache = psi.forward_cached(x, y)?;
    let c = frame_coupling(x, y, cache.frame.cols(), p);
    let g = c.grad_frame(x, y);
    let (grad, _, _) = psi.backward(x, y, &cache, g.view());
    Ok((c.value, grad))
}

/// Frame-valued counterpart of [`grad_psi_loss`].
pub fn grad_psi_projected(
    psi: &ProjectedAmortizedParams,
    x: &EmpiricalMeasure,
    y: &EmpiricalMeasure,
    p: Order,
) -> Result<ValueGrad> {
    check_batches(x, y)?;
    let (value, grad) = psi_projected_loss_grad(psi, x.points(), y.points(), p)?;
    Ok(ValueGrad::from_blocks(value, &grad))
}

/// Where the generator loss takes its slice from.
#[derive(Debug, Clone, Copy)]
pub enum SliceSource<'a> {
    /// A fixed direction; the loss is `W_p` along it.
    Fixed(&'a Direction),
    /// Several fixed directions; the loss is the mean of `W_p^p` over them.
    Projections(&'a [Direction]),
    /// A fixed frame; the loss is the frame-projected `W_p`.
    Frame(&'a ProjectionFrame),
    /// `θ = f_ψ(X, Y_φ)`. With `detach_slice` the dependence of `θ` on `Y_φ` is ignored.
    Amortized { psi: &'a AmortizedParams, detach_slice: bool },
    /// `U = f_ψ(X, Y_φ)` for a frame-valued model.
    AmortizedFrame { psi: &'a ProjectedAmortizedParams, detach_slice: bool },
}

/// Loss value and its gradient with respect to the generated points.
pub(crate) fn loss_grad_y(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    source: SliceSource<'_>,
    p: Order,
) -> Result<(f64, Array2<f64>)> {
    match source {
        SliceSource::Fixed(theta) => {
            let c = slice_coupling(x, y, theta.as_slice(), p);
            let mut dy = Array2::zeros(y.dim());
            c.add_grad_y(theta.as_slice(), c.root_scale, &mut dy);
            Ok((c.value, dy))
        }
        SliceSource::Projections(thetas) => {
            if thetas.is_empty() {
                return Err(Error::InvalidArgument("no projections given".into()));
            }
            let scale = 1.0 / thetas.len() as f64;
            let mut dy = Array2::zeros(y.dim());
            let mut total = 0.0;
            for theta in thetas {
                let c = slice_coupling(x, y, theta.as_slice(), p);
                total += c.pow;
                c.add_grad_y(theta.as_slice(), scale, &mut dy);
            }
            Ok((total * scale, dy))
        }
        SliceSource::Frame(frame) => {
            let c = frame_coupling(x, y, frame.cols(), p);
            Ok((c.value, c.grad_points(frame.cols()).1))
        }
        SliceSource::Amortized { psi, detach_slice } => {
            let cache = psi.forward_cached(x, y)?;
            let theta = cache.theta.as_slice();
            let c = slice_coupling(x, y, theta, p);
            let mut dy = Array2::zeros(y.dim());
            c.add_grad_y(theta, c.root_scale, &mut dy);
            if !detach_slice {
                let g = c.grad_theta(x, y);
                let (_, _, dy_slice) = psi.backward(x, y, &cache, &g);
                dy += &dy_slice;
            }
            Ok((c.value, dy))
        }
        SliceSource::AmortizedFrame { psi, detach_slice } => {
            let cache = psi.forward_cached(x, y)?;
            let u = cache.frame.cols();
            let c = frame_coupling(x, y, u, p);
            let (_, mut dy) = c.grad_points(u);
            if !detach_slice {
                let g = c.grad_frame(x, y);
                let (_, _, dy_slice) = psi.backward(x, y, &cache, g.view());
                dy += &dy_slice;
            }
            Ok((c.value, dy))
        }
    }
}

pub(crate) fn phi_loss_grad(
    phi: &GeneratorParams,
    noise: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    source: SliceSource<'_>,
    p: Order,
) -> Result<(f64, GeneratorParams)> {
    let (y, cache) = phi.forward_cached(noise)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("generator produced non-finite output".into()));
    }
    if y.dim() != x.dim() {
        return Err(Error::SizeMismatch { left: x.nrows(), right: y.nrows() });
    }
    let (value, dy) = loss_grad_y(x, y.view(), source, p)?;
    Ok((value, phi.backward(&cache, dy.view())))
}

/// Value and `∇_φ` of the slice loss between `X` and `Y_φ = G_φ(noise)`.
pub fn grad_phi_loss(
    phi: &GeneratorParams,
    noise: ArrayView2<'_, f64>,
    x: &EmpiricalMeasure,
    source: SliceSource<'_>,
    p: Order,
) -> Result<ValueGrad> {
    let (value, grad) = phi_loss_grad(phi, noise, x.points(), source, p)?;
    Ok(ValueGrad::from_blocks(value, &grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdConfig {
    pub h: f64,
    pub tol: f64,
    /// Per-block cap on the number of coordinates checked.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { h: 1e-6, tol: 1e-4, max_coords: 200, seed: 0 }
    }
}

/// Relative-error floor so that near-zero partials compare absolutely.
pub const FD_ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub op: String,
    pub instance_seed: u64,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub pass: bool,
    #[serde(skip)]
    pub coords: Vec<FdCoord>,
}

/// One checked coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct FdCoord {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl FdReport {
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_ABS_FLOOR)
}

/// Central-difference check of `analytic` against `f` at `params`, on the
/// given coordinate indices. Coordinates run in parallel; the report is
/// ordered by index.
pub fn fd_check_coords<F>(
    op: &str,
    instance_seed: u64,
    f: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    cfg: &FdConfig,
) -> Result<FdReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(cfg.h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    if params.len() != analytic.len() {
        return Err(Error::SizeMismatch { left: params.len(), right: analytic.len() });
    }
    let mut coords = coords.to_vec();
    coords.sort_unstable();
    coords.dedup();
    let results = coords
        .par_iter()
        .map(|&i| {
            let mut q = params.to_vec();
            q[i] = params[i] + cfg.h;
            let plus = f(&q)?;
            q[i] = params[i] - cfg.h;
            let minus = f(&q)?;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            Ok(FdCoord { index: i, analytic: analytic[i], numeric, rel_err: rel_err(analytic[i], numeric) })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = results.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let mean_rel_err = if results.is_empty() {
        0.0
    } else {
        results.iter().map(|c| c.rel_err).sum::<f64>() / results.len() as f64
    };
    Ok(FdReport {
        op: op.to_string(),
        instance_seed,
        max_rel_err,
        mean_rel_err,
        pass: max_rel_err <= cfg.tol && max_rel_err.is_finite(),
        coords: results,
    })
}

/// [`fd_check_coords`] over a flat parameter vector, sampling at most
/// `cfg.max_coords` coordinates.
pub fn fd_check<F>(op: &str, instance_seed: u64, f: F, params: &[f64], analytic: &[f64], cfg: &FdConfig) -> Result<FdReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let coords = sample_coords(params.len(), 0, cfg, instance_seed, 0);
    fd_check_coords(op, instance_seed, f, params, analytic, &coords, cfg)
}

fn sample_coords(len: usize, offset: usize, cfg: &FdConfig, instance_seed: u64, block: u64) -> Vec<usize> {
    if len <= cfg.max_coords {
        return (offset..offset + len).collect();
    }
    let mut rng = seeded(child_seed(child_seed(cfg.seed, instance_seed), block));
    let mut idx: Vec<usize> = index::sample(&mut rng, len, cfg.max_coords).into_iter().map(|i| i + offset).collect();
    idx.sort_unstable();
    idx
}

/// Checks the gradient of `f` at `params`, sampling at most `cfg.max_coords`
/// coordinates from each parameter block.
pub fn fd_check_params<P, F>(op: &str, instance_seed: u64, f: F, params: &P, analytic: &P, cfg: &FdConfig) -> Result<FdReport>
where
    P: ParamBlocks + Clone + Sync,
    F: Fn(&P) -> Result<f64> + Sync,
{
    let mut coords = Vec::new();
    let mut offset = 0;
    for (b, (_, _, values)) in params.blocks().into_iter().enumerate() {
        coords.extend(sample_coords(values.len(), offset, cfg, instance_seed, b as u64));
        offset += values.len();
    }
    let flat = params.flatten();
    let wrapped = |v: &[f64]| {
        let mut q = params.clone();
        q.load_flat(v);
        f(&q)
    };
    fd_check_coords(op, instance_seed, wrapped, &flat, &analytic.flatten(), &coords, cfg)
}

/// Operations covered by [`gradient_suite`].
pub const SUITE_OPS: [&str; 7] = [
    "grad_theta_w1d",
    "grad_psi_loss.linear",
    "grad_psi_loss.generalized",
    "grad_psi_loss.nonlinear",
    "grad_psi_projected",
    "grad_frame_w",
    "grad_phi_loss",
];

fn gaussian_batch(m: usize, d: usize, rng: &mut crate::rng::SeededRng) -> Result<EmpiricalMeasure> {
    use rand::Rng;
    EmpiricalMeasure::new(Array2::from_shape_simple_fn((m, d), || rng.sample(rand_distr::StandardNormal)))
}

/// Finite-difference check of one randomized instance of `op`.
pub fn check_instance(op: &str, instance_seed: u64, cfg: &FdConfig) -> Result<FdReport> {
    use crate::amortized::ModelKind;
    use rand::Rng;
    let mut rng = seeded(instance_seed);
    let p = if rng.random::<bool>() { Order::Two } else { Order::One };
    match op {
        "grad_theta_w1d" => {
            let m = rng.random_range(2..=16);
            let d = rng.random_range(2..=5);
            let (x, y) = (gaussian_batch(m, d, &mut rng)?, gaussian_batch(m, d, &mut rng)?);
            let theta = crate::measures::sample_sphere(d, &mut rng)?;
            let vg = grad_theta_w1d(&x, &y, &theta, p)?;
            let g: Vec<f64> = vg.grads["theta"].iter().copied().collect();
            let f = |t: &[f64]| Ok(slice_coupling(x.points(), y.points(), t, p).value);
            fd_check(op, instance_seed, f, theta.as_slice(), &g, cfg)
        }
        "grad_psi_loss.linear" | "grad_psi_loss.generalized" | "grad_psi_loss.nonlinear" => {
            let kind = match op {
                "grad_psi_loss.linear" => ModelKind::Linear,
                "grad_psi_loss.generalized" => ModelKind::GeneralizedLinear,
                _ => ModelKind::NonLinear,
            };
            let m = [4, 16][rng.random_range(0..2)];
            let d = [2, 5][rng.random_range(0..2)];
            let (x, y) = (gaussian_batch(m, d, &mut rng)?, gaussian_batch(m, d, &mut rng)?);
            let psi = AmortizedParams::init(kind, m, d, &mut rng);
            let (_, grad) = psi_loss_grad(&psi, x.points(), y.points(), Order::Two)?;
            let f = |q: &AmortizedParams| {
                let t = q.forward(&x, &y)?;
                Ok(slice_coupling(x.points(), y.points(), t.as_slice(), Order::Two).value)
            };
            fd_check_params(op, instance_seed, f, &psi, &grad, cfg)
        }
        "grad_psi_projected" => {
            let kind = ModelKind::ALL[rng.random_range(0..3)];
            let m = rng.random_range(3..=10);
            let d = rng.random_range(2..=5);
            let k = rng.random_range(1..=d);
            let (x, y) = (gaussian_batch(m, d, &mut rng)?, gaussian_batch(m, d, &mut rng)?);
            let psi = ProjectedAmortizedParams::init(kind, m, d, k, &mut rng);
            let (_, grad) = psi_projected_loss_grad(&psi, x.points(), y.points(), Order::Two)?;
            let f = |q: &ProjectedAmortizedParams| {
                let u = q.forward(&x, &y)?;
                Ok(frame_coupling(x.points(), y.points(), u.cols(), Order::Two).value)
            };
            fd_check_params(op, instance_seed, f, &psi, &grad, cfg)
        }
        "grad_frame_w" => {
            let m = rng.random_range(3..=10);
            let d = rng.random_range(2..=5);
            let k = rng.random_range(1..=d);
            let (x, y) = (gaussian_batch(m, d, &mut rng)?, gaussian_batch(m, d, &mut rng)?);
            let frame = ProjectionFrame::random(d, k, &mut rng)?;
            let vg = grad_frame_w(&x, &y, &frame, p)?;
            let flat: Vec<f64> = frame.cols().iter().copied().collect();
            let g: Vec<f64> = vg.grads["frame"].iter().copied().collect();
            let f = |v: &[f64]| {
                let u = Array2::from_shape_vec((d, k), v.to_vec()).expect("shape");
                Ok(frame_coupling(x.points(), y.points(), u.view(), p).value)
            };
            fd_check(op, instance_seed, f, &flat, &g, cfg)
        }
        "grad_phi_loss" => {
            let m = rng.random_range(4..=12);
            let d = 2;
            let phi = GeneratorParams::init(3, &[8, 8], d, &mut rng);
            let noise = phi.sample_noise(m, &mut rng);
            let x = gaussian_batch(m, d, &mut rng)?;
            let theta = crate::measures::sample_sphere(d, &mut rng)?;
            let thetas = (0..4).map(|_| crate::measures::sample_sphere(d, &mut rng)).collect::<Result<Vec<_>>>()?;
            let frame = ProjectionFrame::random(d, 2, &mut rng)?;
            let kind = ModelKind::ALL[rng.random_range(0..3)];
            let psi = AmortizedParams::init(kind, m, d, &mut rng);
            let ppsi = ProjectedAmortizedParams::init(kind, m, d, 1, &mut rng);
            let detach_slice = rng.random::<bool>();
            let source = match instance_seed % 5 {
                0 => SliceSource::Fixed(&theta),
                1 => SliceSource::Projections(&thetas),
                2 => SliceSource::Frame(&frame),
                3 => SliceSource::Amortized { psi: &psi, detach_slice },
                _ => SliceSource::AmortizedFrame { psi: &ppsi, detach_slice },
            };
            let (_, grad) = phi_loss_grad(&phi, noise.view(), x.points(), source, Order::Two)?;
            let f = |q: &GeneratorParams| {
                let y = q.apply(noise.view())?;
                // With a detached slice the slice is held at its value for the unperturbed batch.
                let source = match source {
                    SliceSource::Amortized { psi, detach_slice: true } => {
                        let y0 = phi.apply(noise.view())?;
                        return loss_grad_y(x.points(), y.view(), SliceSource::Fixed(&psi.forward_cached(x.points(), y0.view())?.theta), Order::Two).map(|r| r.0);
                    }
                    SliceSource::AmortizedFrame { psi, detach_slice: true } => {
                        let y0 = phi.apply(noise.view())?;
                        let frame = psi.forward_cached(x.points(), y0.view())?.frame;
                        return loss_grad_y(x.points(), y.view(), SliceSource::Frame(&frame), Order::Two).map(|r| r.0);
                    }
                    other => other,
                };
                Ok(loss_grad_y(x.points(), y.view(), source, Order::Two)?.0)
            };
            fd_check_params(op, instance_seed, f, &phi, &grad, cfg)
        }
        other => Err(Error::InvalidArgument(format!("unknown gradient op `{other}`"))),
    }
}

/// `instances` seeded checks of every op in [`SUITE_OPS`]; instance seeds are
/// derived from `master_seed`. Reports are ordered by op, then instance.
pub fn gradient_suite(instances: usize, master_seed: u64, cfg: &FdConfig) -> Result<Vec<FdReport>> {
    let mut out = Vec::with_capacity(instances * SUITE_OPS.len());
    for (oi, op) in SUITE_OPS.iter().enumerate() {
        let op_seed = child_seed(master_seed, oi as u64);
        for i in 0..instances {
            out.push(check_instance(op, child_seed(op_seed, i as u64), cfg)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amortized::ModelKind;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn batch(m: usize, d: usize, rng: &mut impl Rng) -> EmpiricalMeasure {
        EmpiricalMeasure::new(Array2::from_shape_simple_fn((m, d), || rng.sample(StandardNormal))).unwrap()
    }

    fn direction(d: usize, rng: &mut impl Rng) -> Direction {
        crate::measures::sample_sphere(d, rng).unwrap()
    }

    #[test]
    fn hand_differentiated_p1() {
        let x = EmpiricalMeasure::new(array![[0.0, 0.0]]).unwrap();
        let y = EmpiricalMeasure::new(array![[1.0, 0.0]]).unwrap();
        let vg = grad_theta_w1d(&x, &y, &Direction::axis(2, 0), Order::One).unwrap();
        assert_eq!(vg.value, 1.0);
        assert_eq!(vg.grad("theta").unwrap().as_slice().unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn identical_sets_have_zero_gradient() {
        let mut rng = seeded(0);
        let x = batch(6, 3, &mut rng);
        let theta = direction(3, &mut rng);
        for p in [Order::One, Order::Two] {
            let vg = grad_theta_w1d(&x, &x, &theta, p).unwrap();
            assert_eq!(vg.value, 0.0);
            assert!(vg.grad("theta").unwrap().iter().all(|&v| v == 0.0));
            for kind in ModelKind::ALL {
                let psi = AmortizedParams::init(kind, 6, 3, &mut rng);
                let vg = grad_psi_loss(&psi, &x, &x, p).unwrap();
                assert_eq!(vg.value, 0.0);
                assert!(vg.grads.values().all(|g| g.iter().all(|&v| v == 0.0)));
            }
        }
    }

    #[test]
    fn theta_gradient_matches_fd() {
        let mut rng = seeded(1);
        for seed in 0..20 {
            let x = batch(8, 2, &mut rng);
            let y = batch(8, 2, &mut rng);
            let theta = direction(2, &mut rng);
            for p in [Order::One, Order::Two] {
                let vg = grad_theta_w1d(&x, &y, &theta, p).unwrap();
                let f = |t: &[f64]| Ok(slice_coupling(x.points(), y.points(), t, p).value);
                let g = vg.grad("theta").unwrap().as_slice().unwrap().to_vec();
                let r = fd_check("grad_theta_w1d", seed, f, theta.as_slice(), &g, &FdConfig::default()).unwrap();
                assert!(r.max_rel_err < 1e-5, "{r:?}");
            }
        }
    }

    #[test]
    fn theta_gradient_is_ascent_direction() {
        let mut rng = seeded(2);
        for _ in 0..20 {
            let x = batch(10, 3, &mut rng);
            let y = batch(10, 3, &mut rng);
            let theta = direction(3, &mut rng);
            let vg = grad_theta_w1d(&x, &y, &theta, Order::Two).unwrap();
            let g = vg.grad("theta").unwrap().clone().into_dimensionality::<ndarray::Ix1>().unwrap();
            let tangent = &g - &(&theta.vec() * theta.vec().dot(&g));
            if tangent.dot(&tangent).sqrt() < 1e-6 {
                continue;
            }
            for eta in [1e-4, 1e-5] {
                let next = Direction::normalized(&theta.vec() + &(&g * eta)).unwrap();
                let v = grad_theta_w1d(&x, &y, &next, Order::Two).unwrap().value;
                assert!(v > vg.value, "eta {eta}: {v} <= {}", vg.value);
            }
        }
    }

    #[test]
    fn psi_gradients_match_fd() {
        let mut rng = seeded(3);
        for kind in ModelKind::ALL {
            for (seed, (m, d)) in [(4, 2), (16, 2), (4, 5), (16, 5)].into_iter().enumerate() {
                let x = batch(m, d, &mut rng);
                let y = batch(m, d, &mut rng);
                let psi = AmortizedParams::init(kind, m, d, &mut rng);
                let (_, grad) = psi_loss_grad(&psi, x.points(), y.points(), Order::Two).unwrap();
                let f = |q: &AmortizedParams| Ok(q.forward(&x, &y).map(|t| slice_coupling(x.points(), y.points(), t.as_slice(), Order::Two).value)?);
                let r = fd_check_params("grad_psi_loss", seed as u64, f, &psi, &grad, &FdConfig::default()).unwrap();
                assert!(r.pass, "{kind} m={m} d={d}: {r:?}");
            }
        }
    }

    #[test]
    fn projected_psi_gradients_match_fd() {
        let mut rng = seeded(4);
        for kind in ModelKind::ALL {
            for seed in 0..4 {
                let (m, d, k) = (6, 4, 2);
                let x = batch(m, d, &mut rng);
                let y = batch(m, d, &mut rng);
                let psi = ProjectedAmortizedParams::init(kind, m, d, k, &mut rng);
                let (_, grad) = psi_projected_loss_grad(&psi, x.points(), y.points(), Order::Two).unwrap();
                let f = |q: &ProjectedAmortizedParams| {
                    let u = q.forward(&x, &y)?;
                    Ok(frame_coupling(x.points(), y.points(), u.cols(), Order::Two).value)
                };
                let r = fd_check_params("grad_psi_projected", seed, f, &psi, &grad, &FdConfig::default()).unwrap();
                assert!(r.pass, "{kind}: {r:?}");
            }
        }
    }

    #[test]
    fn frame_gradient_matches_fd() {
        let mut rng = seeded(5);
        for seed in 0..10 {
            let x = batch(7, 4, &mut rng);
            let y = batch(7, 4, &mut rng);
            let frame = ProjectionFrame::random(4, 2, &mut rng).unwrap();
            let vg = grad_frame_w(&x, &y, &frame, Order::Two).unwrap();
            let flat = frame.cols().iter().copied().collect::<Vec<_>>();
            let f = |v: &[f64]| {
                let u = Array2::from_shape_vec((4, 2), v.to_vec()).unwrap();
                Ok(frame_coupling(x.points(), y.points(), u.view(), Order::Two).value)
            };
            let g: Vec<f64> = vg.grad("frame").unwrap().iter().copied().collect();
            let r = fd_check("grad_frame_w", seed, f, &flat, &g, &FdConfig::default()).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn w0_gradient_is_tangent() {
        let mut rng = seeded(6);
        for kind in ModelKind::ALL {
            let x = batch(5, 3, &mut rng);
            let y = batch(5, 3, &mut rng);
            let psi = AmortizedParams::init(kind, 5, 3, &mut rng);
            let theta = psi.forward(&x, &y).unwrap();
            if kind == ModelKind::NonLinear {
                continue;
            }
            let vg = grad_psi_loss(&psi, &x, &y, Order::Two).unwrap();
            let g0 = vg.grad("w0").unwrap();
            let dot: f64 = g0.iter().zip(theta.as_slice()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-10, "{kind}: {dot}");
        }
    }

    #[test]
    fn zero_slopes_with_equal_batches_vanish() {
        let mut rng = seeded(7);
        let x = batch(5, 2, &mut rng);
        let mut psi = AmortizedParams::init(ModelKind::Linear, 5, 2, &mut rng);
        psi.linear.w1.fill(0.0);
        psi.linear.w2.fill(0.0);
        let vg = grad_psi_loss(&psi, &x, &x, Order::Two).unwrap();
        assert_eq!(vg.value, 0.0);
        assert!(vg.grad("w1").unwrap().iter().all(|&v| v == 0.0));
    }

    fn small_generator(rng: &mut impl Rng) -> GeneratorParams {
        GeneratorParams::init(3, &[6, 5], 2, rng)
    }

    #[test]
    fn phi_gradients_match_fd() {
        let mut rng = seeded(8);
        let m = 6;
        for seed in 0..4u64 {
            let phi = small_generator(&mut rng);
            let noise = phi.sample_noise(m, &mut rng);
            let x = batch(m, 2, &mut rng);
            let theta = direction(2, &mut rng);
            let thetas: Vec<Direction> = (0..3).map(|_| direction(2, &mut rng)).collect();
            let psi = AmortizedParams::init(ModelKind::GeneralizedLinear, m, 2, &mut rng);
            let frame = ProjectionFrame::random(2, 2, &mut rng).unwrap();
            let ppsi = ProjectedAmortizedParams::init(ModelKind::Linear, m, 2, 1, &mut rng);
            let sources = [
                SliceSource::Fixed(&theta),
                SliceSource::Projections(&thetas),
                SliceSource::Frame(&frame),
                SliceSource::Amortized { psi: &psi, detach_slice: false },
                SliceSource::AmortizedFrame { psi: &ppsi, detach_slice: false },
            ];
            for source in sources {
                let (_, grad) = phi_loss_grad(&phi, noise.view(), x.points(), source, Order::Two).unwrap();
                let f = |q: &GeneratorParams| {
                    let y = q.apply(noise.view())?;
                    Ok(loss_grad_y(x.points(), y.view(), source, Order::Two)?.0)
                };
                let r = fd_check_params("grad_phi_loss", seed, f, &phi, &grad, &FdConfig::default()).unwrap();
                assert!(r.pass, "{source:?}: {r:?}");
            }
        }
    }

    #[test]
    fn constant_generator_bias_gradient() {
        let mut rng = seeded(9);
        let x = EmpiricalMeasure::new(array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let mut phi = GeneratorParams::zeros(3, &[4], 2);
        phi.layers[1].b = array![0.3, -0.2];
        let noise = phi.sample_noise(4, &mut rng);
        let theta = direction(2, &mut rng);
        let vg = grad_phi_loss(&phi, noise.view(), &x, SliceSource::Fixed(&theta), Order::Two).unwrap();
        let b = phi.layers[1].b.to_vec();
        let f = |v: &[f64]| {
            let mut q = phi.clone();
            q.layers[1].b = Array1::from(v.to_vec());
            Ok(loss_grad_y(x.points(), q.apply(noise.view())?.view(), SliceSource::Fixed(&theta), Order::Two)?.0)
        };
        let g = vg.grad("layer1.b").unwrap().as_slice().unwrap().to_vec();
        let r = fd_check("bias", 0, f, &b, &g, &FdConfig::default()).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn detach_flag_changes_gradient() {
        let mut rng = seeded(10);
        let m = 6;
        let phi = small_generator(&mut rng);
        let noise = phi.sample_noise(m, &mut rng);
        let x = batch(m, 2, &mut rng);
        let psi = AmortizedParams::init(ModelKind::Linear, m, 2, &mut rng);
        let full = grad_phi_loss(&phi, noise.view(), &x, SliceSource::Amortized { psi: &psi, detach_slice: false }, Order::Two).unwrap();
        let detached = grad_phi_loss(&phi, noise.view(), &x, SliceSource::Amortized { psi: &psi, detach_slice: true }, Order::Two).unwrap();
        assert_eq!(full.value, detached.value);
        assert_ne!(full.grads, detached.grads);
    }

    #[test]
    fn generator_matching_data_has_zero_gradient() {
        let phi = GeneratorParams::new(vec![crate::trainer::generator::Dense { w: Array2::eye(2), b: Array1::zeros(2) }]).unwrap();
        let mut rng = seeded(11);
        let noise = phi.sample_noise(5, &mut rng);
        let x = EmpiricalMeasure::new(noise.clone()).unwrap();
        let psi = AmortizedParams::init(ModelKind::Linear, 5, 2, &mut rng);
        for source in [SliceSource::Fixed(&Direction::axis(2, 1)), SliceSource::Amortized { psi: &psi, detach_slice: false }] {
            let vg = grad_phi_loss(&phi, noise.view(), &x, source, Order::Two).unwrap();
            assert_eq!(vg.value, 0.0);
            assert!(vg.grads.values().all(|g| g.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let mut rng = seeded(12);
        let x = batch(9, 3, &mut rng);
        let y = batch(9, 3, &mut rng);
        let psi = AmortizedParams::init(ModelKind::NonLinear, 9, 3, &mut rng);
        let a = grad_psi_loss(&psi, &x, &y, Order::One).unwrap();
        let b = grad_psi_loss(&psi, &x, &y, Order::One).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_suite_passes() {
        let reports = gradient_suite(6, 42, &FdConfig::default()).unwrap();
        assert_eq!(reports.len(), 6 * SUITE_OPS.len());
        for r in &reports {
            assert!(r.pass, "{}", r.to_jsonl());
        }
    }

    #[test]
    fn fd_check_linear_function_is_exact() {
        let a = [0.5, -2.0, 3.25, 1.0];
        let f = |v: &[f64]| Ok(v.iter().zip(&a).map(|(x, y)| x * y).sum());
        let r = fd_check("linear", 0, f, &[1.0, 2.0, 3.0, 4.0], &a, &FdConfig::default()).unwrap();
        assert!(r.pass && r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn fd_check_flags_corrupted_gradient() {
        let mut rng = seeded(13);
        let x = batch(8, 2, &mut rng);
        let y = batch(8, 2, &mut rng);
        let theta = direction(2, &mut rng);
        let vg = grad_theta_w1d(&x, &y, &theta, Order::Two).unwrap();
        let mut g = vg.grad("theta").unwrap().as_slice().unwrap().to_vec();
        g[0] += 0.1;
        let f = |t: &[f64]| Ok(slice_coupling(x.points(), y.points(), t, Order::Two).value);
        let r = fd_check("corrupted", 0, f, theta.as_slice(), &g, &FdConfig::default()).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn fd_report_subsamples_and_serializes() {
        let n = 1000;
        let params: Vec<f64> = (0..n).map(|i| i as f64 * 0.001).collect();
        let f = |v: &[f64]| Ok(v.iter().map(|x| x * x).sum());
        let g: Vec<f64> = params.iter().map(|x| 2.0 * x).collect();
        let r = fd_check("square", 7, f, &params, &g, &FdConfig::default()).unwrap();
        assert_eq!(r.coords.len(), 200);
        assert!(r.coords.windows(2).all(|w| w[0].index < w[1].index));
        let line: serde_json::Value = serde_json::from_str(&r.to_jsonl()).unwrap();
        for key in ["op", "instance_seed", "max_rel_err", "mean_rel_err", "pass"] {
            assert!(line.get(key).is_some());
        }
    }
}
