//! Amortized projection models.
//!
//! Each model maps a pair of mini-batches `(X, Y)` (both `m × d`) to a slicing
//! direction. Writing `T(X)` for the `d × m` matrix whose columns are the
//! points of `X`:
//!
//! * linear: `θ = z/‖z‖` with `z = w0 + T(X)w1 + T(Y)w2`
//! * generalized linear: the same, after mapping every point through
//!   `g(x) = W_b·σ(W_a·x) + b0`
//! * non-linear: `θ = h(z)/‖h(z)‖` with `h(x) = W_b·σ(W_a·x) + b0`
//!
//! The normalization uses a single Euclidean norm so the output lies on the
//! unit sphere. [`projected`] holds the frame-valued variants.

pub mod projected;

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::sigmoid;
use crate::measures::{Direction, EmpiricalMeasure};
use crate::params::ParamBlocks;

pub use projected::{forward_projected, ProjectedAmortizedParams};

/// Norm below which the pre-normalization vector counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Linear,
    GeneralizedLinear,
    NonLinear,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::Linear,
        ModelKind::GeneralizedLinear,
        ModelKind::NonLinear,
    ];

    pub(crate) fn code(self) -> u8 {
        match self {
            ModelKind::Linear => 0,
            ModelKind::GeneralizedLinear => 1,
            ModelKind::NonLinear => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ModelKind::Linear),
            1 => Some(ModelKind::GeneralizedLinear),
            2 => Some(ModelKind::NonLinear),
            _ => None,
        }
    }

    /// Parameter total of the model for mini-batch size `m` in dimension `d`.
    pub fn parameter_count(self, m: usize, d: usize) -> usize {
        match self {
            ModelKind::Linear => 2 * m + d,
            _ => 2 * (m + d * d + d),
        }
    }

    /// Operation count of one forward pass, `(2m+1)d`, `4md² + 6md + d` and
    /// `2md + 2d² + 3d` respectively.
    pub fn flop_estimate(self, m: usize, d: usize) -> usize {
        match self {
            ModelKind::Linear => (2 * m + 1) * d,
            ModelKind::GeneralizedLinear => 4 * m * d * d + 6 * m * d + d,
            ModelKind::NonLinear => 2 * m * d + 2 * d * d + 3 * d,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::GeneralizedLinear => "generalized_linear",
            ModelKind::NonLinear => "nonlinear",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAmortizedParams {
    pub w0: Array1<f64>,
    pub w1: Array1<f64>,
    pub w2: Array1<f64>,
}

impl LinearAmortizedParams {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            w0: Array1::zeros(d),
            w1: Array1::zeros(m),
            w2: Array1::zeros(m),
        }
    }

    /// Entries drawn i.i.d. from `N(0, 1/√d)` (variance).
    pub fn init<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (d as f64).powf(-0.25)).expect("finite std");
        Self {
            w0: Array1::from_shape_simple_fn(d, || normal.sample(rng)),
            w1: Array1::from_shape_simple_fn(m, || normal.sample(rng)),
            w2: Array1::from_shape_simple_fn(m, || normal.sample(rng)),
        }
    }

    pub fn m(&self) -> usize {
        self.w1.len()
    }

    pub fn d(&self) -> usize {
        self.w0.len()
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.m() + self.d()
    }

    /// `w0 + (T(X)w1 + T(Y)w2)`; the data terms are added first so swapping
    /// `(X, w1)` with `(Y, w2)` gives a bit-identical result.
    fn combine(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array1<f64> {
        &self.w0 + &(x.t().dot(&self.w1) + y.t().dot(&self.w2))
    }
}

/// `x ↦ W_b·σ(W_a·x) + b0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    pub w_a: Array2<f64>,
    pub w_b: Array2<f64>,
    pub b0: Array1<f64>,
}

impl MlpBlock {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_a: Array2::zeros((d, d)),
            w_b: Array2::zeros((d, d)),
            b0: Array1::zeros(d),
        }
    }

    /// Weights `N(0, 1/d)`, bias zero.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("finite std");
        Self {
            w_a: Array2::from_shape_simple_fn((d, d), || normal.sample(rng)),
            w_b: Array2::from_shape_simple_fn((d, d), || normal.sample(rng)),
            b0: Array1::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.b0.len()
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.d();
        2 * d * d + d
    }

    /// Row-wise application to an `n × d` matrix; returns `(σ(X·W_aᵀ), output)`.
    pub(crate) fn apply_rows(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let s = x.dot(&self.w_a.t()).mapv(sigmoid);
        let out = s.dot(&self.w_b.t()) + &self.b0;
        (s, out)
    }

    /// Back-propagates `d_out` (rows) through [`apply_rows`]; accumulates the
    /// weight gradients into `grad` and returns the gradient for the input rows.
    pub(crate) fn backward_rows(
        &self,
        x: ArrayView2<'_, f64>,
        s: ArrayView2<'_, f64>,
        d_out: ArrayView2<'_, f64>,
        grad: &mut MlpBlock,
    ) -> Array2<f64> {
        grad.w_b += &d_out.t().dot(&s);
        grad.b0 += &d_out.sum_axis(Axis(0));
        let mut da = d_out.dot(&self.w_b);
        da.zip_mut_with(&s, |g, &sv| *g *= sv * (1.0 - sv));
        grad.w_a += &da.t().dot(&x);
        da.dot(&self.w_a)
    }
}

/// Parameters ψ of one of the three direction-valued amortized models.
#[derive(Debug, Clone, PartialEq)]
pub struct AmortizedParams {
    pub kind: ModelKind,
    pub linear: LinearAmortizedParams,
    /// Present iff `kind != Linear`.
    pub mlp: Option<MlpBlock>,
}

impl AmortizedParams {
    pub fn new(kind: ModelKind, linear: LinearAmortizedParams, mlp: Option<MlpBlock>) -> Result<Self> {
        let d = linear.d();
        if linear.w2.len() != linear.w1.len() {
            return Err(Error::DimensionMismatch {
                expected: linear.w1.len(),
                got: linear.w2.len(),
            });
        }
        match (&kind, &mlp) {
            (ModelKind::Linear, None) => {}
            (ModelKind::Linear, Some(_)) => {
                return Err(Error::InvalidArgument("linear model takes no MLP block".into()))
            }
            (_, None) => {
                return Err(Error::InvalidArgument(format!("{kind} model needs an MLP block")))
            }
            (_, Some(block)) => {
                if block.d() != d || block.w_a.dim() != (d, d) || block.w_b.dim() != (d, d) {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: block.d(),
                    });
                }
            }
        }
        Ok(Self { kind, linear, mlp })
    }

    pub fn zeros(kind: ModelKind, m: usize, d: usize) -> Self {
        let mlp = (kind != ModelKind::Linear).then(|| MlpBlock::zeros(d));
        Self {
            kind,
            linear: LinearAmortizedParams::zeros(m, d),
            mlp,
        }
    }

    pub fn init<R: Rng + ?Sized>(kind: ModelKind, m: usize, d: usize, rng: &mut R) -> Self {
        let linear = LinearAmortizedParams::init(m, d, rng);
        let mlp = (kind != ModelKind::Linear).then(|| MlpBlock::init(d, rng));
        Self { kind, linear, mlp }
    }

    pub fn m(&self) -> usize {
        self.linear.m()
    }

    pub fn d(&self) -> usize {
        self.linear.d()
    }

    pub fn parameter_count(&self) -> usize {
        self.linear.parameter_count() + self.mlp.as_ref().map_or(0, MlpBlock::parameter_count)
    }

    pub fn flop_estimate(&self) -> usize {
        self.kind.flop_estimate(self.m(), self.d())
    }

    /// Replaces `w0` with a fresh draw; used to escape a degenerate direction.
    pub fn rerandomize_w0<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let d = self.d();
        self.linear.w0 = LinearAmortizedParams::init(0, d, rng).w0;
    }

    pub fn forward(&self, x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<Direction> {
        Ok(self.forward_cached(x.points(), y.points())?.theta)
    }

    pub(crate) fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
    ) -> Result<ForwardCache> {
        check_inputs(self.m(), self.d(), x, y)?;
        match self.kind {
            ModelKind::Linear => {
                let z = self.linear.combine(x, y);
                normalize_cached(z, Hidden::None)
            }
            ModelKind::GeneralizedLinear => {
                let mlp = self.mlp.as_ref().expect("validated");
                let (sx, gx) = mlp.apply_rows(x);
                let (sy, gy) = mlp.apply_rows(y);
                let z = self.linear.combine(gx.view(), gy.view());
                normalize_cached(z, Hidden::Features { sx, sy, gx, gy })
            }
            ModelKind::NonLinear => {
                let mlp = self.mlp.as_ref().expect("validated");
                let z = self.linear.combine(x, y);
                let (s, h) = mlp.apply_rows(z.view().insert_axis(Axis(0)));
                let h = h.row(0).to_owned();
                normalize_cached(h, Hidden::Head { z, s: s.row(0).to_owned() })
            }
        }
    }

    /// Reverse pass: given `∂L/∂θ`, returns `(∂L/∂ψ, ∂L/∂X, ∂L/∂Y)`.
    pub(crate) fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        cache: &ForwardCache,
        g_theta: &Array1<f64>,
    ) -> (AmortizedParams, Array2<f64>, Array2<f64>) {
        let theta = cache.theta.vec();
        // Normalization Jacobian (I − θθᵀ)/‖v‖ is symmetric.
        let g_pre = (g_theta - &(&theta * theta.dot(g_theta))) / cache.norm;
        let mut grad = AmortizedParams::zeros(self.kind, self.m(), self.d());
        match &cache.hidden {
            Hidden::None => {
                let (dx, dy) = linear_backward(&self.linear, x, y, &g_pre, &mut grad.linear);
                (grad, dx, dy)
            }
            Hidden::Features { sx, sy, gx, gy } => {
                let mlp = self.mlp.as_ref().expect("validated");
                let (dgx, dgy) =
                    linear_backward(&self.linear, gx.view(), gy.view(), &g_pre, &mut grad.linear);
                let gm = grad.mlp.as_mut().expect("zeros has block");
                let dx = mlp.backward_rows(x, sx.view(), dgx.view(), gm);
                let dy = mlp.backward_rows(y, sy.view(), dgy.view(), gm);
                (grad, dx, dy)
            }
            Hidden::Head { z, s } => {
                let mlp = self.mlp.as_ref().expect("validated");
                let gm = grad.mlp.as_mut().expect("zeros has block");
                let dz = mlp.backward_rows(
                    z.view().insert_axis(Axis(0)),
                    s.view().insert_axis(Axis(0)),
                    g_pre.view().insert_axis(Axis(0)),
                    gm,
                );
                let dz = dz.row(0).to_owned();
                let (dx, dy) = linear_backward(&self.linear, x, y, &dz, &mut grad.linear);
                (grad, dx, dy)
            }
        }
    }

    /// `"AMSW"`, u8 kind, u32 m, u32 d, then `w0, w1, w2[, W_a, W_b, b0]` as
    /// little-endian f64 (matrices row-major).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"AMSW");
        out.push(self.kind.code());
        out.extend_from_slice(&(self.m() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d() as u32).to_le_bytes());
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = crate::params::ByteReader::new(bytes);
        reader.expect_magic(b"AMSW")?;
        let code = reader.u8()?;
        let kind = ModelKind::from_code(code).ok_or_else(|| Error::Parse {
            offset: 4,
            msg: format!("unknown model kind {code}"),
        })?;
        let m = reader.u32()? as usize;
        let d = reader.u32()? as usize;
        let mut params = Self::zeros(kind, m, d);
        let flat = reader.f64s(params.parameter_count())?;
        reader.finish()?;
        params.load_flat(&flat);
        Ok(params)
    }
}

impl ParamBlocks for AmortizedParams {
    fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![
            block("w0", &self.linear.w0),
            block("w1", &self.linear.w1),
            block("w2", &self.linear.w2),
        ];
        if let Some(mlp) = &self.mlp {
            out.push(block2("mlp.w_a", &mlp.w_a));
            out.push(block2("mlp.w_b", &mlp.w_b));
            out.push(block("mlp.b0", &mlp.b0));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.linear.w0.as_slice_mut().expect("contiguous"),
            self.linear.w1.as_slice_mut().expect("contiguous"),
            self.linear.w2.as_slice_mut().expect("contiguous"),
        ];
        if let Some(mlp) = &mut self.mlp {
            out.push(mlp.w_a.as_slice_mut().expect("contiguous"));
            out.push(mlp.w_b.as_slice_mut().expect("contiguous"));
            out.push(mlp.b0.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

pub(crate) fn block<'a>(name: &str, a: &'a Array1<f64>) -> (String, Vec<usize>, &'a [f64]) {
    (name.to_string(), vec![a.len()], a.as_slice().expect("contiguous"))
}

pub(crate) fn block2<'a>(name: &str, a: &'a Array2<f64>) -> (String, Vec<usize>, &'a [f64]) {
    (
        name.to_string(),
        vec![a.nrows(), a.ncols()],
        a.as_slice().expect("contiguous"),
    )
}

pub(crate) fn check_inputs(
    m: usize,
    d: usize,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Result<()> {
    for v in [x, y] {
        if v.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.ncols(),
            });
        }
        if v.nrows() != m {
            return Err(Error::SizeMismatch {
                left: m,
                right: v.nrows(),
            });
        }
    }
    Ok(())
}

/// Intermediate values of a forward pass, kept for the reverse pass.
pub(crate) struct ForwardCache {
    pub theta: Direction,
    norm: f64,
    hidden: Hidden,
}

enum Hidden {
    None,
    Features {
        sx: Array2<f64>,
        sy: Array2<f64>,
        gx: Array2<f64>,
        gy: Array2<f64>,
    },
    Head {
        z: Array1<f64>,
        s: Array1<f64>,
    },
}

fn normalize_cached(v: Array1<f64>, hidden: Hidden) -> Result<ForwardCache> {
    let norm = v.dot(&v).sqrt();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::DegenerateDirection { norm });
    }
    let theta = Direction::normalized(v)?;
    Ok(ForwardCache {
        theta,
        norm,
        hidden,
    })
}

/// Reverse pass of `z = w0 + T(A)w1 + T(B)w2`; returns `(∂/∂A, ∂/∂B)`.
fn linear_backward(
    psi: &LinearAmortizedParams,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    gz: &Array1<f64>,
    grad: &mut LinearAmortizedParams,
) -> (Array2<f64>, Array2<f64>) {
    grad.w0 += gz;
    grad.w1 += &a.dot(gz);
    grad.w2 += &b.dot(gz);
    let outer = |w: &Array1<f64>| {
        Array2::from_shape_fn((w.len(), gz.len()), |(i, j)| w[i] * gz[j])
    };
    (outer(&psi.w1), outer(&psi.w2))
}

/// Linear amortized direction `(w0 + T(X)w1 + T(Y)w2)/‖·‖₂`.
pub fn forward_linear(
    psi: &LinearAmortizedParams,
    x: &EmpiricalMeasure,
    y: &EmpiricalMeasure,
) -> Result<Direction> {
    check_inputs(psi.m(), psi.d(), x.points(), y.points())?;
    Direction::normalized(psi.combine(x.points(), y.points()))
}

pub fn forward_generalized(
    psi: &AmortizedParams,
    x: &EmpiricalMeasure,
    y: &EmpiricalMeasure,
) -> Result<Direction> {
    expect_kind(psi, ModelKind::GeneralizedLinear)?;
    psi.forward(x, y)
}

pub fn forward_nonlinear(
    psi: &AmortizedParams,
    x: &EmpiricalMeasure,
    y: &EmpiricalMeasure,
) -> Result<Direction> {
    expect_kind(psi, ModelKind::NonLinear)?;
    psi.forward(x, y)
}

fn expect_kind(psi: &AmortizedParams, kind: ModelKind) -> Result<()> {
    if psi.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "expected a {kind} model, got {}",
            psi.kind
        )));
    }
    Ok(())
}
