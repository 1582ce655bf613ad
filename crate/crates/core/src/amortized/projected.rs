//! Frame-valued amortized models: `U = Q` of the QR factorization of
//! `W0 + T(X)W1 + T(Y)W2` (`d × k`), with the generalized and non-linear
//! variants applying the same MLP block as their direction-valued siblings
//! (to the points, respectively to each column).

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{block2, check_inputs, MlpBlock, ModelKind};
use crate::error::{Error, Result};
use crate::linalg::{thin_qr, thin_qr_backward};
use crate::measures::EmpiricalMeasure;
use crate::params::{ByteReader, ParamBlocks};
use crate::slicers::ProjectionFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedAmortizedParams {
    pub kind: ModelKind,
    /// `d × k`
    pub w0: Array2<f64>,
    /// `m × k`
    pub w1: Array2<f64>,
    /// `m × k`
    pub w2: Array2<f64>,
    pub mlp: Option<MlpBlock>,
}

impl ProjectedAmortizedParams {
    pub fn zeros(kind: ModelKind, m: usize, d: usize, k: usize) -> Self {
        Self {
            kind,
            w0: Array2::zeros((d, k)),
            w1: Array2::zeros((m, k)),
            w2: Array2::zeros((m, k)),
            mlp: (kind != ModelKind::Linear).then(|| MlpBlock::zeros(d)),
        }
    }

    /// Same distributions as [`super::LinearAmortizedParams::init`] and [`MlpBlock::init`].
    pub fn init<R: Rng + ?Sized>(kind: ModelKind, m: usize, d: usize, k: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (d as f64).powf(-0.25)).expect("finite std");
        let w0 = Array2::from_shape_simple_fn((d, k), || normal.sample(rng));
        let w1 = Array2::from_shape_simple_fn((m, k), || normal.sample(rng));
        let w2 = Array2::from_shape_simple_fn((m, k), || normal.sample(rng));
        let mlp = (kind != ModelKind::Linear).then(|| MlpBlock::init(d, rng));
        Self { kind, w0, w1, w2, mlp }
    }

    pub fn m(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d(&self) -> usize {
        self.w0.nrows()
    }

    pub fn k(&self) -> usize {
        self.w0.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.param_len()
    }

    pub fn rerandomize_w0<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fresh = Self::init(ModelKind::Linear, 0, self.d(), self.k(), rng);
        self.w0 = fresh.w0;
    }

    pub fn forward(&self, x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<ProjectionFrame> {
        Ok(self.forward_cached(x.points(), y.points())?.frame)
    }

    fn combine(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
        &self.w0 + &a.t().dot(&self.w1) + &b.t().dot(&self.w2)
    }

    pub(crate) fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
    ) -> Result<ProjectedCache> {
        check_inputs(self.m(), self.d(), x, y)?;
        let (pre, hidden) = match self.kind {
            ModelKind::Linear => (self.combine(x, y), FrameHidden::None),
            ModelKind::GeneralizedLinear => {
                let mlp = self.mlp.as_ref().expect("validated");
                let (sx, gx) = mlp.apply_rows(x);
                let (sy, gy) = mlp.apply_rows(y);
                let z = self.combine(gx.view(), gy.view());
                (z, FrameHidden::Features { sx, sy, gx, gy })
            }
            ModelKind::NonLinear => {
                let mlp = self.mlp.as_ref().expect("validated");
                let z = self.combine(x, y);
                let zt = z.t().to_owned();
                let (s, h) = mlp.apply_rows(zt.view());
                (h.t().to_owned(), FrameHidden::Head { zt, s })
            }
        };
        let (q, r) = thin_qr(pre.view())?;
        Ok(ProjectedCache {
            frame: ProjectionFrame::from_orthonormal(q),
            r,
            hidden,
        })
    }

    /// Given `∂L/∂U` for the output frame, returns `(∂L/∂ψ, ∂L/∂X, ∂L/∂Y)`.
    pub(crate) fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        cache: &ProjectedCache,
        g_frame: ArrayView2<'_, f64>,
    ) -> (ProjectedAmortizedParams, Array2<f64>, Array2<f64>) {
        let g_pre = thin_qr_backward(cache.frame.cols(), cache.r.view(), g_frame);
        let mut grad = Self::zeros(self.kind, self.m(), self.d(), self.k());
        match &cache.hidden {
            FrameHidden::None => {
                let (dx, dy) = self.linear_backward(x, y, &g_pre, &mut grad);
                (grad, dx, dy)
            }
            FrameHidden::Features { sx, sy, gx, gy } => {
                let mlp = self.mlp.as_ref().expect("validated");
                let (dgx, dgy) = self.linear_backward(gx.view(), gy.view(), &g_pre, &mut grad);
                let gm = grad.mlp.as_mut().expect("zeros has block");
                let dx = mlp.backward_rows(x, sx.view(), dgx.view(), gm);
                let dy = mlp.backward_rows(y, sy.view(), dgy.view(), gm);
                (grad, dx, dy)
            }
            FrameHidden::Head { zt, s } => {
                let mlp = self.mlp.as_ref().expect("validated");
                let gm = grad.mlp.as_mut().expect("zeros has block");
                let g_pre_t = g_pre.t().to_owned();
                let dzt = mlp.backward_rows(zt.view(), s.view(), g_pre_t.view(), gm);
                let dz = dzt.t().to_owned();
                let (dx, dy) = self.linear_backward(x, y, &dz, &mut grad);
                (grad, dx, dy)
            }
        }
    }

    fn linear_backward(
        &self,
        a: ArrayView2<'_, f64>,
        b: ArrayView2<'_, f64>,
        gz: &Array2<f64>,
        grad: &mut ProjectedAmortizedParams,
    ) -> (Array2<f64>, Array2<f64>) {
        grad.w0 += gz;
        grad.w1 += &a.dot(gz);
        grad.w2 += &b.dot(gz);
        (self.w1.dot(&gz.t()), self.w2.dot(&gz.t()))
    }

    /// `"APSW"`, u8 kind, u32 m, u32 d, u32 k, then `W0, W1, W2[, W_a, W_b, b0]`
    /// as little-endian f64, matrices row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"APSW");
        out.push(self.kind.code());
        for n in [self.m(), self.d(), self.k()] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader::new(bytes);
        reader.expect_magic(b"APSW")?;
        let code = reader.u8()?;
        let kind = ModelKind::from_code(code).ok_or_else(|| Error::Parse {
            offset: 4,
            msg: format!("unknown model kind {code}"),
        })?;
        let m = reader.u32()? as usize;
        let d = reader.u32()? as usize;
        let k = reader.u32()? as usize;
        let mut params = Self::zeros(kind, m, d, k);
        let flat = reader.f64s(params.param_len())?;
        reader.finish()?;
        params.load_flat(&flat);
        Ok(params)
    }
}

impl ParamBlocks for ProjectedAmortizedParams {
    fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![
            block2("w0", &self.w0),
            block2("w1", &self.w1),
            block2("w2", &self.w2),
        ];
        if let Some(mlp) = &self.mlp {
            out.push(block2("mlp.w_a", &mlp.w_a));
            out.push(block2("mlp.w_b", &mlp.w_b));
            out.push(super::block("mlp.b0", &mlp.b0));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.w0.as_slice_mut().expect("contiguous"),
            self.w1.as_slice_mut().expect("contiguous"),
            self.w2.as_slice_mut().expect("contiguous"),
        ];
        if let Some(mlp) = &mut self.mlp {
            out.push(mlp.w_a.as_slice_mut().expect("contiguous"));
            out.push(mlp.w_b.as_slice_mut().expect("contiguous"));
            out.push(mlp.b0.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

pub(crate) struct ProjectedCache {
    pub frame: ProjectionFrame,
    r: Array2<f64>,
    hidden: FrameHidden,
}

enum FrameHidden {
    None,
    Features {
        sx: Array2<f64>,
        sy: Array2<f64>,
        gx: Array2<f64>,
        gy: Array2<f64>,
    },
    Head {
        zt: Array2<f64>,
        s: Array2<f64>,
    },
}

/// Frame-valued amortized model; `Q` of `QR(W0 + T(X)W1 + T(Y)W2)` for the linear kind.
pub fn forward_projected(
    psi: &ProjectedAmortizedParams,
    x: &EmpiricalMeasure,
    y: &EmpiricalMeasure,
) -> Result<ProjectionFrame> {
    psi.forward(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amortized::{forward_linear, LinearAmortizedParams};
    use crate::linalg::orthonormality_error;
    use crate::rng::seeded;
    use ndarray::{s, Array1};
    use rand_distr::StandardNormal;

    fn random_batch(m: usize, d: usize, rng: &mut impl Rng) -> EmpiricalMeasure {
        EmpiricalMeasure::new(Array2::from_shape_simple_fn((m, d), || rng.sample(StandardNormal))).unwrap()
    }

    #[test]
    fn bias_only_identity_columns() {
        let mut rng = seeded(0);
        let (m, d, k) = (5, 4, 2);
        let mut psi = ProjectedAmortizedParams::zeros(ModelKind::Linear, m, d, k);
        for j in 0..k {
            psi.w0[[j, j]] = 1.0;
        }
        let (x, y) = (random_batch(m, d, &mut rng), random_batch(m, d, &mut rng));
        let frame = forward_projected(&psi, &x, &y).unwrap();
        assert_eq!(frame.cols(), psi.w0.view());
    }

    #[test]
    fn orthonormal_for_random_draws() {
        let mut rng = seeded(1);
        for kind in ModelKind::ALL {
            for _ in 0..100 {
                let d = rng.random_range(2..6);
                let k = rng.random_range(1..=d);
                let m = rng.random_range(1..8);
                let psi = ProjectedAmortizedParams::init(kind, m, d, k, &mut rng);
                let (x, y) = (random_batch(m, d, &mut rng), random_batch(m, d, &mut rng));
                let frame = psi.forward(&x, &y).unwrap();
                assert!(orthonormality_error(frame.cols()) <= 1e-10);
            }
        }
    }

    #[test]
    fn single_column_matches_direction_model() {
        let mut rng = seeded(2);
        for _ in 0..20 {
            let (m, d) = (6, 3);
            let lin = LinearAmortizedParams::init(m, d, &mut rng);
            let psi = ProjectedAmortizedParams {
                kind: ModelKind::Linear,
                w0: lin.w0.clone().insert_axis(ndarray::Axis(1)),
                w1: lin.w1.clone().insert_axis(ndarray::Axis(1)),
                w2: lin.w2.clone().insert_axis(ndarray::Axis(1)),
                mlp: None,
            };
            let (x, y) = (random_batch(m, d, &mut rng), random_batch(m, d, &mut rng));
            let frame = psi.forward(&x, &y).unwrap();
            let theta = forward_linear(&lin, &x, &y).unwrap();
            let col: Array1<f64> = frame.cols().slice(s![.., 0]).to_owned();
            // Same line; with a positive R diagonal also the same sign.
            assert!((col.dot(&theta.vec()).abs() - 1.0).abs() < 1e-12);
            assert!(col.iter().zip(theta.vec()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn rank_deficient_input_errors() {
        let mut rng = seeded(3);
        let (x, y) = (random_batch(3, 3, &mut rng), random_batch(3, 3, &mut rng));
        let psi = ProjectedAmortizedParams::zeros(ModelKind::Linear, 3, 3, 2);
        assert!(matches!(psi.forward(&x, &y), Err(Error::DegenerateFrame { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded(4);
        for kind in ModelKind::ALL {
            let psi = ProjectedAmortizedParams::init(kind, 4, 3, 2, &mut rng);
            let bytes = psi.to_bytes();
            assert_eq!(ProjectedAmortizedParams::from_bytes(&bytes).unwrap(), psi);
        }
    }
}
