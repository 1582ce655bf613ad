//! Small MLP push-forward generator `G_φ: R^noise_dim → R^d`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::params::{ByteReader, ParamBlocks};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Fully connected layer acting on rows: `y = x·W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }
}

/// Leaky-ReLU hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub layers: Vec<Dense>,
}

pub(crate) struct GeneratorCache {
    /// Input to each layer; `inputs[0]` is the noise.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

#[inline]
fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl GeneratorParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("generator needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.b.len() != layer.fan_out() {
                return Err(Error::DimensionMismatch {
                    expected: layer.fan_out(),
                    got: layer.b.len(),
                });
            }
            if i > 0 && layers[i - 1].fan_out() != layer.fan_in() {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].fan_out(),
                    got: layer.fan_in(),
                });
            }
        }
        Ok(Self { layers })
    }

    fn widths(noise_dim: usize, hidden: &[usize], out_dim: usize) -> Vec<usize> {
        let mut w = vec![noise_dim];
        w.extend_from_slice(hidden);
        w.push(out_dim);
        w
    }

    pub fn zeros(noise_dim: usize, hidden: &[usize], out_dim: usize) -> Self {
        let w = Self::widths(noise_dim, hidden, out_dim);
        Self {
            layers: w.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect(),
        }
    }

    /// He-normal hidden weights, `N(0, 1/fan_in)` output weights, zero biases.
    pub fn init<R: Rng + ?Sized>(noise_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut R) -> Self {
        let w = Self::widths(noise_dim, hidden, out_dim);
        let n = w.len() - 1;
        let layers = w
            .windows(2)
            .enumerate()
            .map(|(i, p)| {
                let gain = if i + 1 < n { 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) } else { 1.0 };
                let normal = Normal::new(0.0, (gain / p[0] as f64).sqrt()).expect("finite std");
                Dense {
                    w: Array2::from_shape_simple_fn((p[0], p[1]), || normal.sample(rng)),
                    b: Array1::zeros(p[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect(),
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(Dense::fan_out).collect()
    }

    /// `n × noise_dim` standard normal noise.
    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.noise_dim()), || rng.sample(StandardNormal))
    }

    fn check_noise(&self, noise: ArrayView2<'_, f64>) -> Result<()> {
        if noise.ncols() != self.noise_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.noise_dim(),
                got: noise.ncols(),
            });
        }
        Ok(())
    }

    /// Raw row-wise output; may contain non-finite values if the weights have diverged.
    pub fn apply(&self, noise: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(noise)?.0)
    }

    pub(crate) fn forward_cached(&self, noise: ArrayView2<'_, f64>) -> Result<(Array2<f64>, GeneratorCache)> {
        self.check_noise(noise)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = noise.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w) + &layer.b;
            inputs.push(h);
            if i < last {
                h = z.mapv(leaky);
                pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, GeneratorCache { inputs, pre }))
    }

    /// Gradient of a scalar loss with respect to φ, given its gradient `d_out` with
    /// respect to the output rows.
    pub(crate) fn backward(&self, cache: &GeneratorCache, d_out: ArrayView2<'_, f64>) -> GeneratorParams {
        let mut grad = self.zeros_like();
        let mut g = d_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                g.zip_mut_with(&cache.pre[i], |gv, &z| *gv *= leaky_grad(z));
            }
            grad.layers[i].w = cache.inputs[i].t().dot(&g);
            grad.layers[i].b = g.sum_axis(Axis(0));
            if i > 0 {
                g = g.dot(&self.layers[i].w.t());
            }
        }
        grad
    }

    /// `"GNSW"`, u32 layer count, u32 widths (`noise_dim`, hidden..., `d`), then
    /// each layer's `W` (row-major, `in × out`) and `b` as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"GNSW");
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.noise_dim() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader::new(bytes);
        reader.expect_magic(b"GNSW")?;
        let n = reader.u32()? as usize;
        if n == 0 {
            return Err(Error::Parse { offset: 4, msg: "generator with zero layers".into() });
        }
        let widths = (0..=n).map(|_| reader.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let mut params = Self::zeros(widths[0], &widths[1..n], widths[n]);
        let flat = reader.f64s(params.param_len())?;
        reader.finish()?;
        params.load_flat(&flat);
        Ok(params)
    }
}

impl ParamBlocks for GeneratorParams {
    fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w"), l.w.shape().to_vec(), l.w.as_slice().expect("contiguous")));
            out.push((format!("layer{i}.b"), vec![l.b.len()], l.b.as_slice().expect("contiguous")));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.w.as_slice_mut().expect("contiguous"));
            out.push(l.b.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

/// Row-wise application of `G_φ` to a noise batch.
pub fn generator_forward(phi: &GeneratorParams, noise: ArrayView2<'_, f64>) -> Result<EmpiricalMeasure> {
    let out = phi.apply(noise)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("generator produced non-finite output".into()));
    }
    EmpiricalMeasure::new(out)
}
