//! Per-iteration timing of the slice losses.
//!
//! One iteration is the slice-side work of one outer training step on a fixed
//! mini-batch pair: finding the slice (random draws, inner ascent or an
//! amortized forward pass) plus the loss gradient with respect to the
//! generated batch and, for amortized models, with respect to ψ. The
//! generator itself is excluded so that timings reflect the loss alone.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::alloc;
use crate::amortized::{AmortizedParams, ModelKind};
use crate::error::{Error, Result};
use crate::grad::{loss_grad_y, psi_loss_grad, SliceSource};
use crate::measures::{sample_sphere, EmpiricalMeasure, Order};
use crate::rng::{child_seed, seeded};
use crate::slicers::{max_sw_run, SliceOptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    Sw { l: usize },
    MaxSw { t2: usize },
    Amortized(ModelKind),
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Sw { .. } => "sw",
            BenchMethod::MaxSw { .. } => "max_sw",
            BenchMethod::Amortized(ModelKind::Linear) => "la_sw",
            BenchMethod::Amortized(ModelKind::GeneralizedLinear) => "ga_sw",
            BenchMethod::Amortized(ModelKind::NonLinear) => "na_sw",
        }
    }

    /// `L`, `T2` or the model kind.
    pub fn param(self) -> String {
        match self {
            BenchMethod::Sw { l } => format!("L={l}"),
            BenchMethod::MaxSw { t2 } => format!("T2={t2}"),
            BenchMethod::Amortized(kind) => kind.to_string(),
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.param())
    }
}

/// Operation count of one iteration, with `k` mini-batch pairs and
/// `log2 m` for the sort.
pub fn loss_flop_estimate(method: BenchMethod, m: usize, d: usize, k: usize) -> f64 {
    let (m, d, k) = (m as f64, d as f64, k as f64);
    let sort = m * m.max(2.0).log2();
    match method {
        BenchMethod::Sw { l } => 2.0 * k * l as f64 * (sort + d * m),
        BenchMethod::MaxSw { t2 } => 2.0 * k * t2 as f64 * (sort + d * m),
        BenchMethod::Amortized(ModelKind::Linear) => 2.0 * k * (sort + 3.0 * m * d + d),
        BenchMethod::Amortized(ModelKind::GeneralizedLinear) => {
            2.0 * k * (sort + 4.0 * m * d * d + 7.0 * m * d + d)
        }
        BenchMethod::Amortized(ModelKind::NonLinear) => 2.0 * k * (sort + 3.0 * m * d + 2.0 * d * d + 3.0 * d),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchGrid {
    pub methods: Vec<BenchMethod>,
    pub m: usize,
    pub d: usize,
    pub p: Order,
    pub seed: u64,
    /// Discarded repetitions before timing.
    pub warmup: usize,
    pub reps: usize,
    /// Iterations per timed repetition.
    pub iters_per_rep: usize,
    /// Slice learning rate for the inner ascent.
    pub eta2: f64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            methods: vec![
                BenchMethod::Sw { l: 1 },
                BenchMethod::Sw { l: 100 },
                BenchMethod::Sw { l: 1000 },
                BenchMethod::MaxSw { t2: 1 },
                BenchMethod::MaxSw { t2: 10 },
                BenchMethod::MaxSw { t2: 100 },
                BenchMethod::Amortized(ModelKind::Linear),
                BenchMethod::Amortized(ModelKind::GeneralizedLinear),
                BenchMethod::Amortized(ModelKind::NonLinear),
            ],
            m: 128,
            d: 2,
            p: Order::Two,
            seed: 0,
            warmup: 3,
            reps: 7,
            iters_per_rep: 20,
            eta2: 0.01,
        }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 3 || self.reps < 5 {
            return Err(Error::Config(format!(
                "bench needs warmup >= 3 and reps >= 5, got {} and {}",
                self.warmup, self.reps
            )));
        }
        if self.m == 0 || self.d == 0 || self.iters_per_rep == 0 || self.methods.is_empty() {
            return Err(Error::Config("bench grid has an empty dimension".into()));
        }
        for method in &self.methods {
            match *method {
                BenchMethod::Sw { l: 0 } | BenchMethod::MaxSw { t2: 0 } => {
                    return Err(Error::Config(format!("{method}: count must be positive")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub method: String,
    pub param: String,
    pub m: usize,
    pub d: usize,
    pub iters_per_sec: f64,
    /// `None` when the tracking allocator is not installed.
    pub peak_bytes: Option<usize>,
    pub seed: u64,
    #[serde(skip)]
    pub median_secs: f64,
    #[serde(skip)]
    pub reps: usize,
}

pub const CSV_HEADER: [&str; 7] = ["method", "param", "m", "d", "iters_per_sec", "peak_bytes", "seed"];

pub fn write_csv<W: Write>(records: &[BenchRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        let peak = r.peak_bytes.map_or_else(|| "unavailable".to_string(), |b| b.to_string());
        w.write_record([
            r.method.clone(),
            r.param.clone(),
            r.m.to_string(),
            r.d.to_string(),
            format!("{:.6}", r.iters_per_sec),
            peak,
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Restricts the calling thread to the CPU it is running on and restores the
/// previous mask on drop. Best effort: failures are ignored.
struct CpuPin {
    #[cfg(target_os = "linux")]
    previous: Option<libc::cpu_set_t>,
}

impl CpuPin {
    #[cfg(target_os = "linux")]
    fn new() -> Self {
        // SAFETY: plain libc calls on the current thread with owned, zeroed masks.
        unsafe {
            let mut previous: libc::cpu_set_t = std::mem::zeroed();
            let size = std::mem::size_of::<libc::cpu_set_t>();
            if libc::sched_getaffinity(0, size, &mut previous) != 0 {
                return Self { previous: None };
            }
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return Self { previous: None };
            }
            let mut one: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut one);
            if libc::sched_setaffinity(0, size, &one) != 0 {
                return Self { previous: None };
            }
            Self { previous: Some(previous) }
        }
    }

    #[cfg(not(target_os = "linux"))]
    fn new() -> Self {
        Self {}
    }
}

#[cfg(target_os = "linux")]
impl Drop for CpuPin {
    fn drop(&mut self) {
        if let Some(prev) = &self.previous {
            // SAFETY: restores a mask previously returned by sched_getaffinity.
            unsafe {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), prev);
            }
        }
    }
}

struct Fixture {
    x: EmpiricalMeasure,
    y: EmpiricalMeasure,
    psi: [AmortizedParams; 3],
}

fn fixture(grid: &BenchGrid) -> Result<Fixture> {
    let mut rng = seeded(grid.seed);
    let mut batch = |shift: f64| {
        EmpiricalMeasure::new(Array2::from_shape_simple_fn((grid.m, grid.d), || {
            rng.sample::<f64, _>(StandardNormal) + shift
        }))
    };
    let x = batch(0.0)?;
    let y = batch(1.0)?;
    let mut prng = seeded(child_seed(grid.seed, 1));
    let psi = ModelKind::ALL.map(|kind| AmortizedParams::init(kind, grid.m, grid.d, &mut prng));
    Ok(Fixture { x, y, psi })
}

fn one_iteration(method: BenchMethod, fx: &Fixture, grid: &BenchGrid, rng: &mut crate::rng::SeededRng) -> Result<f64> {
    let (x, y) = (fx.x.points(), fx.y.points());
    let value = match method {
        BenchMethod::Sw { l } => {
            let thetas = (0..l).map(|_| sample_sphere(grid.d, rng)).collect::<Result<Vec<_>>>()?;
            loss_grad_y(x, y, SliceSource::Projections(&thetas), grid.p)?.0
        }
        BenchMethod::MaxSw { t2 } => {
            let cfg = SliceOptConfig {
                max_iters: t2,
                learning_rate: grid.eta2,
                seed: rng.random(),
                tolerance: None,
                ..Default::default()
            };
            let out = max_sw_run(&fx.x, &fx.y, &cfg, grid.p, None)?;
            loss_grad_y(x, y, SliceSource::Fixed(&out.solution), grid.p)?.0
        }
        BenchMethod::Amortized(kind) => {
            let psi = &fx.psi[ModelKind::ALL.iter().position(|k| *k == kind).expect("listed")];
            let (v, g) = psi_loss_grad(psi, x, y, grid.p)?;
            let (_, dy) = loss_grad_y(x, y, SliceSource::Amortized { psi, detach_slice: false }, grid.p)?;
            std::hint::black_box((&g, &dy));
            v
        }
    };
    Ok(value)
}

/// Times every method in the grid sequentially on the calling thread.
pub fn bench_sweep(grid: &BenchGrid) -> Result<Vec<BenchRecord>> {
    grid.validate()?;
    let fx = fixture(grid)?;
    let _pin = CpuPin::new();
    let mut out = Vec::with_capacity(grid.methods.len());
    for (mi, &method) in grid.methods.iter().enumerate() {
        let mut rng = seeded(child_seed(grid.seed, 100 + mi as u64));
        for _ in 0..grid.warmup {
            for _ in 0..grid.iters_per_rep {
                std::hint::black_box(one_iteration(method, &fx, grid, &mut rng)?);
            }
        }
        alloc::reset_peak();
        let mut times = Vec::with_capacity(grid.reps);
        for _ in 0..grid.reps {
            let start = Instant::now();
            for _ in 0..grid.iters_per_rep {
                std::hint::black_box(one_iteration(method, &fx, grid, &mut rng)?);
            }
            times.push(start.elapsed().as_secs_f64() / grid.iters_per_rep as f64);
        }
        let med = median(&mut times);
        out.push(BenchRecord {
            method: method.name().to_string(),
            param: method.param(),
            m: grid.m,
            d: grid.d,
            iters_per_sec: 1.0 / med,
            peak_bytes: alloc::peak_bytes(),
            seed: grid.seed,
            median_secs: med,
            reps: grid.reps,
        });
    }
    Ok(out)
}
