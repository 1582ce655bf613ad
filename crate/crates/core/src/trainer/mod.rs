//! Minimax training of a push-forward generator against a data measure.
//!
//! Every loss kind shares one loop: sample `k_batches` mini-batch pairs, get a
//! slice (random projections, an inner ascent, or an amortized model), average
//! the generator gradients, take one Adam step on φ and, for the amortized
//! kinds, one Adam ascent step on ψ computed at the same point.

pub mod adam;
pub mod generator;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use serde::Serialize;

pub use adam::{adam_step, AdamState, ADAM_EPS};
pub use generator::{generator_forward, Dense, GeneratorParams, LEAKY_SLOPE};

use crate::amortized::{AmortizedParams, ModelKind, ProjectedAmortizedParams};
use crate::error::{Error, Result};
use crate::eval::{exact_wasserstein, McEstimate};
use crate::grad::{loss_grad_y, psi_loss_grad, psi_projected_loss_grad, SliceSource};
use crate::measures::{sample_minibatch, sample_sphere, Direction, EmpiricalMeasure, Order};
use crate::params::ParamBlocks;
use crate::rng::{child_seed, seeded, SeededRng};
use crate::slicers::{max_sw_run, prw_run, ProjectionFrame, SliceInit, SliceOptConfig};

/// Losses above this, or non-finite losses, abort a run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Seed-stream indices derived from the run seed.
const STREAM_PHI: u64 = 1;
const STREAM_PSI: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_EVAL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Sw,
    MaxSw,
    LaSw,
    GaSw,
    NaSw,
    Prw,
    APrw,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Sw,
        LossKind::MaxSw,
        LossKind::LaSw,
        LossKind::GaSw,
        LossKind::NaSw,
        LossKind::Prw,
        LossKind::APrw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sw => "sw",
            LossKind::MaxSw => "max_sw",
            LossKind::LaSw => "la_sw",
            LossKind::GaSw => "ga_sw",
            LossKind::NaSw => "na_sw",
            LossKind::Prw => "prw",
            LossKind::APrw => "a_prw",
        }
    }

    /// Model family of the direction-valued amortized kinds.
    pub fn amortized_kind(self) -> Option<ModelKind> {
        match self {
            LossKind::LaSw => Some(ModelKind::Linear),
            LossKind::GaSw => Some(ModelKind::GeneralizedLinear),
            LossKind::NaSw => Some(ModelKind::NonLinear),
            _ => None,
        }
    }

    fn needs_t2(self) -> bool {
        matches!(self, LossKind::MaxSw | LossKind::Prw)
    }

    fn needs_l(self) -> bool {
        self == LossKind::Sw
    }

    fn needs_k_sub(self) -> bool {
        matches!(self, LossKind::Prw | LossKind::APrw)
    }

    fn needs_eta2(self) -> bool {
        self != LossKind::Sw
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    /// Mini-batch size.
    pub m: usize,
    pub k_batches: usize,
    /// Outer (generator) iterations.
    pub t1: usize,
    /// Inner slice iterations, `max_sw` and `prw` only.
    pub t2: Option<usize>,
    /// Projections, `sw` only.
    pub l: Option<usize>,
    pub eta1: f64,
    /// Slice or amortized-model learning rate; every kind except `sw`.
    pub eta2: Option<f64>,
    pub p: Order,
    /// Frame width, `prw` and `a_prw` only.
    pub k_sub: Option<usize>,
    pub seed: u64,
    pub betas: (f64, f64),
    /// Ignore the dependence of an amortized slice on the generated batch in ∇φ.
    pub detach_slice: bool,
    /// Start each inner ascent from the previous optimum for the same batch slot.
    pub warm_start: bool,
    /// Model family of the frame-valued amortized model (`a_prw`).
    pub frame_model: ModelKind,
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    /// Log the exact `W_2` to the held-out set every this many iterations (0: never).
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl TrainConfig {
    /// Defaults, with the loss-specific fields filled exactly for `kind`.
    pub fn new(kind: LossKind) -> Self {
        Self {
            loss_kind: kind,
            m: 128,
            k_batches: 1,
            t1: 1000,
            t2: kind.needs_t2().then_some(10),
            l: kind.needs_l().then_some(100),
            eta1: 1e-3,
            eta2: kind.needs_eta2().then_some(0.01),
            p: Order::Two,
            k_sub: kind.needs_k_sub().then_some(1),
            seed: 0,
            betas: (0.0, 0.9),
            detach_slice: false,
            warm_start: false,
            frame_model: ModelKind::Linear,
            noise_dim: 16,
            hidden: vec![128, 128, 128],
            eval_every: 0,
            eval_samples: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.loss_kind;
        let bad = |msg: String| Err(Error::Config(msg));
        let field = |name: &str, present: bool, needed: bool| -> Result<()> {
            match (present, needed) {
                (false, true) => bad(format!("`{name}` is required for loss kind {kind}")),
                (true, false) => bad(format!("`{name}` does not apply to loss kind {kind}")),
                _ => Ok(()),
            }
        };
        field("T2", self.t2.is_some(), kind.needs_t2())?;
        field("L", self.l.is_some(), kind.needs_l())?;
        field("k_sub", self.k_sub.is_some(), kind.needs_k_sub())?;
        field("eta2", self.eta2.is_some(), kind.needs_eta2())?;
        if self.m == 0 || self.k_batches == 0 || self.noise_dim == 0 || self.eval_samples == 0 {
            return bad("m, k_batches, noise_dim and eval_samples must be positive".into());
        }
        if self.t2 == Some(0) || self.l == Some(0) || self.k_sub == Some(0) {
            return bad("T2, L and k_sub must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.eta1 >= 0.0 && self.eta1.is_finite()) {
            return bad(format!("eta1 must be a finite non-negative number, got {}", self.eta1));
        }
        if let Some(e) = self.eta2 {
            let ok = if matches!(kind, LossKind::MaxSw | LossKind::Prw) { e > 0.0 } else { e >= 0.0 };
            if !(ok && e.is_finite()) {
                return bad(format!("eta2 out of range for {kind}: {e}"));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("Adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "loss_kind": self.loss_kind.name(),
            "m": self.m,
            "k_batches": self.k_batches,
            "T1": self.t1,
            "T2": self.t2,
            "L": self.l,
            "eta1": self.eta1,
            "eta2": self.eta2,
            "p": self.p.exponent() as u32,
            "k_sub": self.k_sub,
            "seed": self.seed,
            "beta1": self.betas.0,
            "beta2": self.betas.1,
            "detach_slice": self.detach_slice,
            "warm_start": self.warm_start,
            "frame_model": self.frame_model.to_string(),
            "noise_dim": self.noise_dim,
            "hidden": self.hidden,
            "eval_every": self.eval_every,
            "eval_samples": self.eval_samples,
        })
    }
}

/// One logged outer iteration. Values are taken before that iteration's update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_w2: Option<f64>,
    pub phi_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi_norm: Option<f64>,
    /// Wall-clock time of the iteration; kept out of the serialized record so
    /// logs are reproducible.
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Update counts, for checking the loop structure.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub outer_iterations: usize,
    pub phi_updates: usize,
    pub psi_updates: usize,
    /// Inner slice-ascent updates, summed over pairs.
    pub slice_updates: usize,
    pub pairs: usize,
    /// Amortized parameters re-drawn after a degenerate direction.
    pub rerandomizations: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub phi: GeneratorParams,
    pub psi: Option<AmortizedParams>,
    pub psi_frame: Option<ProjectedAmortizedParams>,
    pub log: Vec<RunRecord>,
    pub counters: Counters,
    pub failed: bool,
    pub failure: Option<String>,
    pub initial_exact_w2: Option<f64>,
    pub final_exact_w2: Option<f64>,
}

/// A training run in progress.
pub struct Session<'a> {
    cfg: TrainConfig,
    data: &'a EmpiricalMeasure,
    holdout: Option<&'a EmpiricalMeasure>,
    pub phi: GeneratorParams,
    pub psi: Option<AmortizedParams>,
    pub psi_frame: Option<ProjectedAmortizedParams>,
    fixed: Option<Direction>,
    adam_phi: AdamState,
    adam_psi: AdamState,
    rng: SeededRng,
    eval_noise: Array2<f64>,
    iteration: usize,
    counters: Counters,
    warm_theta: Vec<Option<Direction>>,
    warm_frame: Vec<Option<ProjectionFrame>>,
}

struct PairGrad {
    value: f64,
    phi: Vec<f64>,
    psi: Option<Vec<f64>>,
}

impl<'a> Session<'a> {
    pub fn new(data: &'a EmpiricalMeasure, holdout: Option<&'a EmpiricalMeasure>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = data.d();
        if let Some(h) = holdout {
            if h.d() != d {
                return Err(Error::DimensionMismatch { expected: d, got: h.d() });
            }
        }
        if let Some(k) = cfg.k_sub {
            if k > d {
                return Err(Error::Config(format!("k_sub = {k} exceeds the data dimension {d}")));
            }
        }
        let phi = GeneratorParams::init(cfg.noise_dim, &cfg.hidden, d, &mut seeded(child_seed(cfg.seed, STREAM_PHI)));
        let mut psi_rng = seeded(child_seed(cfg.seed, STREAM_PSI));
        let psi = cfg.loss_kind.amortized_kind().map(|kind| AmortizedParams::init(kind, cfg.m, d, &mut psi_rng));
        let psi_frame = (cfg.loss_kind == LossKind::APrw).then(|| {
            ProjectedAmortizedParams::init(cfg.frame_model, cfg.m, d, cfg.k_sub.expect("validated"), &mut psi_rng)
        });
        let psi_len = psi.as_ref().map(|p| p.param_len()).or(psi_frame.as_ref().map(|p| p.param_len())).unwrap_or(0);
        let eval_n = holdout.map_or(0, |h| h.m().min(cfg.eval_samples));
        let eval_noise = phi.sample_noise(eval_n, &mut seeded(child_seed(cfg.seed, STREAM_EVAL)));
        Ok(Self {
            adam_phi: AdamState::new(phi.param_len()),
            adam_psi: AdamState::new(psi_len),
            rng: seeded(child_seed(cfg.seed, STREAM_TRAIN)),
            warm_theta: vec![None; cfg.k_batches],
            warm_frame: vec![None; cfg.k_batches],
            cfg,
            data,
            holdout,
            phi,
            psi,
            psi_frame,
            fixed: None,
            eval_noise,
            iteration: 0,
            counters: Counters::default(),
        })
    }

    /// Replaces the slice with a constant direction, whatever the loss kind.
    pub fn set_fixed_direction(&mut self, theta: Direction) {
        self.fixed = Some(theta);
    }

    /// Resets φ and its optimizer state.
    pub fn set_generator(&mut self, phi: GeneratorParams) -> Result<()> {
        if phi.noise_dim() != self.cfg.noise_dim || phi.out_dim() != self.data.d() {
            return Err(Error::DimensionMismatch { expected: self.data.d(), got: phi.out_dim() });
        }
        self.adam_phi = AdamState::new(phi.param_len());
        let n = self.eval_noise.nrows();
        self.eval_noise = phi.sample_noise(n, &mut seeded(child_seed(self.cfg.seed, STREAM_EVAL)));
        self.phi = phi;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Exact `W_2` between `eval_samples` generated points (fixed noise) and the
    /// first `eval_samples` held-out points. `None` without a held-out set.
    pub fn exact_w2(&self) -> Result<Option<f64>> {
        let Some(holdout) = self.holdout else { return Ok(None) };
        let n = self.eval_noise.nrows();
        let y = generator_forward(&self.phi, self.eval_noise.view())?;
        let h = EmpiricalMeasure::new(holdout.points().slice(s![..n, ..]).to_owned())?;
        exact_wasserstein(&y, &h, Order::Two).map(Some)
    }

    fn psi_norm(&self) -> Option<f64> {
        self.psi.as_ref().map(|p| p.l2_norm()).or(self.psi_frame.as_ref().map(|p| p.l2_norm()))
    }

    /// One outer iteration. Divergence surfaces as [`Error::Numerical`].
    pub fn step(&mut self) -> Result<RunRecord> {
        let start = Instant::now();
        let cfg = self.cfg.clone();
        let mut batches = Vec::with_capacity(cfg.k_batches);
        for _ in 0..cfg.k_batches {
            let x = sample_minibatch(self.data, cfg.m, &mut self.rng)?;
            let noise = self.phi.sample_noise(cfg.m, &mut self.rng);
            batches.push((x, noise));
        }
        let thetas = match cfg.l {
            Some(l) if self.fixed.is_none() => (0..l)
                .map(|_| sample_sphere(self.data.d(), &mut self.rng))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let exact_w2 = if cfg.eval_every > 0 && self.iteration % cfg.eval_every == 0 {
            self.exact_w2()?
        } else {
            None
        };
        let phi_norm = self.phi.l2_norm();
        let psi_norm = self.psi_norm();

        let scale = 1.0 / cfg.k_batches as f64;
        let mut loss = 0.0;
        let mut g_phi = vec![0.0; self.phi.param_len()];
        let mut g_psi: Option<Vec<f64>> = None;
        for (slot, (x, noise)) in batches.iter().enumerate() {
            let pair = self.pair_grad(slot, x.points(), noise.view(), &thetas)?;
            loss += scale * pair.value;
            for (a, b) in g_phi.iter_mut().zip(&pair.phi) {
                *a += scale * b;
            }
            if let Some(gp) = pair.psi {
                let acc = g_psi.get_or_insert_with(|| vec![0.0; gp.len()]);
                for (a, b) in acc.iter_mut().zip(&gp) {
                    *a += scale * b;
                }
            }
            self.counters.pairs += 1;
        }
        if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
            return Err(Error::Numerical(format!(
                "divergence guard at iteration {}: loss {loss}",
                self.iteration
            )));
        }

        let mut flat = self.phi.flatten();
        adam_step(&mut flat, &g_phi, &mut self.adam_phi, cfg.eta1, cfg.betas);
        self.phi.load_flat(&flat);
        self.counters.phi_updates += 1;
        if let Some(mut g) = g_psi {
            g.iter_mut().for_each(|v| *v = -*v);
            let eta2 = cfg.eta2.expect("validated");
            if let Some(psi) = self.psi.as_mut() {
                let mut flat = psi.flatten();
                adam_step(&mut flat, &g, &mut self.adam_psi, eta2, cfg.betas);
                psi.load_flat(&flat);
            } else if let Some(psi) = self.psi_frame.as_mut() {
                let mut flat = psi.flatten();
                adam_step(&mut flat, &g, &mut self.adam_psi, eta2, cfg.betas);
                psi.load_flat(&flat);
            }
            self.counters.psi_updates += 1;
        }

        let record = RunRecord {
            iteration: self.iteration,
            loss,
            exact_w2,
            phi_norm,
            psi_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.iteration += 1;
        self.counters.outer_iterations += 1;
        Ok(record)
    }

    fn pair_grad(
        &mut self,
        slot: usize,
        x: ArrayView2<'_, f64>,
        noise: ArrayView2<'_, f64>,
        thetas: &[Direction],
    ) -> Result<PairGrad> {
        let cfg = &self.cfg;
        let p = cfg.p;
        let (y, cache) = self.phi.forward_cached(noise)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("generator produced non-finite output".into()));
        }
        let finish = |phi: &GeneratorParams, value: f64, dy: Array2<f64>, psi: Option<Vec<f64>>| PairGrad {
            value,
            phi: phi.backward(&cache, dy.view()).flatten(),
            psi,
        };
        if let Some(theta) = &self.fixed {
            let (value, dy) = loss_grad_y(x, y.view(), SliceSource::Fixed(theta), p)?;
            return Ok(finish(&self.phi, value, dy, None));
        }
        match cfg.loss_kind {
            LossKind::Sw => {
                let (value, dy) = loss_grad_y(x, y.view(), SliceSource::Projections(thetas), p)?;
                Ok(finish(&self.phi, value, dy, None))
            }
            LossKind::MaxSw => {
                let xm = EmpiricalMeasure::new(x.to_owned())?;
                let ym = EmpiricalMeasure::new(y.clone())?;
                let init = match (&self.warm_theta[slot], cfg.warm_start) {
                    (Some(t), true) => SliceInit::Direction(t.clone()),
                    _ => SliceInit::Random,
                };
                let slice_cfg = SliceOptConfig {
                    max_iters: cfg.t2.expect("validated"),
                    learning_rate: cfg.eta2.expect("validated"),
                    init,
                    seed: rand::RngCore::next_u64(&mut self.rng),
                    last_iterate: false,
                    tolerance: None,
                };
                let out = max_sw_run(&xm, &ym, &slice_cfg, p, None)?;
                self.counters.slice_updates += out.iterations;
                let (value, dy) = loss_grad_y(x, y.view(), SliceSource::Fixed(&out.solution), p)?;
                self.warm_theta[slot] = Some(out.solution);
                Ok(finish(&self.phi, value, dy, None))
            }
            LossKind::Prw => {
                let xm = EmpiricalMeasure::new(x.to_owned())?;
                let ym = EmpiricalMeasure::new(y.clone())?;
                let init = match (&self.warm_frame[slot], cfg.warm_start) {
                    (Some(f), true) => SliceInit::Frame(f.clone()),
                    _ => SliceInit::Random,
                };
                let slice_cfg = SliceOptConfig {
                    max_iters: cfg.t2.expect("validated"),
                    learning_rate: cfg.eta2.expect("validated"),
                    init,
                    seed: rand::RngCore::next_u64(&mut self.rng),
                    last_iterate: false,
                    tolerance: None,
                };
                let out = prw_run(&xm, &ym, cfg.k_sub.expect("validated"), &slice_cfg, p, None)?;
                self.counters.slice_updates += out.iterations;
                let (value, dy) = loss_grad_y(x, y.view(), SliceSource::Frame(&out.solution), p)?;
                self.warm_frame[slot] = Some(out.solution);
                Ok(finish(&self.phi, value, dy, None))
            }
            LossKind::LaSw | LossKind::GaSw | LossKind::NaSw => {
                let detach_slice = cfg.detach_slice;
                for _attempt in 0..10 {
                    let psi = self.psi.as_ref().expect("amortized kind has psi");
                    match psi_loss_grad(psi, x, y.view(), p) {
                        Ok((_, g_psi)) => {
                            let source = SliceSource::Amortized { psi, detach_slice };
                            let (value, dy) = loss_grad_y(x, y.view(), source, p)?;
                            return Ok(finish(&self.phi, value, dy, Some(g_psi.flatten())));
                        }
                        Err(Error::DegenerateDirection { norm }) => {
                            log::warn!("degenerate amortized direction (norm {norm:e}); re-drawing w0");
                            let psi = self.psi.as_mut().expect("amortized kind has psi");
                            psi.rerandomize_w0(&mut self.rng);
                            self.counters.rerandomizations += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::Numerical("amortized direction stayed degenerate".into()))
            }
            LossKind::APrw => {
                let detach_slice = cfg.detach_slice;
                for _attempt in 0..10 {
                    let psi = self.psi_frame.as_ref().expect("a_prw has psi");
                    match psi_projected_loss_grad(psi, x, y.view(), p) {
                        Ok((_, g_psi)) => {
                            let source = SliceSource::AmortizedFrame { psi, detach_slice };
                            let (value, dy) = loss_grad_y(x, y.view(), source, p)?;
                            return Ok(finish(&self.phi, value, dy, Some(g_psi.flatten())));
                        }
                        Err(Error::DegenerateFrame { column, .. }) => {
                            log::warn!("degenerate amortized frame (column {column}); re-drawing W0");
                            let psi = self.psi_frame.as_mut().expect("a_prw has psi");
                            psi.rerandomize_w0(&mut self.rng);
                            self.counters.rerandomizations += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::Numerical("amortized frame stayed degenerate".into()))
            }
        }
    }

    /// Runs the remaining iterations up to `T1`. Divergence ends the run early
    /// with `failed = true`; other errors propagate.
    pub fn run(self) -> Result<TrainOutcome> {
        self.run_with(|_, _| Ok(()))
    }

    /// [`Session::run`] calling `on_record` with the updated session after every iteration.
    pub fn run_with(
        mut self,
        mut on_record: impl FnMut(&Session<'a>, &RunRecord) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let initial_exact_w2 = self.exact_w2()?;
        let mut log = Vec::with_capacity(self.cfg.t1);
        let mut failure = None;
        while self.iteration < self.cfg.t1 {
            match self.step() {
                Ok(record) => {
                    on_record(&self, &record)?;
                    log.push(record);
                }
                Err(Error::Numerical(msg)) => {
                    log::warn!("{msg}");
                    failure = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let final_exact_w2 = if failure.is_some() {
            None
        } else {
            match self.exact_w2() {
                Ok(v) => v,
                Err(Error::Numerical(msg)) => {
                    failure = Some(msg);
                    None
                }
                Err(e) => return Err(e),
            }
        };
        Ok(TrainOutcome {
            phi: self.phi,
            psi: self.psi,
            psi_frame: self.psi_frame,
            log,
            counters: self.counters,
            failed: failure.is_some(),
            failure,
            initial_exact_w2,
            final_exact_w2,
        })
    }
}

fn expect_kind(cfg: &TrainConfig, allowed: &[LossKind]) -> Result<()> {
    if !allowed.contains(&cfg.loss_kind) {
        return Err(Error::Config(format!(
            "loss kind {} is not handled by this trainer",
            cfg.loss_kind
        )));
    }
    Ok(())
}

/// Mini-batch sliced Wasserstein training with `L` fresh directions per step.
pub fn train_sw(data: &EmpiricalMeasure, holdout: Option<&EmpiricalMeasure>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_kind(cfg, &[LossKind::Sw])?;
    Session::new(data, holdout, cfg.clone())?.run()
}

/// Mini-batch max-sliced training with a `T2`-step inner ascent per pair.
pub fn train_max_sw(data: &EmpiricalMeasure, holdout: Option<&EmpiricalMeasure>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_kind(cfg, &[LossKind::MaxSw])?;
    Session::new(data, holdout, cfg.clone())?.run()
}

/// Amortized training: one ψ ascent and one φ descent step per iteration.
pub fn train_amortized(data: &EmpiricalMeasure, holdout: Option<&EmpiricalMeasure>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_kind(cfg, &[LossKind::LaSw, LossKind::GaSw, LossKind::NaSw, LossKind::APrw])?;
    Session::new(data, holdout, cfg.clone())?.run()
}

/// Mini-batch projection-robust training with a `T2`-step inner ascent per pair.
pub fn train_prw(data: &EmpiricalMeasure, holdout: Option<&EmpiricalMeasure>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_kind(cfg, &[LossKind::Prw])?;
    Session::new(data, holdout, cfg.clone())?.run()
}

/// Dispatches on `cfg.loss_kind`.
pub fn train(data: &EmpiricalMeasure, holdout: Option<&EmpiricalMeasure>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Session::new(data, holdout, cfg.clone())?.run()
}

/// Trains only an amortized model ψ to maximize the mini-batch objective
/// between two fixed measures (no generator). Adam ascent, `iters` steps,
/// one fresh pair per step.
#[allow(clippy::too_many_arguments)]
pub fn fit_amortized_slice(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    kind: ModelKind,
    m: usize,
    iters: usize,
    eta2: f64,
    p: Order,
    seed: u64,
) -> Result<AmortizedParams> {
    let mut psi = AmortizedParams::init(kind, m, mu.d(), &mut seeded(child_seed(seed, STREAM_PSI)));
    let mut rng = seeded(child_seed(seed, STREAM_TRAIN));
    let mut state = AdamState::new(psi.param_len());
    for _ in 0..iters {
        let x = sample_minibatch(mu, m, &mut rng)?;
        let y = sample_minibatch(nu, m, &mut rng)?;
        let g = match psi_loss_grad(&psi, x.points(), y.points(), p) {
            Ok((_, g)) => g,
            Err(Error::DegenerateDirection { .. }) => {
                psi.rerandomize_w0(&mut rng);
                continue;
            }
            Err(e) => return Err(e),
        };
        let neg: Vec<f64> = g.flatten().into_iter().map(|v| -v).collect();
        let mut flat = psi.flatten();
        adam_step(&mut flat, &neg, &mut state, eta2, (0.0, 0.9));
        psi.load_flat(&flat);
    }
    Ok(psi)
}

/// Mean amortized objective `W_p(f_ψ(X,Y)♯P_X, f_ψ(X,Y)♯P_Y)` over the given pairs.
pub fn amortized_objective_on_pairs(
    psi: &AmortizedParams,
    pairs: &[(EmpiricalMeasure, EmpiricalMeasure)],
    p: Order,
) -> Result<McEstimate> {
    let samples = pairs
        .iter()
        .map(|(x, y)| psi_loss_grad(psi, x.points(), y.points(), p).map(|(v, _)| v))
        .collect::<Result<Vec<_>>>()?;
    Ok(McEstimate::from_samples(samples))
}
