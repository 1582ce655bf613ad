//! Lower-bound check of trained amortized slices against the grid-search
//! mini-batch max-sliced oracle.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::amortized::ModelKind;
use crate::error::Result;
use crate::eval::{m_max_sw_on_pairs, sample_pairs};
use crate::measures::{EmpiricalMeasure, Order};
use crate::rng::{child_seed, seeded};
use crate::trainer::{amortized_objective_on_pairs, fit_amortized_slice};

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Config {
    pub instances: usize,
    /// Support size of each random instance measure.
    pub n_points: usize,
    /// Largest mini-batch size; each instance draws `m` in `2..=max_m`.
    pub max_m: usize,
    pub n_pairs: usize,
    pub n_angles: usize,
    pub fit_iters: usize,
    pub eta2: f64,
    /// Allowed excess in oracle standard errors.
    pub n_std_err: f64,
    pub seed: u64,
}

impl Default for Prop2Config {
    fn default() -> Self {
        Self {
            instances: 20,
            n_points: 32,
            max_m: 8,
            n_pairs: 200,
            n_angles: 10_000,
            fit_iters: 200,
            eta2: 0.01,
            n_std_err: 2.0,
            seed: 0,
        }
    }
}

/// One (instance, model kind) comparison.
#[derive(Debug, Clone, Serialize)]
pub struct Prop2Record {
    pub instance: usize,
    pub instance_seed: u64,
    pub kind: String,
    pub m: usize,
    pub a_sw: f64,
    pub a_sw_se: f64,
    pub m_max_sw: f64,
    pub m_max_sw_se: f64,
    pub slack: f64,
    pub pass: bool,
}

fn random_cloud<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<EmpiricalMeasure> {
    let center = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let scale = [rng.random_range(0.3..1.5), rng.random_range(0.3..1.5)];
    let rows = (0..n)
        .map(|_| {
            (0..2)
                .map(|j| center[j] + scale[j] * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect::<Vec<Vec<f64>>>();
    EmpiricalMeasure::from_rows(&rows)
}

fn run_instance(cfg: &Prop2Config, instance: usize) -> Result<Vec<Prop2Record>> {
    let instance_seed = child_seed(cfg.seed, instance as u64);
    let mut rng = seeded(instance_seed);
    let m = rng.random_range(2..=cfg.max_m.max(2));
    let mu = random_cloud(cfg.n_points, &mut rng)?;
    let nu = random_cloud(cfg.n_points, &mut rng)?;
    let pairs = sample_pairs(&mu, &nu, m, cfg.n_pairs, &mut rng)?;
    let oracle = m_max_sw_on_pairs(&pairs, Order::Two, cfg.n_angles)?;
    let slack = cfg.n_std_err * oracle.std_err;
    ModelKind::ALL
        .iter()
        .enumerate()
        .map(|(ki, &kind)| {
            let fit_seed = child_seed(instance_seed, 1 + ki as u64);
            let psi = fit_amortized_slice(&mu, &nu, kind, m, cfg.fit_iters, cfg.eta2, Order::Two, fit_seed)?;
            let a = amortized_objective_on_pairs(&psi, &pairs, Order::Two)?;
            Ok(Prop2Record {
                instance,
                instance_seed,
                kind: kind.to_string(),
                m,
                a_sw: a.mean,
                a_sw_se: a.std_err,
                m_max_sw: oracle.mean,
                m_max_sw_se: oracle.std_err,
                slack,
                pass: a.mean <= oracle.mean + slack,
            })
        })
        .collect()
}

/// Fits every amortized kind on `cfg.instances` random 2-D instances and
/// compares its mean objective with the oracle on the same mini-batch pairs.
/// Records are ordered by instance, then kind.
pub fn prop2_suite(cfg: &Prop2Config) -> Result<Vec<Prop2Record>> {
    let per_instance = (0..cfg.instances)
        .into_par_iter()
        .map(|i| run_instance(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_instance.into_iter().flatten().collect())
}
