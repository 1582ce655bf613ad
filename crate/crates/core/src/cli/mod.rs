//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a check failed, 2 configuration or input error,
//! 3 numerical failure. Every command is deterministic under `--seed`
//! except bench timings. Output files are written to a temporary name and
//! renamed into place.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::amortized::{AmortizedParams, ModelKind, ProjectedAmortizedParams};
use crate::datasets::{generate, load_idx, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::bench::{write_csv, BenchGrid, BenchMethod, BenchRecord};
use crate::eval::{bench_sweep, exact_wasserstein, prop2_suite, Prop2Config};
use crate::grad::{gradient_suite, FdConfig};
use crate::measures::{EmpiricalMeasure, Order};
use crate::rng::{child_seed, seeded};
use crate::slicers::{max_sw_run, prw_run, sw_estimate_par, SliceOptConfig};
use crate::trainer::{GeneratorParams, LossKind, Session, TrainConfig};

pub use config::Settings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const SYNTHETIC_NAMES: [&str; 4] = ["gaussian_ring", "two_moons", "swiss_roll_2d", "checkerboard"];

#[derive(Debug, Parser)]
#[command(name = "asw", version, about = "Sliced transport distances, amortized slicing and training runs")]
pub struct Cli {
    /// Text config file with one `key = value` per line.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Distance method (distance) or loss kind (train).
    #[arg(long, global = true, value_name = "NAME")]
    pub method: Option<String>,
    /// Only log errors and skip the stdout summary of long commands.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distance between two measures, printed as one JSON object.
    Distance {
        /// CSV/binary file, IDX3 image file or synthetic spec such as `gaussian_ring:n=256,seed=1`.
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
    },
    /// Train a generator and write logs, checkpoints and a summary.
    Train,
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
    /// Per-iteration timing sweep written as CSV.
    Bench,
    /// Oracle comparison suites.
    Oracle {
        #[arg(default_value = "prop2")]
        suite: String,
    },
}

/// Runs the parsed command and maps errors to exit codes.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Distance { x, y } => cmd_distance(cli, x, y),
        Command::Train => cmd_train(cli),
        Command::Gradcheck => cmd_gradcheck(cli),
        Command::Bench => cmd_bench(cli),
        Command::Oracle { suite } => cmd_oracle(cli, suite),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) | Error::DegenerateDirection { .. } | Error::DegenerateFrame { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: `{}`", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Config(format!("cannot read `{}`: {io}", path.display())),
        Error::Parse { offset, msg } => Error::Config(format!("`{}`: parse error at byte {offset}: {msg}", path.display())),
        other => other,
    }
}

fn is_idx(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    name.ends_with(".idx") || name.ends_with(".idx3") || name.contains("idx3-ubyte")
}

fn synthetic_spec(src: &str) -> Option<Result<SyntheticSpec>> {
    let name = src.split(':').next().unwrap_or("").trim();
    SYNTHETIC_NAMES.contains(&name).then(|| src.parse())
}

/// Loads a measure from a file or generates it from a synthetic spec.
pub fn load_source(src: &str) -> Result<EmpiricalMeasure> {
    let path = Path::new(src);
    if path.is_file() {
        let loaded = if is_idx(path) { load_idx(path) } else { EmpiricalMeasure::load(path) };
        return loaded.map_err(|e| with_path(path, e));
    }
    match synthetic_spec(src) {
        Some(spec) => generate(&spec?),
        None => Err(Error::Config(format!(
            "cannot read `{src}`: no such file and not a synthetic dataset spec"
        ))),
    }
}

fn parse_order(p: u32) -> Result<Order> {
    match p {
        1 => Ok(Order::One),
        2 => Ok(Order::Two),
        other => Err(Error::Config(format!("p must be 1 or 2, got {other}"))),
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("cannot create `{}`: {e}", dir.display())))?;
    Ok(dir)
}

fn seed(cli: &Cli, s: &mut Settings) -> Result<u64> {
    let from_file = s.take::<u64>("seed")?;
    Ok(cli.seed.or(from_file).unwrap_or(0))
}

fn to_json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable record")
}

fn cmd_distance(cli: &Cli, x: &str, y: &str) -> Result<i32> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let from_file = s.take::<String>("method")?;
    let method = cli.method.clone().or(from_file).unwrap_or_else(|| "exact".into());
    let seed = seed(cli, &mut s)?;
    let p = parse_order(s.take_or("p", 2u32)?)?;
    let l = s.take_or("L", 100usize)?;
    let t = s.take_or("T", 100usize)?;
    let eta = s.take_or("eta", 0.01f64)?;
    let k_sub = s.take_or("k_sub", 1usize)?;
    s.finish()?;
    if !["sw", "max_sw", "prw", "exact"].contains(&method.as_str()) {
        return Err(Error::Config(format!("unknown method `{method}` (expected sw, max_sw, prw or exact)")));
    }

    let mu = load_source(x)?;
    let nu = load_source(y)?;
    let slice_cfg = SliceOptConfig { max_iters: t, learning_rate: eta, seed, ..SliceOptConfig::default() };
    let mut out = json!({
        "method": method,
        "p": p.exponent() as u32,
        "m": mu.m(),
        "d": mu.d(),
        "seed": seed,
    });
    let value = match method.as_str() {
        "sw" => {
            out["L"] = json!(l);
            sw_estimate_par(&mu, &nu, l, p, &mut seeded(seed))?
        }
        "max_sw" => {
            let o = max_sw_run(&mu, &nu, &slice_cfg, p, None)?;
            out["T"] = json!(t);
            out["eta"] = json!(eta);
            out["iterations"] = json!(o.iterations);
            out["direction"] = json!(o.solution.as_slice());
            o.value
        }
        "prw" => {
            let o = prw_run(&mu, &nu, k_sub, &slice_cfg, p, None)?;
            out["T"] = json!(t);
            out["eta"] = json!(eta);
            out["k_sub"] = json!(k_sub);
            out["iterations"] = json!(o.iterations);
            o.value
        }
        _ => exact_wasserstein(&mu, &nu, p)?,
    };
    if !value.is_finite() {
        return Err(Error::Numerical(format!("{method} produced {value}")));
    }
    out["value"] = json!(value);
    let line = to_json_line(&out);
    println!("{line}");
    if cli.out.is_some() {
        write_atomic(&out_dir(cli)?.join("distance.json"), format!("{line}\n").as_bytes())?;
    }
    Ok(EXIT_OK)
}

/// Training configuration plus the data sources and checkpoint cadence.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub data: String,
    pub holdout: Option<String>,
    pub checkpoint_every: usize,
}

/// Builds a [`TrainSetup`] from settings; `method` and `seed` override the file.
pub fn train_setup(mut s: Settings, method: Option<&str>, seed: Option<u64>) -> Result<TrainSetup> {
    let from_file = s.take::<String>("loss_kind")?;
    let kind_name = method
        .map(str::to_string)
        .or(from_file)
        .ok_or_else(|| Error::Config("`loss_kind` is required (config key or --method)".into()))?;
    let kind: LossKind = kind_name.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let mut cfg = TrainConfig::new(kind);
    let file_seed = s.take::<u64>("seed")?;
    cfg.seed = seed.or(file_seed).unwrap_or(0);
    if let Some(v) = s.take("m")? {
        cfg.m = v;
    }
    if let Some(v) = s.take("k_batches")? {
        cfg.k_batches = v;
    }
    if let Some(v) = s.take("T1")? {
        cfg.t1 = v;
    }
    if let Some(v) = s.take("T2")? {
        cfg.t2 = Some(v);
    }
    if let Some(v) = s.take("L")? {
        cfg.l = Some(v);
    }
    if let Some(v) = s.take("eta1")? {
        cfg.eta1 = v;
    }
    if let Some(v) = s.take("eta2")? {
        cfg.eta2 = Some(v);
    }
    if let Some(v) = s.take::<u32>("p")? {
        cfg.p = parse_order(v)?;
    }
    if let Some(v) = s.take("k_sub")? {
        cfg.k_sub = Some(v);
    }
    if let Some(v) = s.take("beta1")? {
        cfg.betas.0 = v;
    }
    if let Some(v) = s.take("beta2")? {
        cfg.betas.1 = v;
    }
    if let Some(v) = s.take("detach_slice")? {
        cfg.detach_slice = v;
    }
    if let Some(v) = s.take("warm_start")? {
        cfg.warm_start = v;
    }
    if let Some(v) = s.take::<ModelKind>("frame_model")? {
        cfg.frame_model = v;
    }
    if let Some(v) = s.take("noise_dim")? {
        cfg.noise_dim = v;
    }
    if let Some(v) = s.take_list("hidden")? {
        cfg.hidden = v;
    }
    if let Some(v) = s.take("eval_every")? {
        cfg.eval_every = v;
    }
    if let Some(v) = s.take("eval_samples")? {
        cfg.eval_samples = v;
    }
    let data = s.take_or("data", "gaussian_ring".to_string())?;
    let holdout = s.take::<String>("holdout")?;
    let checkpoint_every = s.take_or("checkpoint_every", 0usize)?;
    s.finish()?;
    cfg.validate()?;
    Ok(TrainSetup { train: cfg, data, holdout, checkpoint_every })
}

/// Explicit held-out source, or an independent draw of a synthetic training set.
fn holdout_measure(setup: &TrainSetup) -> Result<Option<EmpiricalMeasure>> {
    if let Some(h) = &setup.holdout {
        return load_source(h).map(Some);
    }
    if Path::new(&setup.data).is_file() {
        return Ok(None);
    }
    match synthetic_spec(&setup.data) {
        Some(spec) => {
            let mut spec = spec?;
            spec.seed = child_seed(spec.seed, 1);
            spec.n_samples = setup.train.eval_samples;
            generate(&spec).map(Some)
        }
        None => Ok(None),
    }
}

fn write_checkpoint(
    dir: &Path,
    phi: &GeneratorParams,
    psi: Option<&AmortizedParams>,
    psi_frame: Option<&ProjectedAmortizedParams>,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = vec!["generator.gnsw"];
    write_atomic(&dir.join("generator.gnsw"), &phi.to_bytes())?;
    if let Some(psi) = psi {
        write_atomic(&dir.join("psi.amsw"), &psi.to_bytes())?;
        files.push("psi.amsw");
    }
    if let Some(psi) = psi_frame {
        write_atomic(&dir.join("psi.apsw"), &psi.to_bytes())?;
        files.push("psi.apsw");
    }
    let manifest = json!({
        "config": cfg.to_json(),
        "seed": cfg.seed,
        "iteration": iteration,
        "files": files,
    });
    write_atomic(&dir.join("manifest.json"), format!("{}\n", to_json_line(&manifest)).as_bytes())
}

fn cmd_train(cli: &Cli) -> Result<i32> {
    let settings = Settings::load(cli.config.as_deref())?;
    let setup = train_setup(settings, cli.method.as_deref(), cli.seed)?;
    let data = load_source(&setup.data)?;
    let holdout = holdout_measure(&setup)?;
    let dir = out_dir(cli)?;
    let ckpt = dir.join("checkpoints");
    let cfg = setup.train.clone();

    let start = Instant::now();
    let session = Session::new(&data, holdout.as_ref(), cfg.clone())?;
    let mut timing = String::new();
    let outcome = session.run_with(|sess, rec| {
        timing.push_str(&to_json_line(&json!({"iteration": rec.iteration, "wall_ms": rec.wall_ms})));
        timing.push('\n');
        let done = sess.iteration();
        if setup.checkpoint_every > 0 && done % setup.checkpoint_every == 0 {
            let name = format!("iter_{done:06}");
            write_checkpoint(&ckpt.join(name), &sess.phi, sess.psi.as_ref(), sess.psi_frame.as_ref(), &cfg, done)?;
        }
        Ok(())
    })?;
    let seconds = start.elapsed().as_secs_f64();

    let mut log = String::new();
    for rec in &outcome.log {
        log.push_str(&to_json_line(rec));
        log.push('\n');
    }
    write_atomic(&dir.join("run_log.jsonl"), log.as_bytes())?;
    let iterations = outcome.log.len();
    write_checkpoint(
        &ckpt.join("final"),
        &outcome.phi,
        outcome.psi.as_ref(),
        outcome.psi_frame.as_ref(),
        &cfg,
        iterations,
    )?;
    let summary = json!({
        "loss_kind": cfg.loss_kind.name(),
        "seed": cfg.seed,
        "iterations": iterations,
        "initial_exact_w2": outcome.initial_exact_w2,
        "final_exact_w2": outcome.final_exact_w2,
        "final_loss": outcome.log.last().map(|r| r.loss),
        "failed": outcome.failed,
        "failure": outcome.failure,
        "counters": outcome.counters,
    });
    let summary_line = to_json_line(&summary);
    write_atomic(&dir.join("summary.json"), format!("{summary_line}\n").as_bytes())?;
    timing.push_str(&to_json_line(&json!({"total_seconds": seconds})));
    timing.push('\n');
    write_atomic(&dir.join("timing.jsonl"), timing.as_bytes())?;
    if !cli.quiet {
        println!("{summary_line}");
    }
    Ok(if outcome.failed { EXIT_NUMERICAL } else { EXIT_OK })
}

fn cmd_gradcheck(cli: &Cli) -> Result<i32> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed = seed(cli, &mut s)?;
    let instances = s.take_or("instances", 50usize)?;
    let defaults = FdConfig::default();
    let fd = FdConfig {
        h: s.take_or("h", defaults.h)?,
        tol: s.take_or("tol", defaults.tol)?,
        max_coords: s.take_or("max_coords", defaults.max_coords)?,
        seed,
    };
    s.finish()?;
    if instances == 0 || !(fd.h > 0.0) || !(fd.tol > 0.0) || fd.max_coords == 0 {
        return Err(Error::Config("instances, h, tol and max_coords must be positive".into()));
    }
    let dir = out_dir(cli)?;
    let reports = gradient_suite(instances, seed, &fd)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_jsonl());
        text.push('\n');
    }
    write_atomic(&dir.join("gradcheck.jsonl"), text.as_bytes())?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    if !cli.quiet {
        println!(
            "{}",
            to_json_line(&json!({"checks": reports.len(), "failed": failed, "max_rel_err": worst}))
        );
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Per-family ordering checks: time per iteration must grow with `L` and `T2`.
pub fn bench_orderings(records: &[BenchRecord]) -> Vec<(String, bool)> {
    let mut checks = Vec::new();
    for (family, key) in [("sw", "L="), ("max_sw", "T2=")] {
        let mut rows: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.method == family)
            .filter_map(|r| r.param.strip_prefix(key)?.parse().ok().map(|n| (n, r.median_secs)))
            .collect();
        rows.sort_by_key(|r| r.0);
        if rows.len() > 1 {
            let ok = rows.windows(2).all(|w| w[1].1 > w[0].1);
            checks.push((format!("{family} time increases with {}", key.trim_end_matches('=')), ok));
        }
    }
    checks
}

fn cmd_bench(cli: &Cli) -> Result<i32> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed = seed(cli, &mut s)?;
    let d0 = BenchGrid::default();
    let ls = s.take_list::<usize>("L")?.unwrap_or_else(|| vec![1, 100, 1000]);
    let t2s = s.take_list::<usize>("T2")?.unwrap_or_else(|| vec![1, 10, 100]);
    let kinds = s.take_list::<ModelKind>("kinds")?.unwrap_or_else(|| ModelKind::ALL.to_vec());
    let mut methods: Vec<BenchMethod> = ls.into_iter().map(|l| BenchMethod::Sw { l }).collect();
    methods.extend(t2s.into_iter().map(|t2| BenchMethod::MaxSw { t2 }));
    methods.extend(kinds.into_iter().map(BenchMethod::Amortized));
    let grid = BenchGrid {
        methods,
        m: s.take_or("m", d0.m)?,
        d: s.take_or("d", d0.d)?,
        p: parse_order(s.take_or("p", 2u32)?)?,
        seed,
        warmup: s.take_or("warmup", d0.warmup)?,
        reps: s.take_or("reps", d0.reps)?,
        iters_per_rep: s.take_or("iters_per_rep", d0.iters_per_rep)?,
        eta2: s.take_or("eta2", d0.eta2)?,
    };
    s.finish()?;
    grid.validate()?;
    let dir = out_dir(cli)?;
    let records = bench_sweep(&grid)?;
    let mut csv = Vec::new();
    write_csv(&records, &mut csv)?;
    write_atomic(&dir.join("bench.csv"), &csv)?;
    let checks = bench_orderings(&records);
    if !cli.quiet {
        let obj: serde_json::Map<String, serde_json::Value> =
            checks.iter().map(|(name, ok)| (name.clone(), json!(ok))).collect();
        println!("{}", to_json_line(&obj));
    }
    Ok(if checks.iter().all(|c| c.1) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_oracle(cli: &Cli, suite: &str) -> Result<i32> {
    if suite != "prop2" {
        return Err(Error::Config(format!("unknown oracle suite `{suite}` (expected prop2)")));
    }
    let mut s = Settings::load(cli.config.as_deref())?;
    let d0 = Prop2Config::default();
    let cfg = Prop2Config {
        seed: seed(cli, &mut s)?,
        instances: s.take_or("instances", d0.instances)?,
        n_points: s.take_or("n_points", d0.n_points)?,
        max_m: s.take_or("max_m", d0.max_m)?,
        n_pairs: s.take_or("n_pairs", d0.n_pairs)?,
        n_angles: s.take_or("n_angles", d0.n_angles)?,
        fit_iters: s.take_or("fit_iters", d0.fit_iters)?,
        eta2: s.take_or("eta2", d0.eta2)?,
        n_std_err: s.take_or("n_std_err", d0.n_std_err)?,
    };
    s.finish()?;
    if cfg.instances == 0 || cfg.n_pairs < 2 || cfg.n_angles == 0 || cfg.n_points == 0 || cfg.max_m < 2 {
        return Err(Error::Config("instances, n_angles, n_points must be >= 1; n_pairs and max_m >= 2".into()));
    }
    let dir = out_dir(cli)?;
    let records = prop2_suite(&cfg)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&to_json_line(r));
        text.push('\n');
    }
    write_atomic(&dir.join("prop2.jsonl"), text.as_bytes())?;
    let violations = records.iter().filter(|r| !r.pass).count();
    if !cli.quiet {
        println!(
            "{}",
            to_json_line(&json!({"instances": cfg.instances, "records": records.len(), "violations": violations}))
        );
    }
    Ok(if violations == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}
