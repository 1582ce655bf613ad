//! Synthetic 2-D distributions and an IDX3 image loader.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    /// Isotropic Gaussians at angles `2πj/n_modes` on a circle.
    GaussianRing { n_modes: usize, radius: f64, sigma: f64 },
    TwoMoons { noise: f64 },
    SwissRoll2d { noise: f64 },
    /// Uniform on the even cells of a `cells × cells` board over `[-2, 2]²`.
    Checkerboard { cells: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn gaussian_ring(n_modes: usize, radius: f64, sigma: f64, n_samples: usize, seed: u64) -> Self {
        Self { kind: SyntheticKind::GaussianRing { n_modes, radius, sigma }, n_samples, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1");
        }
        match self.kind {
            SyntheticKind::GaussianRing { n_modes, radius, sigma } => {
                if n_modes == 0 {
                    return bad("n_modes must be >= 1");
                }
                if !(sigma >= 0.0 && sigma.is_finite() && radius.is_finite()) {
                    return bad("sigma must be finite and >= 0, radius finite");
                }
            }
            SyntheticKind::TwoMoons { noise } | SyntheticKind::SwissRoll2d { noise } => {
                if !(noise >= 0.0 && noise.is_finite()) {
                    return bad("noise must be finite and >= 0");
                }
            }
            SyntheticKind::Checkerboard { cells } => {
                if cells < 2 {
                    return bad("checkerboard needs at least 2 cells per side");
                }
            }
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        match self.kind {
            SyntheticKind::GaussianRing { .. } => "gaussian_ring",
            SyntheticKind::TwoMoons { .. } => "two_moons",
            SyntheticKind::SwissRoll2d { .. } => "swiss_roll_2d",
            SyntheticKind::Checkerboard { .. } => "checkerboard",
        }
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.name())?;
        match self.kind {
            SyntheticKind::GaussianRing { n_modes, radius, sigma } => {
                write!(f, "n_modes={n_modes},radius={radius},sigma={sigma},")?
            }
            SyntheticKind::TwoMoons { noise } | SyntheticKind::SwissRoll2d { noise } => write!(f, "noise={noise},")?,
            SyntheticKind::Checkerboard { cells } => write!(f, "cells={cells},")?,
        }
        write!(f, "n={},seed={}", self.n_samples, self.seed)
    }
}

/// `name:key=value,key=value`; unspecified keys take defaults
/// (`n_modes=8, radius=2, sigma=0.02, noise=0.05, cells=4, n=512, seed=0`).
impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in `{item}`")))?;
            kv.push((k.trim(), v.trim()));
        }
        let allowed: &[&str] = match name.trim() {
            "gaussian_ring" => &["n_modes", "radius", "sigma", "n", "seed"],
            "two_moons" | "swiss_roll_2d" => &["noise", "n", "seed"],
            "checkerboard" => &["cells", "n", "seed"],
            other => return Err(Error::Config(format!("unknown synthetic dataset `{other}`"))),
        };
        if let Some((k, _)) = kv.iter().find(|(k, _)| !allowed.contains(k)) {
            return Err(Error::Config(format!("unknown key `{k}` for dataset `{}`", name.trim())));
        }
        fn get<T: FromStr>(kv: &[(&str, &str)], key: &str, default: T) -> Result<T> {
            match kv.iter().rev().find(|(k, _)| *k == key) {
                Some((_, v)) => v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
                None => Ok(default),
            }
        }
        let kind = match name.trim() {
            "gaussian_ring" => SyntheticKind::GaussianRing {
                n_modes: get(&kv, "n_modes", 8)?,
                radius: get(&kv, "radius", 2.0)?,
                sigma: get(&kv, "sigma", 0.02)?,
            },
            "two_moons" => SyntheticKind::TwoMoons { noise: get(&kv, "noise", 0.05)? },
            "swiss_roll_2d" => SyntheticKind::SwissRoll2d { noise: get(&kv, "noise", 0.05)? },
            _ => SyntheticKind::Checkerboard { cells: get(&kv, "cells", 4)? },
        };
        let spec = SyntheticSpec { kind, n_samples: get(&kv, "n", 512)?, seed: get(&kv, "seed", 0)? };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// Deterministic sample of `spec.n_samples` points.
pub fn generate(spec: &SyntheticSpec) -> Result<EmpiricalMeasure> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let n = spec.n_samples;
    let mut pts = Array2::zeros((n, 2));
    let gauss = |rng: &mut crate::rng::SeededRng| rng.sample::<f64, _>(StandardNormal);
    for i in 0..n {
        let (a, b) = match spec.kind {
            SyntheticKind::GaussianRing { n_modes, radius, sigma } => {
                let j = rng.random_range(0..n_modes);
                let angle = 2.0 * PI * j as f64 / n_modes as f64;
                let (s, c) = angle.sin_cos();
                (radius * c + sigma * gauss(&mut rng), radius * s + sigma * gauss(&mut rng))
            }
            SyntheticKind::TwoMoons { noise } => {
                let t = PI * rng.random::<f64>();
                let (x, y) = if rng.random::<bool>() { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                (x + noise * gauss(&mut rng), y + noise * gauss(&mut rng))
            }
            SyntheticKind::SwissRoll2d { noise } => {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                (t * t.cos() / 5.0 + noise * gauss(&mut rng), t * t.sin() / 5.0 + noise * gauss(&mut rng))
            }
            SyntheticKind::Checkerboard { cells } => {
                let width = 4.0 / cells as f64;
                let (ci, cj) = loop {
                    let ci = rng.random_range(0..cells);
                    let cj = rng.random_range(0..cells);
                    if (ci + cj) % 2 == 0 {
                        break (ci, cj);
                    }
                };
                (
                    -2.0 + width * (ci as f64 + rng.random::<f64>()),
                    -2.0 + width * (cj as f64 + rng.random::<f64>()),
                )
            }
        };
        pts[[i, 0]] = a;
        pts[[i, 1]] = b;
    }
    EmpiricalMeasure::new(pts)
}

pub const IDX3_MAGIC: u32 = 0x0000_0803;

/// Raw contents of an IDX3 file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `n × rows·cols` pixels, row-major per image.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Pixels scaled by `x/127.5 − 1`, one image per row.
    pub fn to_measure(&self) -> Result<EmpiricalMeasure> {
        let d = self.rows * self.cols;
        let data: Vec<f64> = self.pixels.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
        let arr = Array2::from_shape_vec((self.len(), d), data).expect("shape");
        EmpiricalMeasure::new(arr)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse { offset: offset as u64, msg: "truncated IDX header".into() })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX3_MAGIC {
        return Err(Error::Parse { offset: 0, msg: format!("bad IDX3 magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Parse { offset: 4, msg: "IDX3 file with an empty dimension".into() });
    }
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Parse { offset: 4, msg: "IDX3 dimensions overflow".into() })?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            msg: format!("truncated IDX3 pixel data: expected {need} bytes, found {}", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::Parse { offset: (16 + need) as u64, msg: "trailing bytes after IDX3 pixel data".into() });
    }
    Ok(IdxImages { rows, cols, pixels: body.to_vec() })
}

pub fn write_idx(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX3_MAGIC, images.len() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

/// Reads an IDX3 image file as a measure with one `rows·cols` point per image.
pub fn load_idx(path: &Path) -> Result<EmpiricalMeasure> {
    let bytes = std::fs::read(path)?;
    parse_idx(&bytes)?.to_measure()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_ring_has_exact_modes() {
        let mu = generate(&SyntheticSpec::gaussian_ring(8, 2.0, 0.0, 500, 3)).unwrap();
        let mut distinct: Vec<(u64, u64)> = mu.points().rows().into_iter().map(|r| (r[0].to_bits(), r[1].to_bits())).collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 8);
        for r in mu.points().rows() {
            assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_measure() {
        for s in ["gaussian_ring:n=50,seed=4", "two_moons:n=50", "swiss_roll_2d:n=50", "checkerboard:n=50"] {
            let spec: SyntheticSpec = s.parse().unwrap();
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
            assert!(generate(&spec).unwrap().points().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn mode_counts_within_multinomial_band() {
        let n = 10_000;
        let mu = generate(&SyntheticSpec::gaussian_ring(8, 2.0, 0.02, n, 11)).unwrap();
        let mut counts = [0usize; 8];
        for r in mu.points().rows() {
            let a = r[1].atan2(r[0]).rem_euclid(2.0 * PI);
            counts[((a / (2.0 * PI / 8.0)).round() as usize) % 8] += 1;
        }
        let (mean, sd) = (n as f64 / 8.0, (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt());
        for c in counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn spec_parsing() {
        let spec: SyntheticSpec = "gaussian_ring:n_modes=6,radius=1.5,sigma=0.1,n=20,seed=9".parse().unwrap();
        assert_eq!(spec, SyntheticSpec::gaussian_ring(6, 1.5, 0.1, 20, 9));
        assert_eq!(spec.to_string().parse::<SyntheticSpec>().unwrap(), spec);
        assert!("gaussian_ring:bogus=1".parse::<SyntheticSpec>().is_err());
        assert!("nope:n=3".parse::<SyntheticSpec>().is_err());
        assert!("two_moons:noise=-1".parse::<SyntheticSpec>().is_err());
        assert!("checkerboard:n=0".parse::<SyntheticSpec>().is_err());
    }

    #[test]
    fn checkerboard_only_even_cells() {
        let mu = generate(&"checkerboard:cells=4,n=400".parse().unwrap()).unwrap();
        for r in mu.points().rows() {
            let ci = ((r[0] + 2.0) / 1.0).floor() as i64;
            let cj = ((r[1] + 2.0) / 1.0).floor() as i64;
            assert_eq!((ci + cj) % 2, 0);
        }
    }

    #[test]
    fn minimal_idx_file() {
        let img = IdxImages { rows: 2, cols: 2, pixels: vec![0, 255, 0, 255] };
        let mu = parse_idx(&write_idx(&img)).unwrap().to_measure().unwrap();
        assert_eq!(mu.points().row(0).to_vec(), vec![-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn idx_rejects_label_magic_and_truncation() {
        let img = IdxImages { rows: 2, cols: 2, pixels: vec![1, 2, 3, 4] };
        let mut bytes = write_idx(&img);
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(parse_idx(truncated), Err(Error::Parse { offset: 19, .. })));
        assert!(matches!(parse_idx(&bytes[..6]), Err(Error::Parse { offset: 4, .. })));
        bytes[3] = 0x01;
        assert!(matches!(parse_idx(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn idx_round_trip() {
        let mut rng = seeded(5);
        let pixels: Vec<u8> = (0..10 * 28 * 28).map(|_| rng.random()).collect();
        let img = IdxImages { rows: 28, cols: 28, pixels };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images.idx3");
        std::fs::write(&path, write_idx(&img)).unwrap();
        let back = parse_idx(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back, img);
        let mu = load_idx(&path).unwrap();
        assert_eq!(mu.d(), 784);
        assert!(mu.points().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
