//! Uniform empirical measures and one-dimensional optimal transport.
//!
//! An [`EmpiricalMeasure`] stores `m` support points in `R^d`, each carrying
//! mass `1/m`; no weight vector is kept. Projecting onto a unit direction
//! gives [`ProjectedSamples`], and two projected samples of equal size are
//! compared in closed form by pairing order statistics (the sorted matching
//! is an optimal plan in one dimension).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const EMSR_MAGIC: &[u8; 4] = b"EMSR";

/// Order `p` of a Wasserstein distance. Only `p = 1` and `p = 2` are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Order {
    One,
    #[default]
    Two,
}

impl Order {
    pub fn exponent(self) -> f64 {
        match self {
            Order::One => 1.0,
            Order::Two => 2.0,
        }
    }

    /// `|c|^p`.
    #[inline]
    pub fn pow_abs(self, c: f64) -> f64 {
        match self {
            Order::One => c.abs(),
            Order::Two => c * c,
        }
    }

    /// Derivative of `|c|^p` with respect to `c`, with `sign(0) = 0` for `p = 1`.
    #[inline]
    pub fn pow_abs_derivative(self, c: f64) -> f64 {
        match self {
            Order::One => {
                if c > 0.0 {
                    1.0
                } else if c < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Order::Two => 2.0 * c,
        }
    }

    /// `s^(1/p)`.
    #[inline]
    pub fn root(self, s: f64) -> f64 {
        match self {
            Order::One => s,
            Order::Two => s.sqrt(),
        }
    }
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Order::One),
            "2" => Ok(Order::Two),
            other => Err(Error::Config(format!("order p must be 1 or 2, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Order {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Order::One => f.write_str("1"),
            Order::Two => f.write_str("2"),
        }
    }
}

/// `m` points in `R^d` with uniform mass `1/m`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Array2<f64>,
}

impl EmpiricalMeasure {
    /// Wraps an `m × d` matrix, one support point per row.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        let (m, d) = points.dim();
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "empirical measure needs m >= 1 and d >= 1, got {m}x{d}"
            )));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite coordinate at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        // Downstream code relies on contiguous row-major rows.
        let points = if points.is_standard_layout() {
            points
        } else {
            points.as_standard_layout().to_owned()
        };
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((m, d), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(points)
    }

    /// Number of support points.
    pub fn m(&self) -> usize {
        self.points.nrows()
    }

    /// Ambient dimension.
    pub fn d(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    /// Row-major `m·d` coordinates.
    pub fn as_slice(&self) -> &[f64] {
        self.points.as_slice().expect("standard layout")
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        for row in self.points.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record.map_err(csv_error)?;
            let offset = record.position().map_or(0, |p| p.byte());
            let row = record
                .iter()
                .map(|field| {
                    field.parse::<f64>().map_err(|e| Error::Parse {
                        offset,
                        msg: format!("bad number {field:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    /// Binary layout: `"EMSR"`, `u32` m, `u32` d, then `m·d` f64, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.points.len());
        out.extend_from_slice(EMSR_MAGIC);
        out.extend_from_slice(&(self.m() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d() as u32).to_le_bytes());
        for v in self.points.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                msg: "truncated EMSR header".into(),
            });
        }
        if &bytes[..4] != EMSR_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "bad magic, expected EMSR".into(),
            });
        }
        let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = 12 + 8 * m * d;
        if bytes.len() < need {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                msg: format!("truncated EMSR payload, need {need} bytes"),
            });
        }
        let flat: Vec<f64> = bytes[12..need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let points = Array2::from_shape_vec((m, d), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(points)
    }

    /// Loads a measure, choosing the binary format for `.bin`/`.emsr` files and CSV otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        if is_binary_path(path) {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            Self::from_bytes(&bytes)
        } else {
            Self::read_csv(BufReader::new(File::open(path)?))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if is_binary_path(path) {
            std::fs::write(path, self.to_bytes())?;
            Ok(())
        } else {
            self.write_csv(BufWriter::new(File::create(path)?))
        }
    }
}

fn is_binary_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("bin") | Some("emsr")
    )
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            offset,
            msg: format!("{other:?}"),
        },
    }
}

/// A unit vector on `S^{d-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    vec: Array1<f64>,
}

impl Direction {
    pub const UNIT_TOLERANCE: f64 = 1e-12;

    /// Accepts an already-normalized vector.
    pub fn new(vec: Array1<f64>) -> Result<Self> {
        let norm = vec.dot(&vec).sqrt();
        if vec.is_empty() || (norm - 1.0).abs() > Self::UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "direction must have unit norm, got {norm}"
            )));
        }
        Ok(Self { vec })
    }

    /// Normalizes `vec`, failing when its norm is below `1e-30`.
    pub fn normalized(vec: Array1<f64>) -> Result<Self> {
        let norm = vec.dot(&vec).sqrt();
        if !(norm >= 1e-30) {
            return Err(Error::DegenerateDirection { norm });
        }
        Ok(Self { vec: vec / norm })
    }

    pub fn axis(d: usize, k: usize) -> Self {
        let mut vec = Array1::zeros(d);
        vec[k] = 1.0;
        Self { vec }
    }

    pub fn d(&self) -> usize {
        self.vec.len()
    }

    pub fn vec(&self) -> ArrayView1<'_, f64> {
        self.vec.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.vec.as_slice().expect("contiguous")
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.vec
    }

    /// Angle in `[0, π/2]` between the lines spanned by two directions.
    pub fn line_angle(&self, other: &Direction) -> f64 {
        self.vec.dot(&other.vec).abs().min(1.0).acos()
    }
}

/// Projections `θᵀx_i` of a measure's points plus their ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSamples {
    pub values: Vec<f64>,
    /// `values[sort_ranks[i]] <= values[sort_ranks[i + 1]]`.
    pub sort_ranks: Vec<usize>,
}

impl ProjectedSamples {
    pub fn from_values(values: Vec<f64>) -> Self {
        let sort_ranks = argsort(&values);
        Self { values, sort_ranks }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sorted(&self) -> impl Iterator<Item = f64> + '_ {
        self.sort_ranks.iter().map(move |&i| self.values[i])
    }
}

/// Stable ascending argsort; ties keep index order.
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// `θᵀx_i` for every row of `points`.
pub fn project_values(points: ArrayView2<'_, f64>, theta: &[f64]) -> Vec<f64> {
    points
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(theta).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn project(mu: &EmpiricalMeasure, theta: &Direction) -> Result<ProjectedSamples> {
    if theta.d() != mu.d() {
        return Err(Error::DimensionMismatch {
            expected: mu.d(),
            got: theta.d(),
        });
    }
    Ok(ProjectedSamples::from_values(project_values(
        mu.points(),
        theta.as_slice(),
    )))
}

/// `(1/m) Σ |u_(i) − v_(i)|^p` over order statistics.
pub fn wasserstein_1d_pow(u: &ProjectedSamples, v: &ProjectedSamples, p: Order) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Unsupported(format!(
            "1-D transport between unequal sizes ({} vs {})",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::InvalidArgument("empty projected samples".into()));
    }
    let total: f64 = u.sorted().zip(v.sorted()).map(|(a, b)| p.pow_abs(a - b)).sum();
    Ok(total / u.len() as f64)
}

pub fn wasserstein_1d(u: &ProjectedSamples, v: &ProjectedSamples, p: Order) -> Result<f64> {
    wasserstein_1d_pow(u, v, p).map(|s| p.root(s))
}

/// Draws `m_batch` rows uniformly with replacement.
pub fn sample_minibatch<R: Rng + ?Sized>(
    mu: &EmpiricalMeasure,
    m_batch: usize,
    rng: &mut R,
) -> Result<EmpiricalMeasure> {
    if m_batch == 0 {
        return Err(Error::InvalidArgument("mini-batch size must be >= 1".into()));
    }
    let d = mu.d();
    let src = mu.as_slice();
    let mut flat = Vec::with_capacity(m_batch * d);
    for _ in 0..m_batch {
        let i = rng.random_range(0..mu.m());
        flat.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    EmpiricalMeasure::new(Array2::from_shape_vec((m_batch, d), flat).expect("shape"))
}

/// Uniform direction on `S^{d-1}` from normalized standard normals.
pub fn sample_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Direction> {
    if d == 0 {
        return Err(Error::InvalidArgument("sphere dimension must be >= 1".into()));
    }
    loop {
        let g: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = g.dot(&g).sqrt();
        if norm >= 1e-30 {
            return Ok(Direction { vec: g / norm });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn ps(values: &[f64]) -> ProjectedSamples {
        ProjectedSamples::from_values(values.to_vec())
    }

    #[test]
    fn axis_projection() {
        let mu = EmpiricalMeasure::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let proj = project(&mu, &Direction::axis(2, 0)).unwrap();
        assert_eq!(proj.values, vec![1.0, 0.0]);
        assert_eq!(proj.sort_ranks, vec![1, 0]);
    }

    #[test]
    fn single_point_projection() {
        let mu = EmpiricalMeasure::new(array![[2.0, 2.0]]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let theta = Direction::normalized(array![s, s]).unwrap();
        let proj = project(&mu, &theta).unwrap();
        assert!((proj.values[0] - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sort_ranks_match_hand_sort() {
        let mu = EmpiricalMeasure::new(array![[1.0, 2.0], [3.0, 4.0], [-1.0, 0.0]]).unwrap();
        let proj = project(&mu, &Direction::axis(2, 1)).unwrap();
        assert_eq!(proj.values, vec![2.0, 4.0, 0.0]);
        assert_eq!(proj.sort_ranks, vec![2, 0, 1]);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let mu = EmpiricalMeasure::new(array![[1.0, 2.0]]).unwrap();
        assert!(matches!(
            project(&mu, &Direction::axis(3, 0)),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(wasserstein_1d(&ps(&[0., 1.]), &ps(&[0., 1.]), Order::Two).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&ps(&[0., 1.]), &ps(&[1., 2.]), Order::One).unwrap(), 1.0);
        assert!((wasserstein_1d(&ps(&[0., 2.]), &ps(&[1., 1.]), Order::Two).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein_1d_pow(&ps(&[0., 1.]), &ps(&[0., 1.]), Order::Two).unwrap(), 0.0);
        assert_eq!(wasserstein_1d_pow(&ps(&[0., 1.]), &ps(&[1., 2.]), Order::Two).unwrap(), 1.0);
        assert_eq!(wasserstein_1d_pow(&ps(&[0., 2.]), &ps(&[1., 1.]), Order::Two).unwrap(), 1.0);
    }

    #[test]
    fn unequal_sizes_unsupported() {
        assert!(matches!(
            wasserstein_1d(&ps(&[0.0]), &ps(&[0.0, 1.0]), Order::Two),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn minibatch_of_single_point() {
        let mu = EmpiricalMeasure::new(array![[3.0, -1.0]]).unwrap();
        let batch = sample_minibatch(&mu, 4, &mut seeded(1)).unwrap();
        assert_eq!(batch.m(), 4);
        for row in batch.points().rows() {
            assert_eq!(row.to_vec(), vec![3.0, -1.0]);
        }
        assert!(sample_minibatch(&mu, 0, &mut seeded(1)).is_err());
    }

    #[test]
    fn minibatch_is_deterministic() {
        let mu = EmpiricalMeasure::new(Array2::from_shape_fn((50, 3), |(i, j)| (i * 3 + j) as f64)).unwrap();
        let a = sample_minibatch(&mu, 16, &mut seeded(9)).unwrap();
        let b = sample_minibatch(&mu, 16, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sphere_d1_and_unit_norm() {
        let mut rng = seeded(3);
        for _ in 0..100 {
            let t = sample_sphere(1, &mut rng).unwrap();
            assert!(t.as_slice()[0] == 1.0 || t.as_slice()[0] == -1.0);
        }
        for d in 1..8 {
            let t = sample_sphere(d, &mut rng).unwrap();
            assert!((t.vec().dot(&t.vec()).sqrt() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_empty_and_nonfinite() {
        assert!(EmpiricalMeasure::new(Array2::zeros((0, 2))).is_err());
        assert!(EmpiricalMeasure::new(array![[f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn binary_rejects_bad_magic_and_truncation() {
        let mu = EmpiricalMeasure::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut bytes = mu.to_bytes();
        assert_eq!(&bytes[..4], b"EMSR");
        assert_eq!(EmpiricalMeasure::from_bytes(&bytes).unwrap(), mu);
        bytes.truncate(20);
        assert!(matches!(EmpiricalMeasure::from_bytes(&bytes), Err(Error::Parse { .. })));
        let mut bad = mu.to_bytes();
        bad[0] = b'X';
        assert!(matches!(EmpiricalMeasure::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn csv_parse_error_reports_offset() {
        let err = EmpiricalMeasure::read_csv("1,2\n3,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 4, .. }), "{err:?}");
    }
}
