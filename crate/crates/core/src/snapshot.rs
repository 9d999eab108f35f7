//! Full-order snapshot matrices: storage, I/O, centering, subsampling and
//! synthetic data generators.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Result, RomError};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SNP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotFormat {
    Binary,
    Csv,
}

impl FromStr for SnapshotFormat {
    type Err = RomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "snp" | "snp1" => Ok(Self::Binary),
            "csv" => Ok(Self::Csv),
            other => Err(RomError::arg(format!("unknown snapshot format `{other}`"))),
        }
    }
}

/// A snapshot matrix: one row per spatial degree of freedom, one column per
/// time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    data: DMatrix<f64>,
    times: Vec<f64>,
    component: String,
}

impl SnapshotSet {
    pub fn new(data: DMatrix<f64>, times: Vec<f64>, component: impl Into<String>) -> Result<Self> {
        validate_times(&times)?;
        if data.nrows() < 1 {
            return Err(RomError::Validation("snapshot set needs at least one row".into()));
        }
        if data.ncols() != times.len() {
            return Err(RomError::Validation(format!(
                "{} columns but {} time stamps",
                data.ncols(),
                times.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            let (row, col) = (idx % data.nrows(), idx / data.nrows());
            return Err(RomError::Validation(format!(
                "non-finite value at row {row}, column {col}"
            )));
        }
        Ok(Self {
            data,
            times,
            component: component.into(),
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn component(&self) -> &str {
        &self.component
    }

    pub fn mesh_size(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn with_component(mut self, component: impl Into<String>) -> Self {
        self.component = component.into();
        self
    }

    pub fn into_parts(self) -> (DMatrix<f64>, Vec<f64>, String) {
        (self.data, self.times, self.component)
    }

    /// Keeps columns `0, stride, 2*stride, ...`.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride < 1 {
            return Err(RomError::arg("subsample stride must be at least 1"));
        }
        let keep: Vec<usize> = (0..self.len()).step_by(stride).collect();
        if keep.len() < 2 {
            return Err(RomError::arg(format!(
                "stride {stride} leaves fewer than two of {} snapshots",
                self.len()
            )));
        }
        let data = self.data.select_columns(keep.iter());
        let times = keep.iter().map(|&k| self.times[k]).collect();
        Self::new(data, times, self.component.clone())
    }

    /// Removes the temporal mean from every snapshot.
    pub fn center(&self) -> CenteredSet {
        let mean = self.data.column_mean();
        let mut deviations = self.data.clone();
        for mut col in deviations.column_iter_mut() {
            col -= &mean;
        }
        CenteredSet {
            deviations,
            mean,
            times: self.times.clone(),
            component: self.component.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>, format: SnapshotFormat) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        match format {
            SnapshotFormat::Binary => Self::read_binary(BufReader::new(file)),
            SnapshotFormat::Csv => {
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Self::read_csv(BufReader::new(file), label)
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, format: SnapshotFormat) -> Result<()> {
        let file = File::create(path)?;
        match format {
            SnapshotFormat::Binary => self.write_binary(BufWriter::new(file)),
            SnapshotFormat::Csv => self.write_csv(BufWriter::new(file)),
        }
    }

    pub fn write_binary<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out, SNAPSHOT_MAGIC)?;
        w.len32(self.mesh_size())?;
        w.len32(self.len())?;
        w.label(&self.component)?;
        w.f64s(&self.times)?;
        w.f64s(self.data.as_slice())?;
        w.finish()?;
        Ok(())
    }

    pub fn read_binary<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, SNAPSHOT_MAGIC, "SNP1")?;
        let n = r.len32()?;
        let m = r.len32()?;
        let component = r.label()?;
        let times = r.f64s(m)?;
        let values = r.f64s(n * m)?;
        r.finish()?;
        Self::new(DMatrix::from_vec(n, m, values), times, component)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        let mut line = String::from("t");
        for t in &self.times {
            write!(line, ",{t:e}").expect("write to string");
        }
        writeln!(out, "{line}")?;
        for row in self.data.row_iter() {
            line.clear();
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                write!(line, "{v:e}").expect("write to string");
            }
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, component: impl Into<String>) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| RomError::Format("CSV: empty file".into()))??;
        let mut fields = header.split(',');
        if fields.next().map(str::trim) != Some("t") {
            return Err(RomError::Format("CSV: header must start with `t`".into()));
        }
        let times = fields
            .enumerate()
            .map(|(j, f)| parse_cell(f, "header", j))
            .collect::<Result<Vec<_>>>()?;
        let m = times.len();
        let mut values = Vec::new();
        let mut n = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .enumerate()
                .map(|(j, f)| parse_cell(f, &format!("row {n}"), j))
                .collect::<Result<_>>()?;
            if row.len() != m {
                return Err(RomError::Format(format!(
                    "CSV: row {n} has {} values, header has {m} times",
                    row.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(RomError::Validation(format!("non-finite value at row {n}, column {j}")));
            }
            values.extend(row);
            n += 1;
        }
        let data = DMatrix::from_row_slice(n, m, &values);
        Self::new(data, times, component)
    }
}

fn parse_cell(field: &str, row: &str, col: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| RomError::Format(format!("CSV: cannot parse `{field}` at {row}, column {col}")))
}

fn validate_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(RomError::Validation(format!(
            "need at least two time stamps, got {}",
            times.len()
        )));
    }
    if let Some(k) = times.iter().position(|t| !t.is_finite()) {
        return Err(RomError::Validation(format!("time stamp {k} is not finite")));
    }
    if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
        return Err(RomError::Validation(format!(
            "time stamps not strictly increasing at index {}: {} then {}",
            k + 1,
            times[k],
            times[k + 1]
        )));
    }
    Ok(())
}

/// Returns the common spacing of `times`, or an error when the spacing varies
/// by more than `1e-9` relative.
pub fn uniform_step(times: &[f64]) -> Result<f64> {
    validate_times(times)?;
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    for (k, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs() {
            return Err(RomError::arg(format!(
                "time stamps are not uniformly spaced (step {k} is {} vs mean {dt})",
                w[1] - w[0]
            )));
        }
    }
    Ok(dt)
}

/// Snapshots with the temporal mean removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredSet {
    deviations: DMatrix<f64>,
    mean: DVector<f64>,
    times: Vec<f64>,
    component: String,
}

impl CenteredSet {
    pub fn deviations(&self) -> &DMatrix<f64> {
        &self.deviations
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn component(&self) -> &str {
        &self.component
    }

    pub fn mesh_size(&self) -> usize {
        self.deviations.nrows()
    }

    /// The deviations viewed as an ordinary snapshot set.
    pub fn deviations_set(&self) -> SnapshotSet {
        SnapshotSet {
            data: self.deviations.clone(),
            times: self.times.clone(),
            component: self.component.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// `sin(x - speed * t)` on a uniform periodic grid over `[0, 2*pi)`.
    TravelingWave { speed: f64 },
    /// `v^{k+1} = A v^k` with a seeded Gaussian matrix scaled to unit
    /// spectral radius.
    LinearSystem,
    /// `[cos(omega t), sin(omega t)]` lifted into the grid by an orthonormal map.
    HarmonicLatent {
        omega: f64,
        #[serde(default)]
        identity_lift: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub grid_points: usize,
    #[serde(default)]
    pub t_start: f64,
    pub dt: f64,
    pub snapshots: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_component")]
    pub component: String,
}

fn default_component() -> String {
    "v".to_string()
}

impl SyntheticSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RomError::arg(format!("synthetic spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 2 {
            return Err(RomError::arg("synthetic grid needs at least 2 points"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(RomError::arg("synthetic time step must be positive"));
        }
        if self.snapshots < 2 {
            return Err(RomError::arg("synthetic data needs at least 2 snapshots"));
        }
        if !self.t_start.is_finite() {
            return Err(RomError::arg("synthetic start time must be finite"));
        }
        Ok(())
    }

    /// The native time grid `t_start + k*dt` for `k < snapshots`.
    pub fn times(&self) -> Vec<f64> {
        (0..self.snapshots).map(|k| self.t_start + k as f64 * self.dt).collect()
    }

    pub fn generate(&self) -> Result<SnapshotSet> {
        self.validate()?;
        self.generate_at(&self.times())
    }

    /// Evaluates the generator at arbitrary times. The linear system is only
    /// defined on integer multiples of `dt` after `t_start`.
    pub fn generate_at(&self, times: &[f64]) -> Result<SnapshotSet> {
        self.validate()?;
        validate_times(times)?;
        let n = self.grid_points;
        let data = match &self.kind {
            SyntheticKind::TravelingWave { speed } => {
                let grid: Vec<f64> = (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect();
                DMatrix::from_fn(n, times.len(), |i, k| (grid[i] - speed * times[k]).sin())
            }
            SyntheticKind::HarmonicLatent { omega, identity_lift } => {
                let lift = if *identity_lift {
                    DMatrix::identity(n, 2)
                } else {
                    random_orthonormal(n, 2, self.seed)
                };
                let latent = DMatrix::from_fn(2, times.len(), |r, k| {
                    let phase = omega * times[k];
                    if r == 0 {
                        phase.cos()
                    } else {
                        phase.sin()
                    }
                });
                lift * latent
            }
            SyntheticKind::LinearSystem => {
                let steps = times
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let s = (t - self.t_start) / self.dt;
                        let r = s.round();
                        if r < 0.0 || (s - r).abs() > 1e-9 * s.abs().max(1.0) {
                            Err(RomError::arg(format!(
                                "linear system is only defined on its grid; time {k} ({t}) is off-grid"
                            )))
                        } else {
                            Ok(r as usize)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (a, v0) = linear_system(n, self.seed)?;
                let last = *steps.last().expect("at least two times");
                let mut states = Vec::with_capacity(last + 1);
                let mut v = v0;
                for _ in 0..=last {
                    let next = &a * &v;
                    states.push(std::mem::replace(&mut v, next));
                }
                DMatrix::from_fn(n, times.len(), |i, k| states[steps[k]][i])
            }
        };
        SnapshotSet::new(data, times.to_vec(), self.component.clone())
    }
}

/// Seeded system matrix with spectral radius one and its initial state.
pub fn linear_system(n: usize, seed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let radius = g.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max);
    if !(radius > 0.0) {
        return Err(RomError::numerical("random system matrix has zero spectral radius"));
    }
    let v0 = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    Ok((g / radius, v0))
}

/// Seeded `n x k` matrix with orthonormal columns (Gram-Schmidt on Gaussian
/// columns via a QR factorization).
pub fn random_orthonormal(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    q.columns(0, k).into_owned()
}
