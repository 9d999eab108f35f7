//! Proper orthogonal decomposition: thin SVD of centered snapshots, rank or
//! energy truncation, projection onto the reduced basis and reconstruction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Result, RomError};
use crate::snapshot::{CenteredSet, SnapshotSet};

pub const POD_MAGIC: &[u8; 4] = b"POD1";

/// Singular values at or below this fraction of the largest are treated as
/// numerically zero and dropped from the factorization.
pub const RANK_THRESHOLD: f64 = 1e-12;

/// Thin SVD `S = left * diag(singular) * right^T` restricted to the numerical
/// rank of `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    left: DMatrix<f64>,
    singular: Vec<f64>,
    right: DMatrix<f64>,
}

impl ThinSvd {
    /// Assembles a factorization from parts, checking shapes and that the
    /// singular values are positive and nonincreasing.
    pub fn from_parts(left: DMatrix<f64>, singular: Vec<f64>, right: DMatrix<f64>) -> Result<Self> {
        check_singular(&singular)?;
        let r = singular.len();
        if left.ncols() != r || right.ncols() != r {
            return Err(RomError::arg(format!(
                "factor shapes {:?} / {:?} do not match {r} singular values",
                left.shape(),
                right.shape()
            )));
        }
        Ok(Self { left, singular, right })
    }

    pub fn left(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn singular(&self) -> &[f64] {
        &self.singular
    }

    pub fn right(&self) -> &DMatrix<f64> {
        &self.right
    }

    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    /// Rank-`m` reconstruction `left_m * diag(singular_m) * right_m^T`.
    pub fn low_rank(&self, m: usize) -> DMatrix<f64> {
        let m = m.min(self.rank());
        let mut scaled = self.left.columns(0, m).into_owned();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.singular[j];
        }
        scaled * self.right.columns(0, m).transpose()
    }
}

fn check_singular(singular: &[f64]) -> Result<()> {
    if singular.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(RomError::arg("singular values must be finite and positive"));
    }
    if let Some(k) = singular.windows(2).position(|w| w[1] > w[0]) {
        return Err(RomError::arg(format!(
            "singular values must be nonincreasing (index {} exceeds its predecessor)",
            k + 1
        )));
    }
    Ok(())
}

/// Thin SVD of an arbitrary matrix with the deterministic sign convention:
/// the largest-magnitude entry of each left vector (lowest index on ties) is
/// nonnegative.
pub fn thin_svd_matrix(matrix: &DMatrix<f64>) -> Result<ThinSvd> {
    let (n, m) = matrix.shape();
    if n == 0 || m == 0 {
        return Err(RomError::arg("cannot factor an empty matrix"));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(RomError::numerical("matrix contains non-finite values"));
    }
    let a = faer::Mat::<f64>::from_fn(n, m, |i, j| matrix[(i, j)]);
    let svd = a
        .thin_svd()
        .map_err(|e| RomError::numerical(format!("SVD did not converge: {e:?}")))?;
    let k = svd.S().dim();
    let u = DMatrix::from_fn(n, k, |i, j| svd.U()[(i, j)]);
    let v_t = DMatrix::from_fn(k, m, |i, j| svd.V()[(j, i)]);
    let sv = DVector::from_fn(k, |j, _| svd.S()[j]);
    let residual = (&u * DMatrix::from_diagonal(&sv) * &v_t - matrix).norm();
    if !(residual <= 1e-10 * matrix.norm()) {
        return Err(RomError::numerical(format!(
            "SVD reconstruction residual {residual:.3e} is too large"
        )));
    }

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let top = sv[order[0]];
    if !(top > 0.0) {
        return Err(RomError::numerical("matrix is identically zero"));
    }
    let keep: Vec<usize> = order.into_iter().filter(|&k| sv[k] > RANK_THRESHOLD * top).collect();

    let mut left = u.select_columns(keep.iter());
    let mut right = v_t.select_rows(keep.iter()).transpose();
    let singular: Vec<f64> = keep.iter().map(|&k| sv[k]).collect();
    for j in 0..keep.len() {
        let mut pivot = 0;
        for i in 1..n {
            if left[(i, j)].abs() > left[(pivot, j)].abs() {
                pivot = i;
            }
        }
        if left[(pivot, j)] < 0.0 {
            left.column_mut(j).neg_mut();
            right.column_mut(j).neg_mut();
        }
    }
    ThinSvd::from_parts(left, singular, right)
}

pub fn thin_svd(centered: &CenteredSet) -> Result<ThinSvd> {
    thin_svd_matrix(centered.deviations())
}

/// Cumulative energy fractions `sum_{j<=i} s_j^2 / sum_j s_j^2`.
pub fn cumulative_energy(singular: &[f64]) -> Result<Vec<f64>> {
    if singular.is_empty() {
        return Err(RomError::arg("no singular values"));
    }
    check_singular(singular)?;
    let total: f64 = singular.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    let mut out: Vec<f64> = singular
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect();
    *out.last_mut().expect("nonempty") = 1.0;
    Ok(out)
}

pub fn energy_spectrum(svd: &ThinSvd) -> Vec<f64> {
    cumulative_energy(svd.singular()).expect("ThinSvd holds valid singular values")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Keep the leading `m` modes.
    Rank(usize),
    /// Keep the fewest modes whose discarded energy fraction is at most `tau`.
    Energy(f64),
}

/// Smallest `m` with `sum_{i>m} s_i^2 / sum_i s_i^2 <= tau`.
pub fn energy_rank(singular: &[f64], tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(RomError::arg(format!("energy tolerance {tau} must lie in (0, 1)")));
    }
    check_singular(singular)?;
    let total: f64 = singular.iter().map(|s| s * s).sum();
    // residual sums from the tail avoid cancellation in 1 - cumulative
    let mut tail = vec![0.0; singular.len() + 1];
    for i in (0..singular.len()).rev() {
        tail[i] = tail[i + 1] + singular[i] * singular[i];
    }
    Ok((1..=singular.len())
        .find(|&m| tail[m] / total <= tau)
        .unwrap_or(singular.len()))
}

/// Truncated POD basis with the temporal mean it was computed around.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    modes: DMatrix<f64>,
    singular: Vec<f64>,
    mean: DVector<f64>,
    tolerance_used: Option<f64>,
}

pub fn truncate(svd: &ThinSvd, criterion: Truncation, mean: &DVector<f64>) -> Result<PodBasis> {
    if mean.len() != svd.left().nrows() {
        return Err(RomError::arg(format!(
            "mean has length {} but modes have {} rows",
            mean.len(),
            svd.left().nrows()
        )));
    }
    let (m, tolerance_used) = match criterion {
        Truncation::Rank(m) => {
            if m < 1 || m > svd.rank() {
                return Err(RomError::arg(format!(
                    "rank {m} outside 1..={} available modes",
                    svd.rank()
                )));
            }
            (m, None)
        }
        Truncation::Energy(tau) => (energy_rank(svd.singular(), tau)?, Some(tau)),
    };
    Ok(PodBasis {
        modes: svd.left().columns(0, m).into_owned(),
        singular: svd.singular()[..m].to_vec(),
        mean: mean.clone(),
        tolerance_used,
    })
}

impl PodBasis {
    pub fn from_parts(modes: DMatrix<f64>, singular: Vec<f64>, mean: DVector<f64>) -> Result<Self> {
        if modes.ncols() != singular.len() || modes.nrows() != mean.len() {
            return Err(RomError::arg(format!(
                "basis of shape {:?} inconsistent with {} singular values and mean of length {}",
                modes.shape(),
                singular.len(),
                mean.len()
            )));
        }
        check_singular(&singular)?;
        Ok(Self {
            modes,
            singular,
            mean,
            tolerance_used: None,
        })
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn singular(&self) -> &[f64] {
        &self.singular
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn mesh_size(&self) -> usize {
        self.modes.nrows()
    }

    pub fn tolerance_used(&self) -> Option<f64> {
        self.tolerance_used
    }

    /// Modal coefficients `Z = modes^T * deviations`.
    pub fn project(&self, centered: &CenteredSet) -> Result<LatentTrajectory> {
        if centered.mesh_size() != self.mesh_size() {
            return Err(RomError::arg(format!(
                "snapshots have {} rows but the basis has {}",
                centered.mesh_size(),
                self.mesh_size()
            )));
        }
        let coeffs = self.modes.tr_mul(centered.deviations());
        LatentTrajectory::new(coeffs, centered.times().to_vec())
    }

    /// Projects raw snapshots after removing this basis' mean (not the mean of
    /// `set` itself).
    pub fn project_snapshots(&self, set: &SnapshotSet) -> Result<LatentTrajectory> {
        if set.mesh_size() != self.mesh_size() {
            return Err(RomError::arg(format!(
                "snapshots have {} rows but the basis has {}",
                set.mesh_size(),
                self.mesh_size()
            )));
        }
        let mut dev = set.data().clone();
        for mut col in dev.column_iter_mut() {
            col -= &self.mean;
        }
        LatentTrajectory::new(self.modes.tr_mul(&dev), set.times().to_vec())
    }

    /// `v^n = mean + modes * z^n` for every column.
    pub fn reconstruct(&self, traj: &LatentTrajectory, component: &str) -> Result<SnapshotSet> {
        if traj.dim() != self.rank() {
            return Err(RomError::arg(format!(
                "trajectory has {} coefficients but the basis has {} modes",
                traj.dim(),
                self.rank()
            )));
        }
        let mut data = &self.modes * traj.coeffs();
        for mut col in data.column_iter_mut() {
            col += &self.mean;
        }
        SnapshotSet::new(data, traj.times().to_vec(), component)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out, POD_MAGIC)?;
        w.len32(self.mesh_size())?;
        w.len32(self.rank())?;
        w.f64s(self.mean.as_slice())?;
        w.f64s(&self.singular)?;
        w.f64s(self.modes.as_slice())?;
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, POD_MAGIC, "POD1")?;
        let n = r.len32()?;
        let m = r.len32()?;
        let mean = DVector::from_vec(r.f64s(n)?);
        let singular = r.f64s(m)?;
        let modes = DMatrix::from_vec(n, m, r.f64s(n * m)?);
        r.finish()?;
        Self::from_parts(modes, singular, mean).map_err(|e| RomError::Format(format!("POD1: {e}")))
    }
}

/// Time-indexed modal coefficient vectors, one column per time.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    coeffs: DMatrix<f64>,
    times: Vec<f64>,
}

impl LatentTrajectory {
    pub fn new(coeffs: DMatrix<f64>, times: Vec<f64>) -> Result<Self> {
        if coeffs.ncols() != times.len() {
            return Err(RomError::arg(format!(
                "{} coefficient columns but {} times",
                coeffs.ncols(),
                times.len()
            )));
        }
        if let Some(idx) = coeffs.iter().position(|v| !v.is_finite()) {
            return Err(RomError::numerical(format!(
                "non-finite coefficient at mode {}, time index {}",
                idx % coeffs.nrows().max(1),
                idx / coeffs.nrows().max(1)
            )));
        }
        Ok(Self { coeffs, times })
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.coeffs.column(k).into_owned()
    }

    /// Stored on disk as an SNP1 container labelled `latent`.
    pub fn to_snapshots(&self) -> Result<SnapshotSet> {
        SnapshotSet::new(self.coeffs.clone(), self.times.clone(), "latent")
    }

    pub fn from_snapshots(set: &SnapshotSet) -> Result<Self> {
        Self::new(set.data().clone(), set.times().to_vec())
    }
}
