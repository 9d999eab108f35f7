//! Exact dynamic mode decomposition on raw (uncentered) snapshots.
//!
//! The best-fit linear map between the shifted snapshot matrices is never
//! formed. Instead it is projected onto the leading `r` POD modes of the
//! first matrix, eigendecomposed there, and lifted back to full-order modes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::container::{Reader, Writer};
use crate::error::{Result, RomError};
use crate::pod::{thin_svd_matrix, RANK_THRESHOLD};
use crate::snapshot::{uniform_step, SnapshotSet};

pub const DMD_MAGIC: &[u8; 4] = b"DMD1";

#[derive(Debug, Clone, PartialEq)]
pub struct DmdModel {
    modes: DMatrix<Complex64>,
    eigenvalues: Vec<Complex64>,
    amplitudes: Vec<Complex64>,
    dt: f64,
    t0: f64,
    component: String,
}

/// Continuous-time growth rate and angular frequency of one DMD eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPair {
    pub growth_rate: f64,
    pub frequency: f64,
}

pub fn dmd_fit(set: &SnapshotSet, rank: usize) -> Result<DmdModel> {
    let n = set.mesh_size();
    let m = set.len();
    if m < 2 {
        return Err(RomError::arg("DMD needs at least two snapshots"));
    }
    let max_rank = n.min(m - 1);
    if rank < 1 || rank > max_rank {
        return Err(RomError::arg(format!(
            "DMD rank {rank} outside 1..={max_rank} (min of {n} rows and {} snapshot pairs)",
            m - 1
        )));
    }
    let dt = uniform_step(set.times())?;
    let data = set.data();
    let x = data.columns(0, m - 1).into_owned();
    let x_next = data.columns(1, m - 1);

    let svd = thin_svd_matrix(&x)?;
    if svd.rank() < rank {
        return Err(RomError::numerical(format!(
            "rank-deficient snapshots: singular value {rank} is below {RANK_THRESHOLD:e} of the largest; \
             use a rank of at most {}",
            svd.rank()
        )));
    }
    let u = svd.left().columns(0, rank);
    let v = svd.right().columns(0, rank);
    let mut v_sinv = v.into_owned();
    for (j, mut col) in v_sinv.column_iter_mut().enumerate() {
        col /= svd.singular()[j];
    }
    // X' V S^-1, shared by the reduced operator and the exact modes
    let lifted = x_next * &v_sinv;
    let reduced = u.tr_mul(&lifted);

    let (eigenvalues, w) = eig_general(&reduced)?;
    let lifted_c = lifted.map(|x| Complex64::new(x, 0.0));
    let mut modes = lifted_c * w;
    for mut col in modes.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col.unscale_mut(norm);
        }
    }

    let v0 = data.column(0).map(|x| Complex64::new(x, 0.0));
    let amplitudes = least_squares(&modes, &v0)?;

    // stable reporting order: amplitude magnitude, conjugate pairs adjacent
    let mut key: Vec<f64> = amplitudes.iter().map(|b| b.norm()).collect();
    for i in 0..rank {
        if let Some(j) = conjugate_of(&eigenvalues, i) {
            let k = key[i].max(key[j]);
            key[i] = k;
            key[j] = k;
        }
    }
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| {
        key[b]
            .total_cmp(&key[a])
            .then(eigenvalues[b].im.total_cmp(&eigenvalues[a].im))
            .then(eigenvalues[b].re.total_cmp(&eigenvalues[a].re))
            .then(a.cmp(&b))
    });

    Ok(DmdModel {
        modes: modes.select_columns(order.iter()),
        eigenvalues: order.iter().map(|&k| eigenvalues[k]).collect(),
        amplitudes: order.iter().map(|&k| amplitudes[k]).collect(),
        dt,
        t0: set.times()[0],
        component: set.component().to_string(),
    })
}

fn conjugate_of(values: &[Complex64], i: usize) -> Option<usize> {
    let li = values[i];
    if li.im == 0.0 {
        return None;
    }
    values
        .iter()
        .enumerate()
        .position(|(j, lj)| j != i && lj.re == li.re && lj.im == -li.im)
}

fn least_squares(a: &DMatrix<Complex64>, b: &DVector<Complex64>) -> Result<Vec<Complex64>> {
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().map(|d| d.norm()).fold(0.0, f64::max);
    if let Some(j) = r.diagonal().iter().position(|d| !(d.norm() > RANK_THRESHOLD * scale)) {
        return Err(RomError::numerical(format!(
            "DMD modes are linearly dependent (column {j}); amplitudes are not unique"
        )));
    }
    let rhs = qr.q().adjoint() * b;
    let x = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| RomError::numerical("amplitude solve failed"))?;
    Ok(x.iter().copied().collect())
}

/// Eigenvalues and unit eigenvectors of a general real square matrix.
///
/// Eigenvalues come from the real Schur form; each eigenvector is obtained by
/// inverse iteration with a slightly perturbed shift. Complex conjugate pairs
/// receive exactly conjugate vectors.
pub fn eig_general(a: &DMatrix<f64>) -> Result<(Vec<Complex64>, DMatrix<Complex64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(RomError::arg("eigendecomposition needs a square matrix"));
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| RomError::numerical("Schur decomposition did not converge"))?;
    let values: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    let ac = a.map(|x| Complex64::new(x, 0.0));
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let mut vectors = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        if values[i].im < 0.0 && conjugate_of(&values, i).is_some() {
            continue; // conjugate of the partner, filled below
        }
        let vec = inverse_iteration(&ac, values[i], scale)?;
        vectors.set_column(i, &vec);
    }
    for i in 0..n {
        if values[i].im < 0.0 {
            if let Some(j) = conjugate_of(&values, i) {
                let conj = vectors.column(j).map(|z| z.conj());
                vectors.set_column(i, &conj);
            }
        }
    }
    Ok((values, vectors))
}

fn inverse_iteration(a: &DMatrix<Complex64>, lambda: Complex64, scale: f64) -> Result<DVector<Complex64>> {
    let n = a.nrows();
    let mut x = DVector::from_fn(n, |i, _| Complex64::new(1.0 + i as f64 / n as f64, 0.0));
    x.unscale_mut(x.norm());
    let mut eps = 1e-13;
    for _ in 0..8 {
        let shift = lambda + Complex64::new(eps * scale, eps * scale);
        let mut shifted = a.clone();
        for k in 0..n {
            shifted[(k, k)] -= shift;
        }
        let lu = shifted.lu();
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&x) {
                Some(y) if y.iter().all(|z| z.re.is_finite() && z.im.is_finite()) => {
                    let norm = y.norm();
                    if !(norm > 0.0) {
                        ok = false;
                        break;
                    }
                    x = y.unscale(norm);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            // fix the phase: largest entry real and positive
            let pivot = (0..n)
                .max_by(|&p, &q| x[p].norm().total_cmp(&x[q].norm()).then(q.cmp(&p)))
                .expect("nonempty");
            let phase = x[pivot] / x[pivot].norm();
            return Ok(x.map(|z| z / phase));
        }
        eps *= 100.0;
    }
    Err(RomError::numerical(format!(
        "inverse iteration failed for eigenvalue {lambda}"
    )))
}

impl DmdModel {
    pub fn modes(&self) -> &DMatrix<Complex64> {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mesh_size(&self) -> usize {
        self.modes.nrows()
    }

    /// `v(t) = Re(Phi diag(lambda^((t - t0)/dt)) b)`.
    pub fn forecast(&self, times: &[f64]) -> Result<SnapshotSet> {
        if let Some(k) = times.iter().position(|&t| t < self.t0 - 1e-9 * self.dt) {
            return Err(RomError::arg(format!(
                "forecast time {} (index {k}) precedes the fit start {}",
                times[k], self.t0
            )));
        }
        let n = self.mesh_size();
        let mut data = DMatrix::zeros(n, times.len());
        for (k, &t) in times.iter().enumerate() {
            let s = (t - self.t0) / self.dt;
            let mut coeff = Vec::with_capacity(self.rank());
            for (lambda, b) in self.eigenvalues.iter().zip(&self.amplitudes) {
                coeff.push(b * power(*lambda, s)?);
            }
            for i in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, c) in coeff.iter().enumerate() {
                    acc += self.modes[(i, j)] * c;
                }
                data[(i, k)] = acc.re;
            }
        }
        SnapshotSet::new(data, times.to_vec(), self.component.clone())
    }

    /// `omega_i = log(lambda_i) / dt` as (growth rate, frequency) pairs.
    pub fn spectrum(&self) -> Result<Vec<SpectralPair>> {
        self.eigenvalues
            .iter()
            .map(|l| {
                if l.norm() == 0.0 {
                    return Err(RomError::numerical("zero eigenvalue has no logarithm"));
                }
                let w = l.ln() / self.dt;
                Ok(SpectralPair {
                    growth_rate: w.re,
                    frequency: w.im,
                })
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out, DMD_MAGIC)?;
        w.len32(self.mesh_size())?;
        w.len32(self.rank())?;
        w.f64(self.dt)?;
        w.f64(self.t0)?;
        w.label(&self.component)?;
        let interleave =
            |zs: &mut dyn Iterator<Item = &Complex64>| -> Vec<f64> { zs.flat_map(|z| [z.re, z.im]).collect() };
        w.f64s(&interleave(&mut self.modes.iter()))?;
        w.f64s(&interleave(&mut self.eigenvalues.iter()))?;
        w.f64s(&interleave(&mut self.amplitudes.iter()))?;
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, DMD_MAGIC, "DMD1")?;
        let n = r.len32()?;
        let rank = r.len32()?;
        let dt = r.f64()?;
        let t0 = r.f64()?;
        let component = r.label()?;
        let mut complex = |len: usize| -> Result<Vec<Complex64>> {
            Ok(r.f64s(2 * len)?
                .chunks_exact(2)
                .map(|c| Complex64::new(c[0], c[1]))
                .collect())
        };
        let modes = DMatrix::from_vec(n, rank, complex(n * rank)?);
        let eigenvalues = complex(rank)?;
        let amplitudes = complex(rank)?;
        r.finish()?;
        if !(dt > 0.0) {
            return Err(RomError::Format("DMD1: time step must be positive".into()));
        }
        Ok(Self {
            modes,
            eigenvalues,
            amplitudes,
            dt,
            t0,
            component,
        })
    }
}

/// `lambda^s` for real `s >= 0`; integer powers of a zero eigenvalue are
/// allowed, fractional ones are not.
fn power(lambda: Complex64, s: f64) -> Result<Complex64> {
    let rounded = s.round();
    let integral = (s - rounded).abs() <= 1e-9 * s.abs().max(1.0);
    if lambda.norm() == 0.0 {
        return if integral {
            Ok(if rounded == 0.0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            })
        } else {
            Err(RomError::numerical("zero eigenvalue raised to a fractional power"))
        };
    }
    if integral && rounded.abs() <= i32::MAX as f64 {
        return Ok(lambda.powi(rounded as i32));
    }
    Ok((lambda.ln() * s).exp())
}
