//! POD-RBF latent dynamics: interpolate the latent time derivative with a
//! Matérn C0 radial basis and march it with forward Euler.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Result, RomError};
use crate::pod::LatentTrajectory;
use crate::snapshot::uniform_step;

pub const RBF_MAGIC: &[u8; 4] = b"RBF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `phi(r) = exp(-c r)`
    MaternC0,
}

impl Kernel {
    fn id(self) -> u32 {
        match self {
            Kernel::MaternC0 => 0,
        }
    }

    fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Kernel::MaternC0),
            other => Err(RomError::Format(format!("RBF1: unknown kernel id {other}"))),
        }
    }

    #[inline]
    fn phi(self, r: f64, c: f64) -> f64 {
        match self {
            Kernel::MaternC0 => (-c * r).exp(),
        }
    }
}

/// Matérn C0 kernel value `exp(-c r)`.
pub fn kernel_eval(r: f64, c: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(RomError::arg(format!("kernel distance {r} must be nonnegative")));
    }
    if !(c > 0.0) {
        return Err(RomError::arg(format!("shape factor {c} must be positive")));
    }
    Ok(Kernel::MaternC0.phi(r, c))
}

/// Forward-difference derivative targets `g^k = (z^{k+1} - z^k) / dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeTable {
    pub values: DMatrix<f64>,
    pub times: Vec<f64>,
}

pub fn build_derivatives(traj: &LatentTrajectory) -> Result<DerivativeTable> {
    if traj.len() < 2 {
        return Err(RomError::arg("need at least two snapshots for a derivative"));
    }
    let dt = uniform_step(traj.times())?;
    let z = traj.coeffs();
    let k = traj.len() - 1;
    let values = DMatrix::from_fn(z.nrows(), k, |j, n| (z[(j, n + 1)] - z[(j, n)]) / dt);
    Ok(DerivativeTable {
        values,
        times: traj.times()[..k].to_vec(),
    })
}

#[inline]
fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfModel {
    centers: DMatrix<f64>,
    coefficients: DMatrix<f64>,
    shape_factor: f64,
    kernel: Kernel,
    min_pivot: f64,
    regularization: f64,
}

/// Fits the interpolant over the first `M - 1` snapshots (the last one has no
/// forward difference).
pub fn fit(traj: &LatentTrajectory, shape_factor: f64) -> Result<RbfModel> {
    if !(shape_factor > 0.0 && shape_factor.is_finite()) {
        return Err(RomError::arg(format!("shape factor {shape_factor} must be positive")));
    }
    let table = build_derivatives(traj)?;
    let k = table.values.ncols();
    let centers = traj.coeffs().columns(0, k).into_owned();
    let kernel = Kernel::MaternC0;

    let mut a = DMatrix::zeros(k, k);
    for n in 0..k {
        a[(n, n)] = 1.0;
        for q in 0..n {
            let r = distance(centers.column(n).as_slice(), centers.column(q).as_slice());
            if r == 0.0 {
                return Err(RomError::Fit(format!(
                    "duplicate interpolation centers at snapshot indices {q} and {n}"
                )));
            }
            let v = kernel.phi(r, shape_factor);
            a[(n, q)] = v;
            a[(q, n)] = v;
        }
    }

    let (chol, regularization) = match Cholesky::new(a.clone()) {
        Some(c) => (c, 0.0),
        None => {
            let shift = 1e-10 * a.trace() / k as f64;
            let mut shifted = a;
            for n in 0..k {
                shifted[(n, n)] += shift;
            }
            let c = Cholesky::new(shifted).ok_or_else(|| {
                RomError::numerical(format!(
                    "interpolation matrix is not positive definite even with diagonal shift {shift:e}"
                ))
            })?;
            (c, shift)
        }
    };
    let min_pivot = chol.l_dirty().diagonal().min();
    // solve all components at once: A * X = G^T, X = alpha^T
    let rhs = table.values.transpose();
    let alpha_t = chol.solve(&rhs);
    Ok(RbfModel {
        centers,
        coefficients: alpha_t.transpose(),
        shape_factor,
        kernel,
        min_pivot,
        regularization,
    })
}

impl RbfModel {
    pub fn from_parts(centers: DMatrix<f64>, coefficients: DMatrix<f64>, shape_factor: f64) -> Result<Self> {
        if centers.shape() != coefficients.shape() {
            return Err(RomError::arg(format!(
                "centers {:?} and coefficients {:?} differ in shape",
                centers.shape(),
                coefficients.shape()
            )));
        }
        if !(shape_factor > 0.0) {
            return Err(RomError::arg("shape factor must be positive"));
        }
        Ok(Self {
            centers,
            coefficients,
            shape_factor,
            kernel: Kernel::MaternC0,
            min_pivot: f64::NAN,
            regularization: 0.0,
        })
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn shape_factor(&self) -> f64 {
        self.shape_factor
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn dim(&self) -> usize {
        self.centers.nrows()
    }

    pub fn num_centers(&self) -> usize {
        self.centers.ncols()
    }

    /// Smallest diagonal entry of the Cholesky factor from the fit (`NaN` for
    /// models that were not fitted in this process).
    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    /// Diagonal shift used when the plain factorization failed, zero otherwise.
    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    /// `F_j(z) = sum_k alpha_{j,k} phi(|z - center_k|)`.
    pub fn eval_dynamics(&self, z: &[f64]) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(RomError::arg(format!(
                "state has {} components, model expects {}",
                z.len(),
                self.dim()
            )));
        }
        let mut out = DVector::zeros(self.dim());
        self.eval_into(z, out.as_mut_slice());
        Ok(out)
    }

    fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, center) in self.centers.column_iter().enumerate() {
            let w = self.kernel.phi(distance(z, center.as_slice()), self.shape_factor);
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.coefficients[(j, k)] * w;
            }
        }
    }

    /// Forward Euler `z^{n+1} = z^n + (t^{n+1} - t^n) F(z^n)`.
    pub fn forecast(&self, z0: &[f64], times: &[f64]) -> Result<LatentTrajectory> {
        if z0.len() != self.dim() {
            return Err(RomError::arg(format!(
                "initial state has {} components, model expects {}",
                z0.len(),
                self.dim()
            )));
        }
        if times.is_empty() {
            return Err(RomError::arg("forecast needs at least one time"));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] >= w[0])) {
            return Err(RomError::arg(format!(
                "forecast times must be increasing (index {})",
                k + 1
            )));
        }
        let m = self.dim();
        let mut out = DMatrix::zeros(m, times.len());
        out.column_mut(0).copy_from_slice(z0);
        let mut z = z0.to_vec();
        let mut f = vec![0.0; m];
        for n in 1..times.len() {
            let h = times[n] - times[n - 1];
            self.eval_into(&z, &mut f);
            for (zi, fi) in z.iter_mut().zip(&f) {
                *zi += h * fi;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(RomError::numerical(format!("forecast diverged at time index {n}")));
            }
            out.column_mut(n).copy_from_slice(&z);
        }
        LatentTrajectory::new(out, times.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out, RBF_MAGIC)?;
        w.len32(self.dim())?;
        w.len32(self.num_centers())?;
        w.f64(self.shape_factor)?;
        w.u32(self.kernel.id())?;
        w.f64s(self.centers.as_slice())?;
        w.f64s(self.coefficients.as_slice())?;
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, RBF_MAGIC, "RBF1")?;
        let m = r.len32()?;
        let k = r.len32()?;
        let c = r.f64()?;
        let kernel = Kernel::from_id(r.u32()?)?;
        let centers = DMatrix::from_vec(m, k, r.f64s(m * k)?);
        let coefficients = DMatrix::from_vec(m, k, r.f64s(m * k)?);
        r.finish()?;
        let mut model =
            Self::from_parts(centers, coefficients, c).map_err(|e| RomError::Format(format!("RBF1: {e}")))?;
        model.kernel = kernel;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rows: &[&[f64]], dt: f64) -> LatentTrajectory {
        let m = rows.len();
        let n = rows[0].len();
        let coeffs = DMatrix::from_fn(m, n, |j, k| rows[j][k]);
        LatentTrajectory::new(coeffs, (0..n).map(|k| k as f64 * dt).collect()).unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_eval(0.0, 3.0).unwrap(), 1.0);
        assert_eq!(kernel_eval(0.0, 0.01).unwrap(), 1.0);
        assert!((kernel_eval(2f64.ln(), 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(kernel_eval(-1.0, 1.0), Err(RomError::Argument(_))));
        assert!(kernel_eval(1.0, 0.0).is_err());
    }

    #[test]
    fn derivative_targets() {
        let d = build_derivatives(&traj(&[&[2.0, 2.0, 2.0]], 0.3)).unwrap();
        assert!(d.values.iter().all(|&g| g == 0.0));

        let d = build_derivatives(&traj(&[&[0.0, 0.5, 1.0, 1.5]], 0.5)).unwrap();
        assert_eq!(d.values.ncols(), 3);
        assert!(d.values.iter().all(|&g| (g - 1.0).abs() < 1e-15));

        // z^k = (0.1 k)^2 on dt = 0.1 gives g^k = 0.1 (2k + 1)
        let z: Vec<f64> = (0..5).map(|k| (0.1 * k as f64).powi(2)).collect();
        let d = build_derivatives(&traj(&[&z], 0.1)).unwrap();
        for k in 0..4 {
            let oracle = ((0.1 * (k + 1) as f64).powi(2) - (0.1 * k as f64).powi(2)) / 0.1;
            assert!((d.values[(0, k)] - oracle).abs() < 1e-14);
            assert!((d.values[(0, k)] - 0.1 * (2 * k + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn nonuniform_times_rejected() {
        let t = LatentTrajectory::new(DMatrix::zeros(1, 3), vec![0.0, 1.0, 3.0]).unwrap();
        assert!(matches!(build_derivatives(&t), Err(RomError::Argument(_))));
    }

    #[test]
    fn single_center() {
        let model = fit(&traj(&[&[1.0, 3.0]], 0.5), 0.7).unwrap();
        assert_eq!(model.num_centers(), 1);
        assert!((model.coefficients()[(0, 0)] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn two_center_closed_form() {
        // centers 0 and d, targets g = [1, 0]: z = [0, d, d] with dt = d
        let (d, c) = (0.8, 1.3);
        let model = fit(&traj(&[&[0.0, d, d]], d), c).unwrap();
        let e = (-c * d).exp();
        let denom = 1.0 - (-2.0 * c * d).exp();
        assert!((model.coefficients()[(0, 0)] - 1.0 / denom).abs() < 1e-14);
        assert!((model.coefficients()[(0, 1)] + e / denom).abs() < 1e-14);

        // midpoint: equal kernel weight exp(-c d / 2) from both centers
        let mid = model.eval_dynamics(&[d / 2.0]).unwrap()[0];
        let oracle = (1.0 - e) / denom * (-c * d / 2.0).exp();
        assert!((mid - oracle).abs() < 1e-14);
    }

    #[test]
    fn duplicate_centers_named() {
        let err = fit(&traj(&[&[0.0, 1.0, 0.0, 2.0]], 1.0), 1.0).unwrap_err();
        match err {
            RomError::Fit(msg) => assert!(msg.contains("0 and 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn far_field_decays() {
        let model = fit(&traj(&[&[0.0, 1.0, 2.0]], 1.0), 1.0).unwrap();
        let v = model.eval_dynamics(&[1000.0]).unwrap()[0];
        assert!(v.abs() < 1e-300);
    }

    #[test]
    fn zero_dynamics_and_zero_step() {
        let model = RbfModel::from_parts(DMatrix::from_element(2, 3, 0.5), DMatrix::zeros(2, 3), 1.0).unwrap();
        let out = model.forecast(&[1.0, -2.0], &[0.0, 0.5, 1.0]).unwrap();
        for k in 0..3 {
            assert_eq!(out.coeffs().column(k).as_slice(), &[1.0, -2.0]);
        }
        let fitted = fit(&traj(&[&[0.0, 1.0, 2.5]], 1.0), 1.0).unwrap();
        let out = fitted.forecast(&[0.3], &[1.0, 1.0]).unwrap();
        assert_eq!(out.coeffs()[(0, 1)], 0.3);
        assert!(fitted.forecast(&[0.3], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn rbf1_round_trip() {
        let model = fit(&traj(&[&[0.0, 1.0, 2.5, 2.0], &[1.0, 0.0, -1.0, 0.5]], 0.1), 0.05).unwrap();
        let mut buf = Vec::new();
        model.write(&mut buf).unwrap();
        let back = RbfModel::read(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.centers(), model.centers());
        assert_eq!(back.coefficients(), model.coefficients());
        assert_eq!(back.shape_factor(), 0.05);
    }
}
