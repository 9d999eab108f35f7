use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::pod::LatentTrajectory;

use super::solver::{integrate, tape_vjp, DifferentiableField, SolverSpec};

/// Backward reconstruction of the forward state in adjoint mode may drift from
/// the stored forward solution by at most this many tolerance units.
const ADJOINT_MISMATCH: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    BackpropThroughSolver,
    Adjoint,
}

/// Sensitivities of the loss with respect to the initial state, the
/// parameters and a uniform shift of the network's time input.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub state: Vec<f64>,
    pub params: Vec<f64>,
    pub time: f64,
}

impl AdjointState {
    pub fn zeros(state_dim: usize, num_params: usize) -> Self {
        Self {
            state: vec![0.0; state_dim],
            params: vec![0.0; num_params],
            time: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.state.len() + self.params.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat `[state, params, time]` layout.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.state.clone();
        v.extend_from_slice(&self.params);
        v.push(self.time);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub adjoint: AdjointState,
}

fn check_shapes(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(RomError::arg(format!(
            "prediction shape {:?} differs from target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean over all entries of the squared difference.
pub fn loss_mse(pred: &LatentTrajectory, target: &LatentTrajectory) -> Result<f64> {
    check_shapes(pred.coeffs(), target.coeffs())?;
    let n = pred.coeffs().len();
    if n == 0 {
        return Err(RomError::arg("empty trajectories"));
    }
    Ok((pred.coeffs() - target.coeffs()).norm_squared() / n as f64)
}

/// Full-trajectory MSE of the first `target.nrows()` state components and its
/// gradient.
pub fn loss_and_grad<F: DifferentiableField + ?Sized>(
    field: &F,
    z0: &[f64],
    times: &[f64],
    target: &DMatrix<f64>,
    solver: &SolverSpec,
    mode: GradientMode,
) -> Result<Gradient> {
    let d = field.dim();
    let m = target.nrows();
    if z0.len() != d {
        return Err(RomError::arg(format!(
            "initial state has {} components, field has {d}",
            z0.len()
        )));
    }
    if m == 0 || m > d {
        return Err(RomError::arg(format!("target has {m} rows, state dimension is {d}")));
    }
    if target.ncols() != times.len() {
        return Err(RomError::arg(format!(
            "target has {} columns but {} times",
            target.ncols(),
            times.len()
        )));
    }
    if times.len() > 1 && times[1] < times[0] {
        return Err(RomError::arg("training times must be increasing"));
    }
    let mut rhs = |t: f64, z: &[f64], out: &mut [f64]| field.eval(t, z, out);
    let tape = integrate(&mut rhs, z0, times, solver, mode == GradientMode::BackpropThroughSolver)?;

    let scale = 2.0 / (m * times.len()) as f64;
    let mut loss = 0.0;
    let mut out_bar = Vec::with_capacity(times.len());
    for (k, state) in tape.states.iter().enumerate() {
        let mut cot = vec![0.0; d];
        for i in 0..m {
            let r = state[i] - target[(i, k)];
            loss += r * r;
            cot[i] = scale * r;
        }
        out_bar.push(cot);
    }
    loss /= (m * times.len()) as f64;

    let adjoint = match mode {
        GradientMode::BackpropThroughSolver => {
            let mut params = vec![0.0; field.num_params()];
            let (state, time) = tape_vjp(field, solver, &tape, &out_bar, &mut params)?;
            AdjointState { state, params, time }
        }
        GradientMode::Adjoint => adjoint_sweep(field, times, &tape.states, &out_bar, solver)?,
    };
    Ok(Gradient { loss, adjoint })
}

/// Gradient of the trajectory MSE with respect to the network parameters.
pub fn grad<F: DifferentiableField + ?Sized>(
    field: &F,
    z0: &[f64],
    times: &[f64],
    target: &DMatrix<f64>,
    solver: &SolverSpec,
    mode: GradientMode,
) -> Result<Vec<f64>> {
    Ok(loss_and_grad(field, z0, times, target, solver, mode)?.adjoint.params)
}

/// Integrates `[z, a, g_p, g_t]` backwards interval by interval, adding the
/// loss cotangent at every observation and resetting `z` to the forward value.
fn adjoint_sweep<F: DifferentiableField + ?Sized>(
    field: &F,
    times: &[f64],
    states: &[Vec<f64>],
    out_bar: &[Vec<f64>],
    solver: &SolverSpec,
) -> Result<AdjointState> {
    let d = field.dim();
    let p = field.num_params();
    let n = times.len();
    let mut aug = vec![0.0; 2 * d + p + 1];
    aug[..d].copy_from_slice(&states[n - 1]);
    aug[d..2 * d].copy_from_slice(&out_bar[n - 1]);

    let mut rhs = |t: f64, s: &[f64], ds: &mut [f64]| -> Result<()> {
        let (z, rest) = s.split_at(d);
        let a = &rest[..d];
        let (dz, tail) = ds.split_at_mut(d);
        field.eval(t, z, dz)?;
        tail.fill(0.0);
        let (da, tail) = tail.split_at_mut(d);
        let (dp, dt) = tail.split_at_mut(p);
        dt[0] = -field.vjp(t, z, a, da, dp)?;
        da.iter_mut().for_each(|v| *v = -*v);
        dp.iter_mut().for_each(|v| *v = -*v);
        Ok(())
    };

    for k in (1..n).rev() {
        let tape = integrate(&mut rhs, &aug, &[times[k], times[k - 1]], solver, false)?;
        aug = tape.states.into_iter().nth(1).expect("two outputs");
        if let SolverSpec::Dopri5 { rtol, atol, .. } = *solver {
            let fwd = &states[k - 1];
            let worst = aug[..d]
                .iter()
                .zip(fwd)
                .map(|(b, f)| (b - f).abs() / (atol + rtol * f.abs()))
                .fold(0.0, f64::max);
            if !(worst <= ADJOINT_MISMATCH) {
                return Err(RomError::Solver(format!(
                    "adjoint backward state deviates from the forward dense output at t = {} \
                     ({worst:.3e} tolerance units)",
                    times[k - 1]
                )));
            }
        }
        aug[..d].copy_from_slice(&states[k - 1]);
        for (a, c) in aug[d..2 * d].iter_mut().zip(&out_bar[k - 1]) {
            *a += c;
        }
    }
    Ok(AdjointState {
        state: aug[d..2 * d].to_vec(),
        params: aug[2 * d..2 * d + p].to_vec(),
        time: aug[2 * d + p],
    })
}
