//! Explicit Runge-Kutta integrators with an optional tape for reverse-mode
//! differentiation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::pod::LatentTrajectory;

/// Right-hand side `dz/dt = f(t, z)`.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Vector field with parameters and a vector-Jacobian product.
pub trait DifferentiableField: VectorField {
    fn num_params(&self) -> usize;

    /// Adds `cotᵀ ∂f/∂z` to `z_bar` and `cotᵀ ∂f/∂p` to `p_bar`; returns
    /// `cotᵀ ∂f/∂t`.
    fn vjp(&self, t: f64, z: &[f64], cot: &[f64], z_bar: &mut [f64], p_bar: &mut [f64]) -> Result<f64>;
}

fn default_max_steps() -> usize {
    100_000
}

/// Integrator choice. Fixed-step methods take `step` as an upper bound on the
/// sub-step length; without it they take one step per output interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverSpec {
    Euler {
        #[serde(default)]
        step: Option<f64>,
    },
    Midpoint {
        #[serde(default)]
        step: Option<f64>,
    },
    Rk4 {
        #[serde(default)]
        step: Option<f64>,
    },
    Dopri5 {
        rtol: f64,
        atol: f64,
        #[serde(default = "default_max_steps")]
        max_steps: usize,
    },
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec::Rk4 { step: None }
    }
}

impl SolverSpec {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverSpec::Dopri5 {
            rtol,
            atol,
            max_steps: default_max_steps(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverSpec::Euler { .. } => "euler",
            SolverSpec::Midpoint { .. } => "midpoint",
            SolverSpec::Rk4 { .. } => "rk4",
            SolverSpec::Dopri5 { .. } => "dopri5",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverSpec::Euler { step } | SolverSpec::Midpoint { step } | SolverSpec::Rk4 { step } => {
                if let Some(h) = step {
                    if !(h > 0.0 && h.is_finite()) {
                        return Err(RomError::arg(format!("solver step {h} must be positive")));
                    }
                }
            }
            SolverSpec::Dopri5 { rtol, atol, max_steps } => {
                if !(rtol > 0.0 && atol > 0.0 && rtol.is_finite() && atol.is_finite()) {
                    return Err(RomError::arg(format!(
                        "dopri5 tolerances must be positive (rtol {rtol}, atol {atol})"
                    )));
                }
                if max_steps == 0 {
                    return Err(RomError::arg("dopri5 max_steps must be at least 1"));
                }
            }
        }
        Ok(())
    }

    fn tableau(&self) -> Option<&'static Tableau> {
        match self {
            SolverSpec::Euler { .. } => Some(&EULER),
            SolverSpec::Midpoint { .. } => Some(&MIDPOINT),
            SolverSpec::Rk4 { .. } => Some(&RK4),
            SolverSpec::Dopri5 { .. } => None,
        }
    }
}

pub(crate) struct Tableau {
    a: &'static [&'static [f64]],
    b: &'static [f64],
    c: &'static [f64],
}

static EULER: Tableau = Tableau {
    a: &[&[]],
    b: &[1.0],
    c: &[0.0],
};

static MIDPOINT: Tableau = Tableau {
    a: &[&[], &[0.5]],
    b: &[0.0, 1.0],
    c: &[0.0, 0.5],
};

static RK4: Tableau = Tableau {
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    c: &[0.0, 0.5, 0.5, 1.0],
};

// Dormand-Prince 5(4). The seventh stage is the FSAL evaluation at the new
// point and is handled outside the tableau.
static DOPRI: Tableau = Tableau {
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
    ],
    b: &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
    c: &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0],
};

const DOPRI_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

// Dense output weights.
const DOPRI_D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

/// One accepted step: start time, signed length, start state and stage
/// derivatives (seven for dopri5, the last at the end point).
pub(crate) struct StepRecord {
    pub t: f64,
    pub h: f64,
    pub y: Vec<f64>,
    pub k: Vec<Vec<f64>>,
    pub y1: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum OutputRef {
    Initial,
    /// State after the given step.
    End(usize),
    /// Dense output inside the given step.
    Dense {
        step: usize,
        theta: f64,
    },
}

pub(crate) struct Tape {
    pub steps: Vec<StepRecord>,
    pub outputs: Vec<OutputRef>,
    pub states: Vec<Vec<f64>>,
}

fn check_times(times: &[f64]) -> Result<f64> {
    if times.is_empty() {
        return Err(RomError::arg("at least one output time is required"));
    }
    if let Some(k) = times.iter().position(|t| !t.is_finite()) {
        return Err(RomError::arg(format!("output time {k} is not finite")));
    }
    if times.len() == 1 {
        return Ok(1.0);
    }
    let dir = (times[1] - times[0]).signum();
    for (k, w) in times.windows(2).enumerate() {
        if !((w[1] - w[0]) * dir > 0.0) {
            return Err(RomError::arg(format!(
                "output times must be strictly monotone (index {} to {})",
                k,
                k + 1
            )));
        }
    }
    Ok(dir)
}

fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RomError::numerical(format!("solution became non-finite near t = {t}")))
    }
}

fn rk_stages<F>(f: &mut F, tab: &Tableau, t: f64, h: f64, y: &[f64], k1: Option<Vec<f64>>) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let d = y.len();
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(tab.b.len() + 1);
    let mut yi = vec![0.0; d];
    for i in 0..tab.b.len() {
        if i == 0 {
            if let Some(k1) = &k1 {
                k.push(k1.clone());
                continue;
            }
        }
        yi.copy_from_slice(y);
        for (j, &a) in tab.a[i].iter().enumerate() {
            if a != 0.0 {
                for (v, kj) in yi.iter_mut().zip(&k[j]) {
                    *v += h * a * kj;
                }
            }
        }
        let mut ki = vec![0.0; d];
        f(t + tab.c[i] * h, &yi, &mut ki)?;
        k.push(ki);
    }
    Ok(k)
}

fn combine(y: &[f64], h: f64, weights: &[f64], k: &[Vec<f64>]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (w, kj) in weights.iter().zip(k) {
        if *w != 0.0 {
            for (o, v) in out.iter_mut().zip(kj) {
                *o += h * w * v;
            }
        }
    }
    out
}

/// Integrates `f` from `z0` through the strictly monotone `times`.
pub(crate) fn integrate<F>(f: &mut F, z0: &[f64], times: &[f64], spec: &SolverSpec, record: bool) -> Result<Tape>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    spec.validate()?;
    let dir = check_times(times)?;
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(RomError::numerical("initial state is not finite"));
    }
    match *spec {
        SolverSpec::Dopri5 { rtol, atol, max_steps } => {
            integrate_dopri5(f, z0, times, dir, rtol, atol, max_steps, record)
        }
        SolverSpec::Euler { step } | SolverSpec::Midpoint { step } | SolverSpec::Rk4 { step } => {
            integrate_fixed(f, z0, times, spec.tableau().expect("fixed method"), step, record)
        }
    }
}

/// Number of equal sub-steps covering `span` with steps no longer than `h`.
pub(crate) fn substeps(span: f64, step: Option<f64>) -> usize {
    match step {
        Some(h) => ((span.abs() / h) * (1.0 - 1e-12)).ceil().max(1.0) as usize,
        None => 1,
    }
}

fn integrate_fixed<F>(
    f: &mut F,
    z0: &[f64],
    times: &[f64],
    tab: &Tableau,
    step: Option<f64>,
    record: bool,
) -> Result<Tape>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let mut tape = Tape {
        steps: Vec::new(),
        outputs: vec![OutputRef::Initial],
        states: vec![z0.to_vec()],
    };
    let mut y = z0.to_vec();
    let mut taken = 0usize;
    for w in times.windows(2) {
        let span = w[1] - w[0];
        let n = substeps(span, step);
        let h = span / n as f64;
        for i in 0..n {
            let t = w[0] + i as f64 * h;
            let k = rk_stages(f, tab, t, h, &y, None)?;
            let next = combine(&y, h, tab.b, &k);
            check_finite(&next, t + h)?;
            if record {
                tape.steps.push(StepRecord {
                    t,
                    h,
                    y: std::mem::replace(&mut y, next),
                    k,
                    y1: Vec::new(),
                });
            } else {
                y = next;
            }
            taken += 1;
        }
        tape.outputs.push(OutputRef::End(taken - 1));
        tape.states.push(y.clone());
    }
    Ok(tape)
}

fn rms_norm(v: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / v.len().max(1) as f64).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(f: &mut F, t0: f64, y0: &[f64], f0: &[f64], dir: f64, hmax: f64, rtol: f64, atol: f64) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let sk: Vec<f64> = y0.iter().map(|y| atol + rtol * y.abs()).collect();
    let dnf: f64 = f0.iter().zip(&sk).map(|(v, s)| (v / s).powi(2)).sum();
    let dny: f64 = y0.iter().zip(&sk).map(|(v, s)| (v / s).powi(2)).sum();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
        1e-6
    } else {
        (dny / dnf).sqrt() * 0.01
    };
    h = h.min(hmax);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, v)| y + dir * h * v).collect();
    let mut f1 = vec![0.0; y0.len()];
    f(t0 + dir * h, &y1, &mut f1)?;
    let der2 = f1
        .iter()
        .zip(f0)
        .zip(&sk)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        .sqrt()
        / h;
    let der12 = der2.max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(0.2)
    };
    Ok((100.0 * h).min(h1).min(hmax))
}

/// Dense output inside a recorded dopri5 step, `theta` in `[0, 1]`.
pub(crate) fn dopri_dense(rec: &StepRecord, theta: f64) -> Vec<f64> {
    let w = dense_weights(theta);
    let h = rec.h;
    (0..rec.y.len())
        .map(|i| {
            let mut kd = 0.0;
            for (j, k) in rec.k.iter().enumerate() {
                kd += w.k[j] * k[i];
            }
            (1.0 - w.alpha) * rec.y[i] + w.alpha * rec.y1[i] + h * kd
        })
        .collect()
}

pub(crate) struct DenseWeights {
    pub alpha: f64,
    pub k: [f64; 7],
}

/// Writes the dense interpolant as `(1-α) y + α y1 + h Σ w_j k_j`.
pub(crate) fn dense_weights(theta: f64) -> DenseWeights {
    let th1 = 1.0 - theta;
    let alpha = theta - theta * th1 + 2.0 * theta * theta * th1;
    let b1 = theta * th1 * th1;
    let b7 = -theta * theta * th1;
    let g = theta * theta * th1 * th1;
    let mut k = [0.0; 7];
    for (j, d) in DOPRI_D.iter().enumerate() {
        k[j] = g * d;
    }
    k[0] += b1;
    k[6] += b7;
    DenseWeights { alpha, k }
}

#[allow(clippy::too_many_arguments)]
fn integrate_dopri5<F>(
    f: &mut F,
    z0: &[f64],
    times: &[f64],
    dir: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
    record: bool,
) -> Result<Tape>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let d = z0.len();
    let mut tape = Tape {
        steps: Vec::new(),
        outputs: vec![OutputRef::Initial],
        states: vec![z0.to_vec()],
    };
    if times.len() == 1 {
        return Ok(tape);
    }
    let t_end = *times.last().expect("nonempty");
    let hmax = (t_end - times[0]).abs();
    let mut t = times[0];
    let mut y = z0.to_vec();
    let mut k1 = vec![0.0; d];
    f(t, &y, &mut k1)?;
    let mut h = dir * initial_step(f, t, &y, &k1, dir, hmax, rtol, atol)?;
    let mut err_old: f64 = 1e-4;
    let mut last_rejected = false;
    let mut attempts = 0usize;
    let mut next_out = 1;
    let expo = 0.2 - BETA * 0.75;

    while next_out < times.len() {
        if attempts >= max_steps {
            return Err(RomError::Solver(format!(
                "dopri5 exceeded {max_steps} steps at t = {t} before reaching {t_end}"
            )));
        }
        attempts += 1;
        if h.abs() <= 1e-14 * t.abs().max(1.0) {
            return Err(RomError::Solver(format!("dopri5 step size underflow at t = {t}")));
        }
        let mut last = false;
        if (t + 1.01 * h - t_end) * dir >= 0.0 {
            h = t_end - t;
            last = true;
        }
        let mut k = rk_stages(f, &DOPRI, t, h, &y, Some(k1.clone()))?;
        let y1 = combine(&y, h, DOPRI.b, &k);
        check_finite(&y1, t + h)?;
        let mut k7 = vec![0.0; d];
        f(t + h, &y1, &mut k7)?;
        k.push(k7);
        let mut est = vec![0.0; d];
        for (e, kj) in DOPRI_E.iter().zip(&k) {
            if *e != 0.0 {
                for (v, kv) in est.iter_mut().zip(kj) {
                    *v += h * e * kv;
                }
            }
        }
        let err = rms_norm(&est, &y, &y1, rtol, atol);
        if !err.is_finite() {
            h *= FAC_MIN;
            last_rejected = true;
            continue;
        }
        let fac11 = err.powf(expo);
        if err <= 1.0 {
            let fac = (fac11 / err_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = dir * h_new.abs().min(h.abs());
            }
            let t_new = if last { t_end } else { t + h };
            let idx = tape.steps.len();
            let rec = StepRecord {
                t,
                h,
                y: std::mem::take(&mut y),
                k,
                y1,
            };
            while next_out < times.len() && (times[next_out] - t_new) * dir <= 0.0 {
                let theta = ((times[next_out] - t) / h).clamp(0.0, 1.0);
                tape.states.push(dopri_dense(&rec, theta));
                tape.outputs.push(OutputRef::Dense { step: idx, theta });
                next_out += 1;
            }
            y = rec.y1.clone();
            k1 = rec.k[6].clone();
            if record {
                tape.steps.push(rec);
            } else {
                tape.steps.clear();
            }
            t = t_new;
            err_old = err.max(1e-4);
            last_rejected = false;
            h = h_new;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            last_rejected = true;
        }
    }
    Ok(tape)
}

/// Solves `dz/dt = field(t, z)` and returns the state at every requested
/// (strictly increasing) time.
pub fn ode_solve<F: VectorField + ?Sized>(
    field: &F,
    z0: &[f64],
    times: &[f64],
    solver: &SolverSpec,
) -> Result<LatentTrajectory> {
    if z0.len() != field.dim() {
        return Err(RomError::arg(format!(
            "initial state has {} components, field has {}",
            z0.len(),
            field.dim()
        )));
    }
    if times.len() > 1 && times[1] < times[0] {
        return Err(RomError::arg("output times must be increasing"));
    }
    let mut rhs = |t: f64, z: &[f64], out: &mut [f64]| field.eval(t, z, out);
    let tape = integrate(&mut rhs, z0, times, solver, false)?;
    let coeffs = DMatrix::from_fn(z0.len(), times.len(), |i, k| tape.states[k][i]);
    LatentTrajectory::new(coeffs, times.to_vec())
}

/// Reverse pass of one explicit RK step: given the cotangent of the step
/// result, returns the cotangent of the step input and accumulates parameter
/// and time cotangents.
pub(crate) fn rk_step_vjp<F: DifferentiableField + ?Sized>(
    field: &F,
    tab: &Tableau,
    rec: &StepRecord,
    y_bar_next: &[f64],
    k_bar: &mut [Vec<f64>],
    p_bar: &mut [f64],
) -> Result<(Vec<f64>, f64)> {
    let d = rec.y.len();
    let h = rec.h;
    let mut y_bar = y_bar_next.to_vec();
    for (i, b) in tab.b.iter().enumerate() {
        if *b != 0.0 {
            for (kb, yb) in k_bar[i].iter_mut().zip(y_bar_next) {
                *kb += h * b * yb;
            }
        }
    }
    let mut t_bar = 0.0;
    let mut yi = vec![0.0; d];
    let mut yi_bar = vec![0.0; d];
    for i in (0..tab.b.len()).rev() {
        if k_bar[i].iter().all(|v| *v == 0.0) {
            continue;
        }
        yi.copy_from_slice(&rec.y);
        for (j, &a) in tab.a[i].iter().enumerate() {
            if a != 0.0 {
                for (v, kj) in yi.iter_mut().zip(&rec.k[j]) {
                    *v += h * a * kj;
                }
            }
        }
        yi_bar.iter_mut().for_each(|v| *v = 0.0);
        let cot = std::mem::take(&mut k_bar[i]);
        t_bar += field.vjp(rec.t + tab.c[i] * h, &yi, &cot, &mut yi_bar, p_bar)?;
        k_bar[i] = cot;
        for (yb, v) in y_bar.iter_mut().zip(&yi_bar) {
            *yb += v;
        }
        for (j, &a) in tab.a[i].iter().enumerate() {
            if a != 0.0 {
                for (kb, v) in k_bar[j].iter_mut().zip(&yi_bar) {
                    *kb += h * a * v;
                }
            }
        }
    }
    Ok((y_bar, t_bar))
}

/// Reverse-mode sweep over a recorded tape given a cotangent per output.
/// Returns the cotangent of the initial state and the time cotangent.
pub(crate) fn tape_vjp<F: DifferentiableField + ?Sized>(
    field: &F,
    spec: &SolverSpec,
    tape: &Tape,
    out_bar: &[Vec<f64>],
    p_bar: &mut [f64],
) -> Result<(Vec<f64>, f64)> {
    let d = field.dim();
    let n = tape.steps.len();
    let mut end_bar = vec![vec![0.0; d]; n];
    let mut dense: Vec<Vec<(f64, &[f64])>> = vec![Vec::new(); n];
    let mut y_bar = vec![0.0; d];
    for (out, cot) in tape.outputs.iter().zip(out_bar) {
        match *out {
            OutputRef::Initial => {
                for (a, b) in y_bar.iter_mut().zip(cot) {
                    *a += b;
                }
            }
            OutputRef::End(s) => {
                for (a, b) in end_bar[s].iter_mut().zip(cot) {
                    *a += b;
                }
            }
            OutputRef::Dense { step, theta } => dense[step].push((theta, cot)),
        }
    }
    let initial_bar = y_bar;
    let mut carry = vec![0.0; d];
    let mut t_bar = 0.0;
    for s in (0..n).rev() {
        let rec = &tape.steps[s];
        for (c, e) in carry.iter_mut().zip(&end_bar[s]) {
            *c += e;
        }
        let (prev, tb) = match spec.tableau() {
            Some(tab) => {
                let mut k_bar = vec![vec![0.0; d]; tab.b.len()];
                rk_step_vjp(field, tab, rec, &carry, &mut k_bar, p_bar)?
            }
            None => dopri_step_vjp(field, rec, &carry, &dense[s], p_bar)?,
        };
        carry = prev;
        t_bar += tb;
    }
    for (c, i) in carry.iter_mut().zip(&initial_bar) {
        *c += i;
    }
    Ok((carry, t_bar))
}

fn dopri_step_vjp<F: DifferentiableField + ?Sized>(
    field: &F,
    rec: &StepRecord,
    y1_bar_next: &[f64],
    dense: &[(f64, &[f64])],
    p_bar: &mut [f64],
) -> Result<(Vec<f64>, f64)> {
    let d = rec.y.len();
    let h = rec.h;
    let mut y_bar = vec![0.0; d];
    let mut y1_bar = y1_bar_next.to_vec();
    let mut k_bar = vec![vec![0.0; d]; 7];
    for &(theta, cot) in dense {
        let w = dense_weights(theta);
        for i in 0..d {
            y_bar[i] += (1.0 - w.alpha) * cot[i];
            y1_bar[i] += w.alpha * cot[i];
        }
        for (j, kb) in k_bar.iter_mut().enumerate() {
            if w.k[j] != 0.0 {
                for (v, c) in kb.iter_mut().zip(cot) {
                    *v += h * w.k[j] * c;
                }
            }
        }
    }
    let mut t_bar = 0.0;
    if k_bar[6].iter().any(|v| *v != 0.0) {
        t_bar += field.vjp(rec.t + h, &rec.y1, &k_bar[6], &mut y1_bar, p_bar)?;
    }
    k_bar.truncate(6);
    let (prev, tb) = rk_step_vjp(field, &DOPRI, rec, &y1_bar, &mut k_bar, p_bar)?;
    for (a, b) in y_bar.iter_mut().zip(&prev) {
        *a += b;
    }
    Ok((y_bar, t_bar + tb))
}
