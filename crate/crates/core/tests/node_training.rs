use nalgebra::{DMatrix, Matrix2, Vector2};
use nirom::node::{
    loss_mse, ode_solve, train, Activation, DynamicsNet, GradientMode, Loss, LrSchedule, RmsProp, SolverSpec,
    TrainConfig, VectorField,
};
use nirom::LatentTrajectory;

struct Decay;

impl VectorField for Decay {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, _t: f64, z: &[f64], out: &mut [f64]) -> nirom::Result<()> {
        out[0] = -z[0];
        Ok(())
    }
}

fn global_error(spec: SolverSpec) -> f64 {
    let traj = ode_solve(&Decay, &[1.0], &[0.0, 1.0], &spec).unwrap();
    (traj.coeffs()[(0, 1)] - (-1.0f64).exp()).abs()
}

/// Least-squares slope of log(error) against log(h).
fn observed_order(make: fn(f64) -> SolverSpec) -> f64 {
    let hs: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
    let pts: Vec<(f64, f64)> = hs.iter().map(|&h| (h.ln(), global_error(make(h)).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn fixed_step_convergence_orders() {
    let euler = observed_order(|h| SolverSpec::Euler { step: Some(h) });
    let mid = observed_order(|h| SolverSpec::Midpoint { step: Some(h) });
    let rk4 = observed_order(|h| SolverSpec::Rk4 { step: Some(h) });
    assert!((euler - 1.0).abs() <= 0.3, "euler {euler}");
    assert!((mid - 2.0).abs() <= 0.3, "midpoint {mid}");
    assert!((rk4 - 4.0).abs() <= 0.3, "rk4 {rk4}");
}

#[test]
fn dopri5_meets_tolerance() {
    for (rtol, atol) in [(1e-3, 1e-6), (1e-6, 1e-9), (1e-9, 1e-12)] {
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.3).collect();
        let traj = ode_solve(&Decay, &[2.0], &times, &SolverSpec::dopri5(rtol, atol)).unwrap();
        for (k, &t) in times.iter().enumerate() {
            let exact = 2.0 * (-t).exp();
            let err = (traj.coeffs()[(0, k)] - exact).abs();
            assert!(err < 100.0 * (rtol * exact + atol), "rtol {rtol} t {t}: {err:e}");
        }
    }
}

/// Latent data from a damped rotation `z' = L z`, evaluated exactly.
fn linear_latent(len: usize) -> LatentTrajectory {
    let l = Matrix2::new(-0.1, 1.0, -1.0, -0.1);
    let z0 = Vector2::new(1.0, 0.0);
    let times: Vec<f64> = (0..len).map(|k| k as f64 * 2.0 / (len - 1) as f64).collect();
    let mut coeffs = DMatrix::zeros(2, len);
    for (k, &t) in times.iter().enumerate() {
        let z = (l * t).exp() * z0;
        coeffs.set_column(k, &z);
    }
    LatentTrajectory::new(coeffs, times).unwrap()
}

fn config(epochs: u64) -> TrainConfig {
    TrainConfig {
        optimizer: RmsProp::default(),
        schedule: LrSchedule::staircase(1e-3, 2500, 0.5),
        epochs,
        gradient_mode: GradientMode::BackpropThroughSolver,
        solver: SolverSpec::Rk4 { step: None },
        loss: Loss::Mse,
    }
}

#[test]
fn linear_flow_training_reaches_low_mse() {
    let data = linear_latent(21);
    let net = DynamicsNet::mlp(2, &[32], Activation::Tanh, 0, true, false, 7).unwrap();
    let (trained, history) = train(&net, &data, &config(5000)).unwrap();
    assert_eq!(history.epochs.len(), 5000);
    assert_eq!(history.epochs[2500].lr, 5e-4);
    let z0: Vec<f64> = data.state(0).iter().copied().collect();
    let pred = trained
        .forecast(&z0, data.times(), &SolverSpec::Rk4 { step: None })
        .unwrap();
    let mse = loss_mse(&pred, &data).unwrap();
    assert!(mse < 1e-3, "final MSE {mse:e}");
    assert!(mse < history.epochs[0].loss);
}

#[test]
fn training_is_deterministic() {
    let data = linear_latent(11);
    let net = DynamicsNet::mlp(2, &[8], Activation::Elu, 1, true, true, 42).unwrap();
    let (a, ha) = train(&net, &data, &config(50)).unwrap();
    let (b, hb) = train(&net, &data, &config(50)).unwrap();
    let bits = |n: &DynamicsNet| n.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ha, hb);
}

#[test]
fn augmented_state_decodes_latent_components() {
    let data = linear_latent(11);
    let net = DynamicsNet::mlp(2, &[8], Activation::Tanh, 3, false, false, 1).unwrap();
    let (trained, _) = train(&net, &data, &config(5)).unwrap();
    assert_eq!(trained.state_dim(), 5);
    let z0: Vec<f64> = data.state(0).iter().copied().collect();
    let pred = trained.forecast(&z0, data.times(), &SolverSpec::default()).unwrap();
    assert_eq!(pred.dim(), 2);
    assert_eq!(pred.state(0).as_slice(), z0.as_slice());

    // the same solve by hand with zero-padded state
    let map = trained.time_map().unwrap();
    let tau: Vec<f64> = data.times().iter().map(|&t| map.normalize(t)).collect();
    let full = ode_solve(&trained, &[z0[0], z0[1], 0.0, 0.0, 0.0], &tau, &SolverSpec::default()).unwrap();
    assert_eq!(full.coeffs().rows(0, 2), pred.coeffs().rows(0, 2));
}

#[test]
fn diverging_training_reports_epoch() {
    let data = linear_latent(11);
    let mut net = DynamicsNet::mlp(2, &[4], Activation::Linear, 0, false, false, 0).unwrap();
    net.params_mut().iter_mut().for_each(|p| *p = 1e3);
    let mut cfg = config(10);
    cfg.schedule = LrSchedule::staircase(1e3, 10, 1.0);
    match train(&net, &data, &cfg) {
        Err(nirom::RomError::Training { .. }) => {}
        other => panic!("expected training error, got {other:?}"),
    }
}
