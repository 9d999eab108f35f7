use nalgebra::DMatrix;
use nirom::metrics::spatial_rmse;
use nirom::pod::{thin_svd, truncate, Truncation};
use nirom::rbf::{build_derivatives, fit, kernel_eval};
use nirom::{LatentTrajectory, SyntheticKind, SyntheticSpec};
use proptest::prelude::*;

/// Random trajectories with distinct states: the first component advances by
/// at least 0.05 per snapshot.
fn trajectory() -> impl Strategy<Value = LatentTrajectory> {
    (1usize..=5, 3usize..=50).prop_flat_map(|(m, len)| {
        (
            proptest::collection::vec(-2.0f64..2.0, m * len),
            proptest::collection::vec(0.05f64..0.5, len),
            0.01f64..0.5,
        )
            .prop_map(move |(v, gaps, dt)| {
                let mut z = DMatrix::from_vec(m, len, v);
                let mut acc = 0.0;
                for (k, g) in gaps.iter().enumerate() {
                    acc += g;
                    z[(0, k)] = acc;
                }
                LatentTrajectory::new(z, (0..len).map(|k| k as f64 * dt).collect()).unwrap()
            })
    })
}

/// Random smooth trajectories: a monotone drift in the first component plus
/// random sinusoids in every component, sampled on `[0, 1]`.
fn smooth_trajectory() -> impl Strategy<Value = LatentTrajectory> {
    (1usize..=5, 3usize..=50).prop_flat_map(|(m, len)| {
        proptest::collection::vec((-1.0f64..1.0, 0.5f64..6.0, 0.0f64..6.3), m * 3).prop_map(move |waves| {
            let times: Vec<f64> = (0..len).map(|k| k as f64 / (len - 1) as f64).collect();
            let z = DMatrix::from_fn(m, len, |j, k| {
                let t = times[k];
                let osc: f64 = waves[j * 3..j * 3 + 3]
                    .iter()
                    .map(|(a, w, p)| a * (w * t + p).sin())
                    .sum();
                if j == 0 {
                    2.0 * t + 0.1 * osc
                } else {
                    osc
                }
            });
            LatentTrajectory::new(z, times).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn interpolation_is_exact(traj in trajectory(), c in 0.1f64..3.0) {
        let model = fit(&traj, c).unwrap();
        prop_assert!(model.min_pivot() > 0.0);
        let g = build_derivatives(&traj).unwrap();
        for k in 0..model.num_centers() {
            let center: Vec<f64> = model.centers().column(k).iter().copied().collect();
            let f = model.eval_dynamics(&center).unwrap();
            let target = g.values.column(k);
            let scale = target.norm().max(1e-12);
            prop_assert!((f - target).norm() <= 1e-8 * scale, "center {}", k);
        }
        // interpolation matrix built independently: symmetric, unit diagonal
        let centers = model.centers();
        let kmat = DMatrix::from_fn(centers.ncols(), centers.ncols(), |i, j| {
            kernel_eval((centers.column(i) - centers.column(j)).norm(), c).unwrap()
        });
        prop_assert!(kmat.diagonal().iter().all(|&d| d == 1.0));
        prop_assert_eq!(kmat.clone(), kmat.transpose());
    }

    #[test]
    fn training_grid_forecast_is_identity(traj in smooth_trajectory(), c in 0.1f64..3.0) {
        let model = fit(&traj, c).unwrap();
        let z0: Vec<f64> = traj.state(0).iter().copied().collect();
        let out = model.forecast(&z0, traj.times()).unwrap();
        let scale = traj.coeffs().amax().max(1.0);
        let err = (out.coeffs() - traj.coeffs()).amax();
        prop_assert!(err <= 1e-8 * scale, "err {:e} pivot {:e} coef {:e}", err, model.min_pivot(), model.coefficients().amax());
    }
}

#[test]
fn finer_prediction_step_bounded_error() {
    let spec = SyntheticSpec {
        kind: SyntheticKind::HarmonicLatent {
            omega: 1.0,
            identity_lift: false,
        },
        grid_points: 32,
        t_start: 0.0,
        dt: 0.05,
        snapshots: 41,
        seed: 3,
        component: "v".into(),
    };
    let train = spec.generate().unwrap();
    let c = train.center();
    let basis = truncate(&thin_svd(&c).unwrap(), Truncation::Rank(2), c.mean()).unwrap();
    let latent = basis.project(&c).unwrap();
    let model = fit(&latent, 1.0).unwrap();
    let z0: Vec<f64> = latent.state(0).iter().copied().collect();
    let t_end = *train.times().last().unwrap();
    let rmse_at = |step: f64| {
        let n = (t_end / step).round() as usize;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
        let pred = basis.reconstruct(&model.forecast(&z0, &times).unwrap(), "v").unwrap();
        let truth = spec.generate_at(&times).unwrap();
        spatial_rmse(&pred, &truth).unwrap().into_iter().fold(0.0, f64::max)
    };
    let half = rmse_at(spec.dt / 2.0);
    let quarter = rmse_at(spec.dt / 4.0);
    assert!(quarter <= 2.0 * half, "dt/4 {quarter:e} vs dt/2 {half:e}");
}
