use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::pod::LatentTrajectory;

use super::grad::{loss_and_grad, GradientMode};
use super::net::{scale_fit, DynamicsNet, TimeMap};
use super::solver::SolverSpec;

fn default_rho() -> f64 {
    0.9
}

fn default_momentum() -> f64 {
    0.9
}

fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmsProp {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            momentum: default_momentum(),
            rho: default_rho(),
            epsilon: default_epsilon(),
        }
    }
}

/// Optimizer memory: squared-gradient accumulator and velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub accumulator: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl RmsProp {
    pub fn init(&self, n: usize) -> RmsPropState {
        RmsPropState {
            accumulator: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    /// `a <- rho a + (1 - rho) g^2; v <- mu v + lr g / sqrt(a + eps); w <- w - v`.
    pub fn step(&self, state: &mut RmsPropState, params: &mut [f64], grad: &[f64], lr: f64) {
        for (((w, g), a), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut state.accumulator)
            .zip(&mut state.velocity)
        {
            *a = self.rho * *a + (1.0 - self.rho) * g * g;
            *v = self.momentum * *v + lr * g / (*a + self.epsilon).sqrt();
            *w -= *v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decay {
    Constant,
    Staircase { decay_steps: u64, rate: f64 },
    Exponential { decay_steps: u64, rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: Decay,
}

impl LrSchedule {
    pub fn staircase(initial: f64, decay_steps: u64, rate: f64) -> Self {
        Self {
            initial,
            decay: Decay::Staircase { decay_steps, rate },
        }
    }

    pub fn exponential(initial: f64, decay_steps: u64, rate: f64) -> Self {
        Self {
            initial,
            decay: Decay::Exponential { decay_steps, rate },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(RomError::arg(format!(
                "learning rate {} must be positive",
                self.initial
            )));
        }
        match self.decay {
            Decay::Constant => Ok(()),
            Decay::Staircase { decay_steps, rate } | Decay::Exponential { decay_steps, rate } => {
                if decay_steps == 0 {
                    return Err(RomError::arg("decay_steps must be at least 1"));
                }
                if !(rate > 0.0 && rate <= 1.0) {
                    return Err(RomError::arg(format!("decay rate {rate} must lie in (0, 1]")));
                }
                Ok(())
            }
        }
    }
}

/// Learning rate at optimizer step `step` (the zero-based epoch index).
pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    match schedule.decay {
        Decay::Constant => schedule.initial,
        Decay::Staircase { decay_steps, rate } => schedule.initial * rate.powi((step / decay_steps) as i32),
        Decay::Exponential { decay_steps, rate } => {
            let whole = rate.powi((step / decay_steps) as i32);
            let frac = (step % decay_steps) as f64 / decay_steps as f64;
            schedule.initial * whole * rate.powf(frac)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: RmsProp,
    pub schedule: LrSchedule,
    pub epochs: u64,
    #[serde(default)]
    pub gradient_mode: GradientMode,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub loss: Loss,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.solver.validate()?;
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.rho) || !(0.0..1.0).contains(&o.momentum) || !(o.epsilon > 0.0) {
            return Err(RomError::arg(format!(
                "RMSProp needs 0 <= rho < 1, 0 <= momentum < 1, epsilon > 0 (got {}, {}, {})",
                o.rho, o.momentum, o.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Loss and learning rate per epoch; the loss is the one evaluated before that
/// epoch's update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Trains `net` against `traj` with full-trajectory gradient steps.
///
/// Times are mapped onto `[0, 1]` and the map is stored in the returned net.
/// A net created with input scaling gets its scaling refit to the data.
pub fn train(
    net: &DynamicsNet,
    traj: &LatentTrajectory,
    config: &TrainConfig,
) -> Result<(DynamicsNet, TrainingHistory)> {
    let mut history = TrainingHistory::default();
    if config.epochs == 0 {
        return Ok((net.clone(), history));
    }
    config.validate()?;
    let m = net.latent_dim();
    if traj.dim() != m {
        return Err(RomError::arg(format!(
            "trajectory has {} components, network latent dimension is {m}",
            traj.dim()
        )));
    }
    let mut net = net.clone();
    let map = TimeMap::fit(traj.times())?;
    let times: Vec<f64> = traj.times().iter().map(|&t| map.normalize(t)).collect();
    net.set_time_map(Some(map));
    if net.scaling().is_some() {
        net.set_scaling(Some(scale_fit(traj)?))?;
    }
    let target: DMatrix<f64> = traj.coeffs().clone();
    let mut z0: Vec<f64> = traj.state(0).iter().copied().collect();
    z0.resize(net.state_dim(), 0.0);

    let opt = config.optimizer;
    let mut state = opt.init(net.params().len());
    for epoch in 0..config.epochs {
        let lr = lr_at(&config.schedule, epoch);
        let g =
            loss_and_grad(&net, &z0, &times, &target, &config.solver, config.gradient_mode).map_err(|e| match e {
                RomError::Numerical(message) => RomError::Training { epoch, message },
                other => other,
            })?;
        if !g.loss.is_finite() || g.adjoint.params.iter().any(|v| !v.is_finite()) {
            return Err(RomError::Training {
                epoch,
                message: format!("loss became non-finite ({})", g.loss),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: g.loss,
            lr,
        });
        opt.step(&mut state, net.params_mut(), &g.adjoint.params, lr);
    }
    Ok((net, history))
}
