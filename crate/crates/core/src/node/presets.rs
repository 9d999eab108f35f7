use crate::error::{Result, RomError};

use super::grad::GradientMode;
use super::net::{Activation, DynamicsNet};
use super::solver::SolverSpec;
use super::train::{Loss, LrSchedule, RmsProp, TrainConfig};

/// Extra zero-initialized state components used by the augmented presets.
pub const PRESET_AUGMENT_DIM: usize = 5;
pub const PRESET_EPOCHS: u64 = 50_000;
pub const PRESET_LEARNING_RATE: f64 = 1e-3;
pub const PRESET_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub hidden_layers: usize,
    pub units: usize,
    pub activation: Activation,
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub scaling: bool,
    pub augmented: bool,
}

#[allow(clippy::too_many_arguments)]
const fn row(
    name: &'static str,
    hidden_layers: usize,
    units: usize,
    activation: Activation,
    decay_steps: u64,
    decay_rate: f64,
    scaling: bool,
    augmented: bool,
) -> Preset {
    Preset {
        name,
        hidden_layers,
        units,
        activation,
        decay_steps,
        decay_rate,
        scaling,
        augmented,
    }
}

use Activation::{Elu, Tanh};

pub const PRESETS: [Preset; 8] = [
    row("NODE1", 1, 256, Elu, 10000, 0.3, false, false),
    row("NODE2", 1, 256, Tanh, 5000, 0.7, true, false),
    row("NODE3", 1, 512, Elu, 5000, 0.5, false, false),
    row("NODE4", 1, 256, Tanh, 10000, 0.25, true, true),
    row("NODE5", 4, 64, Tanh, 5000, 0.5, true, false),
    row("NODE6", 1, 256, Elu, 10000, 0.1, false, false),
    row("NODE7", 2, 128, Elu, 5000, 0.5, false, false),
    row("NODE8", 1, 512, Tanh, 5000, 0.5, true, true),
];

/// Looks up a preset by name, ignoring ASCII case.
pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            RomError::arg(format!(
                "unknown preset `{name}` (expected one of NODE1..NODE{})",
                PRESETS.len()
            ))
        })
}

impl Preset {
    pub fn augment_dim(&self) -> usize {
        if self.augmented {
            PRESET_AUGMENT_DIM
        } else {
            0
        }
    }

    pub fn build(&self, latent_dim: usize, time_feature: bool, seed: u64) -> Result<DynamicsNet> {
        let hidden = vec![self.units; self.hidden_layers];
        let mut net = DynamicsNet::mlp(
            latent_dim,
            &hidden,
            self.activation,
            self.augment_dim(),
            time_feature,
            self.scaling,
            seed,
        )?;
        net.set_label(self.name);
        Ok(net)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: RmsProp {
                momentum: PRESET_MOMENTUM,
                ..RmsProp::default()
            },
            schedule: LrSchedule::staircase(PRESET_LEARNING_RATE, self.decay_steps, self.decay_rate),
            epochs: PRESET_EPOCHS,
            gradient_mode: GradientMode::BackpropThroughSolver,
            solver: SolverSpec::Rk4 { step: None },
            loss: Loss::Mse,
        }
    }
}
