//! Neural ODE latent dynamics: a small MLP right-hand side, explicit
//! Runge-Kutta solvers and reverse-mode training.

mod grad;
mod net;
mod presets;
mod solver;
mod train;

pub use grad::{grad, loss_and_grad, loss_mse, AdjointState, Gradient, GradientMode};
pub use net::{scale_fit, Activation, DynamicsNet, Scaling, TimeMap, NET_MAGIC};
pub use presets::{preset, Preset, PRESETS, PRESET_AUGMENT_DIM, PRESET_EPOCHS, PRESET_LEARNING_RATE, PRESET_MOMENTUM};
pub use solver::{ode_solve, DifferentiableField, SolverSpec, VectorField};
pub use train::{
    lr_at, train, Decay, EpochRecord, Loss, LrSchedule, RmsProp, RmsPropState, TrainConfig, TrainingHistory,
};
