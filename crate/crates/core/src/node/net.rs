use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Result, RomError};
use crate::pod::LatentTrajectory;

use super::solver::{ode_solve, DifferentiableField, SolverSpec, VectorField};

pub const NET_MAGIC: &[u8; 4] = b"NET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Linear, Activation::Relu, Activation::Elu, Activation::Tanh];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation `x` and the output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn id(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Elu => 2,
            Activation::Tanh => 3,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => Activation::Linear,
            1 => Activation::Relu,
            2 => Activation::Elu,
            3 => Activation::Tanh,
            other => return Err(RomError::Format(format!("NET1: unknown activation id {other}"))),
        })
    }
}

/// Per-component affine map sending `[lo, hi]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Scaling {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(RomError::Scaling("bounds differ in length".into()));
        }
        if let Some(j) = lo
            .iter()
            .zip(&hi)
            .position(|(l, h)| !(h - l > 0.0 && (h - l).is_finite()))
        {
            return Err(RomError::Scaling(format!(
                "component {j} has zero or invalid range [{}, {}]",
                lo[j], hi[j]
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Slope `2 / (hi - lo)` of component `j`.
    #[inline]
    pub fn gain(&self, j: usize) -> f64 {
        2.0 / (self.hi[j] - self.lo[j])
    }

    #[inline]
    pub fn forward(&self, j: usize, z: f64) -> f64 {
        (z - self.lo[j]) * self.gain(j) - 1.0
    }

    #[inline]
    pub fn inverse(&self, j: usize, s: f64) -> f64 {
        (s + 1.0) / self.gain(j) + self.lo[j]
    }

    pub fn apply(&self, traj: &LatentTrajectory) -> Result<LatentTrajectory> {
        self.map(traj, Self::forward)
    }

    pub fn invert(&self, traj: &LatentTrajectory) -> Result<LatentTrajectory> {
        self.map(traj, Self::inverse)
    }

    fn map(&self, traj: &LatentTrajectory, f: fn(&Self, usize, f64) -> f64) -> Result<LatentTrajectory> {
        if traj.dim() != self.dim() {
            return Err(RomError::Scaling(format!(
                "trajectory has {} components, scaling has {}",
                traj.dim(),
                self.dim()
            )));
        }
        let c = traj.coeffs();
        let out = DMatrix::from_fn(c.nrows(), c.ncols(), |j, k| f(self, j, c[(j, k)]));
        LatentTrajectory::new(out, traj.times().to_vec())
    }
}

/// Fits the per-component `[min, max] -> [-1, 1]` map of a trajectory.
pub fn scale_fit(traj: &LatentTrajectory) -> Result<Scaling> {
    let c = traj.coeffs();
    let lo = c.row_iter().map(|r| r.min()).collect();
    let hi = c.row_iter().map(|r| r.max()).collect();
    Scaling::new(lo, hi)
}

/// Affine map from physical time to the normalized training time
/// `tau = (t - start) / span`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub start: f64,
    pub span: f64,
}

impl TimeMap {
    pub fn fit(times: &[f64]) -> Result<Self> {
        let (first, last) = match (times.first(), times.last()) {
            (Some(a), Some(b)) if b > a => (*a, *b),
            _ => return Err(RomError::arg("time normalization needs an increasing time range")),
        };
        Ok(Self {
            start: first,
            span: last - first,
        })
    }

    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.start) / self.span
    }

    pub fn denormalize(&self, tau: f64) -> f64 {
        self.start + tau * self.span
    }
}

/// Feed-forward network used as the right-hand side of a latent ODE.
///
/// The state is `latent_dim + augment_dim` long; augmented components start
/// at zero and are never compared against data. With a time feature the
/// network input is `(t, state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsNet {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    augment_dim: usize,
    time_feature: bool,
    scaling: Option<Scaling>,
    time_map: Option<TimeMap>,
    seed: u64,
    label: String,
}

impl DynamicsNet {
    /// `sizes` lists every layer width from input to output; `activations`
    /// has one entry per affine layer. Weights are Glorot-uniform, biases zero.
    pub fn new(
        sizes: &[usize],
        activations: &[Activation],
        augment_dim: usize,
        time_feature: bool,
        scale_inputs: bool,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(RomError::arg("network needs at least input and output sizes"));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(RomError::arg(format!(
                "{} layers need {} activations, got {}",
                sizes.len() - 1,
                sizes.len() - 1,
                activations.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(RomError::arg("layer sizes must be positive"));
        }
        let state = *sizes.last().expect("nonempty");
        let expected_in = state + usize::from(time_feature);
        if sizes[0] != expected_in {
            return Err(RomError::arg(format!(
                "input width {} must equal state dimension {state}{}",
                sizes[0],
                if time_feature { " plus one time feature" } else { "" }
            )));
        }
        if augment_dim >= state {
            return Err(RomError::arg(format!(
                "augmentation {augment_dim} leaves no latent components in a state of {state}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        let latent = state - augment_dim;
        Ok(Self {
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
            params,
            augment_dim,
            time_feature,
            scaling: scale_inputs.then(|| Scaling::identity(latent)),
            time_map: None,
            seed,
            label: String::new(),
        })
    }

    /// MLP with `hidden` layers of one activation and a linear output layer.
    pub fn mlp(
        latent_dim: usize,
        hidden: &[usize],
        activation: Activation,
        augment_dim: usize,
        time_feature: bool,
        scale_inputs: bool,
        seed: u64,
    ) -> Result<Self> {
        let state = latent_dim + augment_dim;
        let mut sizes = vec![state + usize::from(time_feature)];
        sizes.extend_from_slice(hidden);
        sizes.push(state);
        let mut acts = vec![activation; hidden.len()];
        acts.push(Activation::Linear);
        Self::new(&sizes, &acts, augment_dim, time_feature, scale_inputs, seed)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(RomError::arg(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    pub fn latent_dim(&self) -> usize {
        self.state_dim() - self.augment_dim
    }

    pub fn augment_dim(&self) -> usize {
        self.augment_dim
    }

    pub fn time_feature(&self) -> bool {
        self.time_feature
    }

    pub fn scaling(&self) -> Option<&Scaling> {
        self.scaling.as_ref()
    }

    pub fn set_scaling(&mut self, scaling: Option<Scaling>) -> Result<()> {
        if let Some(s) = &scaling {
            if s.dim() != self.latent_dim() {
                return Err(RomError::Scaling(format!(
                    "scaling has {} components, latent dimension is {}",
                    s.dim(),
                    self.latent_dim()
                )));
            }
        }
        self.scaling = scaling;
        Ok(())
    }

    pub fn time_map(&self) -> Option<TimeMap> {
        self.time_map
    }

    pub fn set_time_map(&mut self, map: Option<TimeMap>) {
        self.time_map = map;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Preset name or other free-form provenance label.
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    fn input(&self, t: f64, z: &[f64], x: &mut Vec<f64>) {
        x.clear();
        if self.time_feature {
            x.push(t);
        }
        let m = self.latent_dim();
        for (j, &v) in z.iter().enumerate() {
            x.push(match &self.scaling {
                Some(s) if j < m => s.forward(j, v),
                _ => v,
            });
        }
    }

    /// Forward pass keeping every layer's pre-activation and output.
    fn forward_cached(&self, x0: Vec<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.activations.len());
        let mut outs = Vec::with_capacity(self.activations.len() + 1);
        outs.push(x0);
        let mut offset = 0;
        for (l, act) in self.activations.iter().enumerate() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let x = outs.last().expect("input present");
            let mut p = b.to_vec();
            for (o, po) in p.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *po += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            let y: Vec<f64> = p.iter().map(|&v| act.apply(v)).collect();
            pre.push(p);
            outs.push(y);
        }
        (pre, outs)
    }

    fn output_to_rate(&self, y: &mut [f64]) {
        if let Some(s) = &self.scaling {
            for (j, v) in y.iter_mut().take(self.latent_dim()).enumerate() {
                *v /= s.gain(j);
            }
        }
    }

    /// Network right-hand side at solver time `t` (normalized time when the
    /// net was trained with a time map).
    pub fn eval(&self, t: f64, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim()];
        VectorField::eval(self, t, z, &mut out)?;
        Ok(out)
    }

    /// Solves the latent ODE at physical `times` from a latent initial state;
    /// augmented components start at zero and are dropped from the result.
    pub fn forecast(&self, z0: &[f64], times: &[f64], solver: &SolverSpec) -> Result<LatentTrajectory> {
        let m = self.latent_dim();
        if z0.len() != m {
            return Err(RomError::arg(format!(
                "initial state has {} components, network latent dimension is {m}",
                z0.len()
            )));
        }
        let mut state0 = z0.to_vec();
        state0.resize(self.state_dim(), 0.0);
        let solver_times: Vec<f64> = match self.time_map {
            Some(map) => times.iter().map(|&t| map.normalize(t)).collect(),
            None => times.to_vec(),
        };
        let traj = ode_solve(self, &state0, &solver_times, solver)?;
        let coeffs = traj.coeffs().rows(0, m).into_owned();
        LatentTrajectory::new(coeffs, times.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out, NET_MAGIC)?;
        w.label(&self.label)?;
        w.len32(self.sizes.len())?;
        for &s in &self.sizes {
            w.len32(s)?;
        }
        for a in &self.activations {
            w.u8(a.id())?;
        }
        w.len32(self.augment_dim)?;
        w.u8(u8::from(self.time_feature))?;
        match &self.scaling {
            Some(s) => {
                w.u8(1)?;
                w.len32(s.dim())?;
                w.f64s(&s.lo)?;
                w.f64s(&s.hi)?;
            }
            None => w.u8(0)?,
        }
        match &self.time_map {
            Some(m) => {
                w.u8(1)?;
                w.f64(m.start)?;
                w.f64(m.span)?;
            }
            None => w.u8(0)?,
        }
        w.len32(self.params.len())?;
        w.f64s(&self.params)?;
        w.u64(self.seed)?;
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let bad = |msg: String| RomError::Format(format!("NET1: {msg}"));
        let mut r = Reader::new(input, NET_MAGIC, "NET1")?;
        let label = r.label()?;
        let n_sizes = r.len32()?;
        if !(2..=64).contains(&n_sizes) {
            return Err(bad(format!("implausible layer count {n_sizes}")));
        }
        let sizes = (0..n_sizes).map(|_| r.len32()).collect::<Result<Vec<_>>>()?;
        let activations = (0..n_sizes - 1)
            .map(|_| Activation::from_id(r.u8()?))
            .collect::<Result<Vec<_>>>()?;
        let augment_dim = r.len32()?;
        let time_feature = r.u8()? != 0;
        let scaling = match r.u8()? {
            0 => None,
            _ => {
                let d = r.len32()?;
                let lo = r.f64s(d)?;
                let hi = r.f64s(d)?;
                Some(Scaling::new(lo, hi).map_err(|e| bad(e.to_string()))?)
            }
        };
        let time_map = match r.u8()? {
            0 => None,
            _ => Some(TimeMap {
                start: r.f64()?,
                span: r.f64()?,
            }),
        };
        let n_params = r.len32()?;
        let params = r.f64s(n_params)?;
        let seed = r.u64()?;
        r.finish()?;
        let mut net =
            Self::new(&sizes, &activations, augment_dim, time_feature, false, seed).map_err(|e| bad(e.to_string()))?;
        net.set_params(&params).map_err(|e| bad(e.to_string()))?;
        net.set_scaling(scaling).map_err(|e| bad(e.to_string()))?;
        net.time_map = time_map;
        net.label = label;
        Ok(net)
    }
}

impl VectorField for DynamicsNet {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn eval(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        if z.len() != self.state_dim() {
            return Err(RomError::arg(format!(
                "state has {} components, network expects {}",
                z.len(),
                self.state_dim()
            )));
        }
        if !t.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(RomError::numerical("non-finite network input"));
        }
        let mut x = Vec::with_capacity(self.sizes[0]);
        self.input(t, z, &mut x);
        let (_, mut outs) = self.forward_cached(x);
        let mut y = outs.pop().expect("output layer");
        self.output_to_rate(&mut y);
        out.copy_from_slice(&y);
        Ok(())
    }
}

impl DifferentiableField for DynamicsNet {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn vjp(&self, t: f64, z: &[f64], cot: &[f64], z_bar: &mut [f64], p_bar: &mut [f64]) -> Result<f64> {
        let mut x = Vec::with_capacity(self.sizes[0]);
        self.input(t, z, &mut x);
        let (pre, outs) = self.forward_cached(x);

        let m = self.latent_dim();
        let mut delta: Vec<f64> = cot
            .iter()
            .enumerate()
            .map(|(j, &c)| match &self.scaling {
                Some(s) if j < m => c / s.gain(j),
                _ => c,
            })
            .collect();

        let mut offset = self.params.len();
        for l in (0..self.activations.len()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            let act = self.activations[l];
            for (o, d) in delta.iter_mut().enumerate() {
                *d *= act.derivative(pre[l][o], outs[l + 1][o]);
            }
            let x_in = &outs[l];
            let (w_bar, b_bar) = p_bar[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let w = &self.params[offset..offset + n_in * n_out];
            let mut x_bar = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                b_bar[o] += d;
                let row = &w[o * n_in..(o + 1) * n_in];
                let row_bar = &mut w_bar[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    row_bar[i] += d * x_in[i];
                    x_bar[i] += d * row[i];
                }
            }
            delta = x_bar;
        }

        let off = usize::from(self.time_feature);
        for (j, zb) in z_bar.iter_mut().enumerate() {
            let g = delta[j + off];
            *zb += match &self.scaling {
                Some(s) if j < m => g * s.gain(j),
                _ => g,
            };
        }
        Ok(if self.time_feature { delta[0] } else { 0.0 })
    }
}
