use std::fs;
use std::path::{Path, PathBuf};

use nirom::node::{preset, Activation, DynamicsNet, SolverSpec, TrainConfig};
use nirom::pod::Truncation;
use nirom::snapshot::SnapshotFormat;
use nirom::{SnapshotSet, SyntheticSpec};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Environment variable consulted for the output directory when neither
/// `--out` nor `output_dir` is given.
pub const OUT_DIR_ENV: &str = "NIROM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "nirom-out";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Keep every `train_stride`-th input snapshot for training.
    #[serde(default = "one")]
    pub train_stride: usize,
    pub pod: PodConfig,
    #[serde(default)]
    pub rbf: Option<RbfConfig>,
    #[serde(default)]
    pub node: Option<NodeConfig>,
    #[serde(default)]
    pub dmd: Option<DmdConfig>,
    pub predict: GridConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    Synthetic(SyntheticSpec),
    File(FileInput),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileInput {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<SnapshotFormat>,
    /// Component label for CSV input.
    #[serde(default)]
    pub component: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PodConfig {
    Rank(usize),
    Energy(f64),
}

impl PodConfig {
    pub fn criterion(self) -> Truncation {
        match self {
            PodConfig::Rank(m) => Truncation::Rank(m),
            PodConfig::Energy(tau) => Truncation::Energy(tau),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfConfig {
    pub shape_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmdConfig {
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub scaling: bool,
    #[serde(default)]
    pub augment_dim: usize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default = "yes")]
    pub time_feature: bool,
    /// Full training setup; presets supply one when absent.
    #[serde(default)]
    pub training: Option<TrainConfig>,
    /// Overrides the epoch count of `training` or of the preset.
    #[serde(default)]
    pub epochs: Option<u64>,
    /// Solver for prediction; defaults to the training solver.
    #[serde(default)]
    pub solver: Option<SolverSpec>,
}

impl NodeConfig {
    pub fn build(&self, latent_dim: usize, seed: u64) -> CliResult<(DynamicsNet, TrainConfig)> {
        let (net, mut training) = match (&self.preset, &self.architecture) {
            (Some(name), None) => {
                let p = preset(name).map_err(|e| CliError::Config(format!("node.preset: {e}")))?;
                let net = p.build(latent_dim, self.time_feature, seed)?;
                (net, self.training.clone().unwrap_or_else(|| p.train_config()))
            }
            (None, Some(arch)) => {
                let net = DynamicsNet::mlp(
                    latent_dim,
                    &arch.hidden,
                    arch.activation,
                    arch.augment_dim,
                    self.time_feature,
                    arch.scaling,
                    seed,
                )
                .map_err(|e| CliError::Config(format!("node.architecture: {e}")))?;
                let training = self
                    .training
                    .clone()
                    .ok_or_else(|| CliError::Config("node.training is required when no preset is given".into()))?;
                (net, training)
            }
            _ => {
                return Err(CliError::Config(
                    "node needs exactly one of `preset` or `architecture`".into(),
                ))
            }
        };
        if let Some(e) = self.epochs {
            training.epochs = e;
        }
        training
            .validate()
            .map_err(|e| CliError::Config(format!("node.training: {e}")))?;
        Ok((net, training))
    }

    pub fn prediction_solver(&self, training: &TrainConfig) -> SolverSpec {
        self.solver.unwrap_or(training.solver)
    }
}

/// Uniform prediction grid `start, start + step, ..., end`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl GridConfig {
    pub fn times(&self) -> CliResult<Vec<f64>> {
        let span = self.end - self.start;
        if !(self.step > 0.0 && span > 0.0 && self.step.is_finite() && span.is_finite()) {
            return Err(CliError::Config(format!(
                "predict: need end > start and step > 0 (start {}, end {}, step {})",
                self.start, self.end, self.step
            )));
        }
        let n = (span / self.step).round();
        if (n * self.step - span).abs() > 1e-9 * span.max(1.0) {
            return Err(CliError::Config(format!(
                "predict: step {} does not divide [{}, {}] evenly",
                self.step, self.start, self.end
            )));
        }
        let n = n as usize;
        Ok((0..=n)
            .map(|k| {
                if k == n {
                    self.end
                } else {
                    self.start + k as f64 * self.step
                }
            })
            .collect())
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("config error at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.rbf.is_none() && self.node.is_none() && self.dmd.is_none() {
            return Err(CliError::Config(
                "at least one method block (rbf, node, dmd) is required".into(),
            ));
        }
        if self.train_stride == 0 {
            return Err(CliError::Config("train_stride must be at least 1".into()));
        }
        if let InputConfig::Synthetic(spec) = &self.input {
            spec.validate()
                .map_err(|e| CliError::Config(format!("input.synthetic: {e}")))?;
        }
        match self.pod {
            PodConfig::Rank(0) => return Err(CliError::Config("pod.rank must be at least 1".into())),
            PodConfig::Energy(t) if !(t > 0.0 && t < 1.0) => {
                return Err(CliError::Config(format!("pod.energy {t} must lie in (0, 1)")))
            }
            _ => {}
        }
        if let Some(r) = &self.rbf {
            if !(r.shape_factor > 0.0 && r.shape_factor.is_finite()) {
                return Err(CliError::Config(format!(
                    "rbf.shape_factor {} must be positive",
                    r.shape_factor
                )));
            }
        }
        if let Some(d) = &self.dmd {
            if d.rank == 0 {
                return Err(CliError::Config("dmd.rank must be at least 1".into()));
            }
        }
        self.predict.times()?;
        Ok(())
    }

    /// The config seed with a command-line override applied.
    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// Full input snapshot set; synthetic inputs use the pipeline seed.
    pub fn load_input(&self, seed: u64) -> CliResult<SnapshotSet> {
        match &self.input {
            InputConfig::Synthetic(spec) => {
                let mut spec = spec.clone();
                spec.seed = seed;
                Ok(spec.generate()?)
            }
            InputConfig::File(f) => {
                let format = f.format.unwrap_or_else(|| guess_format(&f.path));
                let set = SnapshotSet::load(&f.path, format)?;
                Ok(match &f.component {
                    Some(c) => set.with_component(c.clone()),
                    None => set,
                })
            }
        }
    }

    pub fn synthetic(&self, seed: u64) -> Option<SyntheticSpec> {
        match &self.input {
            InputConfig::Synthetic(spec) => {
                let mut spec = spec.clone();
                spec.seed = seed;
                Some(spec)
            }
            InputConfig::File(_) => None,
        }
    }
}

fn guess_format(path: &Path) -> SnapshotFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => SnapshotFormat::Csv,
        _ => SnapshotFormat::Binary,
    }
}
