use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use log::info;
use nirom::dmd::{dmd_fit, DmdModel, DMD_MAGIC};
use nirom::metrics::{self, MetricsReport, ReportFormat};
use nirom::node::{train, DynamicsNet, NET_MAGIC};
use nirom::pod::{cumulative_energy, thin_svd, truncate};
use nirom::rbf::{self, RbfModel, RBF_MAGIC};
use nirom::snapshot::SnapshotFormat;
use nirom::{LatentTrajectory, PodBasis, SnapshotSet};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub const SNAPSHOTS_FILE: &str = "snapshots.snp";
pub const BASIS_FILE: &str = "basis.pod";
pub const LATENT_FILE: &str = "latent.snp";
pub const SPECTRUM_FILE: &str = "spectrum.csv";
pub const HISTORY_FILE: &str = "node_history.csv";
pub const TRUTH_FILE: &str = "truth.snp";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Method {
    Rbf,
    Node,
    Dmd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rbf, Method::Node, Method::Dmd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rbf => "rbf",
            Method::Node => "node",
            Method::Dmd => "dmd",
        }
    }

    pub fn model_file(self) -> String {
        format!("{}.model", self.name())
    }

    pub fn prediction_file(self) -> String {
        format!("pred_{}.snp", self.name())
    }

    fn magic(self) -> &'static [u8; 4] {
        match self {
            Method::Rbf => RBF_MAGIC,
            Method::Node => NET_MAGIC,
            Method::Dmd => DMD_MAGIC,
        }
    }

    /// Identifies the model kind from the leading magic bytes of a file.
    pub fn detect(path: &Path) -> CliResult<Method> {
        let mut magic = [0u8; 4];
        File::open(path)
            .and_then(|mut f| f.read_exact(&mut magic))
            .map_err(|e| CliError::Io(format!("cannot read model {}: {e}", path.display())))?;
        Method::ALL
            .into_iter()
            .find(|m| m.magic() == &magic)
            .ok_or_else(|| CliError::Io(format!("{} is not an RBF1, NET1 or DMD1 model file", path.display())))
    }
}

/// A parsed config with the command-line overrides resolved.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: PipelineConfig, seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let seed = config.seed(seed);
        let out = config.out_dir(out);
        fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self { config, seed, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn configured(&self, method: Method) -> bool {
        match method {
            Method::Rbf => self.config.rbf.is_some(),
            Method::Node => self.config.node.is_some(),
            Method::Dmd => self.config.dmd.is_some(),
        }
    }

    /// Configured methods, or just `method` if given.
    pub fn methods(&self, method: Option<Method>) -> CliResult<Vec<Method>> {
        match method {
            Some(m) if self.configured(m) => Ok(vec![m]),
            Some(m) => Err(CliError::Config(format!("config has no `{}` block", m.name()))),
            None => Ok(Method::ALL.into_iter().filter(|&m| self.configured(m)).collect()),
        }
    }

    /// The input snapshots thinned by `train_stride`.
    pub fn training_set(&self) -> CliResult<SnapshotSet> {
        let set = self.config.load_input(self.seed)?;
        Ok(set.subsample(self.config.train_stride)?)
    }
}

fn require(path: &Path, hint: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "{} not found; run `{hint}` first",
            path.display()
        )))
    }
}

pub fn cmd_generate(ctx: &Context) -> CliResult<PathBuf> {
    let set = ctx.config.load_input(ctx.seed)?;
    let path = ctx.path(SNAPSHOTS_FILE);
    set.save(&path, SnapshotFormat::Binary)?;
    info!("wrote {} ({}x{})", path.display(), set.mesh_size(), set.len());
    Ok(path)
}

pub fn cmd_decompose(ctx: &Context) -> CliResult<PodBasis> {
    let set = ctx.training_set()?;
    let centered = set.center();
    let svd = thin_svd(&centered)?;
    let basis = truncate(&svd, ctx.config.pod.criterion(), centered.mean())?;
    let latent = basis.project(&centered)?;
    basis.save(ctx.path(BASIS_FILE))?;
    latent
        .to_snapshots()?
        .save(ctx.path(LATENT_FILE), SnapshotFormat::Binary)?;

    let total: f64 = svd.singular().iter().map(|s| s * s).sum();
    let cumulative = cumulative_energy(svd.singular())?;
    let mut csv = String::from("index,singular_value,energy,cumulative_energy\n");
    for (i, s) in svd.singular().iter().enumerate() {
        let _ = writeln!(csv, "{},{s},{},{}", i + 1, s * s / total, cumulative[i]);
    }
    fs::write(ctx.path(SPECTRUM_FILE), csv)?;
    info!(
        "POD basis rank {} of {} nonzero singular values",
        basis.rank(),
        svd.rank()
    );
    Ok(basis)
}

fn load_latent(ctx: &Context) -> CliResult<LatentTrajectory> {
    let path = ctx.path(LATENT_FILE);
    require(&path, "decompose")?;
    let set = SnapshotSet::load(&path, SnapshotFormat::Binary)?;
    Ok(LatentTrajectory::from_snapshots(&set)?)
}

fn load_basis(ctx: &Context) -> CliResult<PodBasis> {
    let path = ctx.path(BASIS_FILE);
    require(&path, "decompose")?;
    Ok(PodBasis::load(&path)?)
}

pub fn cmd_fit(ctx: &Context, method: Method) -> CliResult<PathBuf> {
    let path = ctx.path(&method.model_file());
    match method {
        Method::Rbf => {
            let block = ctx
                .config
                .rbf
                .ok_or_else(|| CliError::Config("config has no `rbf` block".into()))?;
            let latent = load_latent(ctx)?;
            let model = rbf::fit(&latent, block.shape_factor)?;
            info!(
                "RBF fit on {} centers, min pivot {:e}",
                model.num_centers(),
                model.min_pivot()
            );
            model.save(&path)?;
        }
        Method::Node => {
            let block = ctx
                .config
                .node
                .as_ref()
                .ok_or_else(|| CliError::Config("config has no `node` block".into()))?;
            let latent = load_latent(ctx)?;
            let (net, training) = block.build(latent.dim(), ctx.seed)?;
            info!(
                "training {} ({} parameters) for {} epochs",
                if net.label().is_empty() {
                    "custom net"
                } else {
                    net.label()
                },
                net.params().len(),
                training.epochs
            );
            let (net, history) = train(&net, &latent, &training)?;
            let mut csv = String::from("epoch,loss,lr\n");
            for e in &history.epochs {
                let _ = writeln!(csv, "{},{},{}", e.epoch, e.loss, e.lr);
            }
            fs::write(ctx.path(HISTORY_FILE), csv)?;
            if let Some(loss) = history.last_loss() {
                info!("final training loss {loss:e}");
            }
            net.save(&path)?;
        }
        Method::Dmd => {
            let block = ctx
                .config
                .dmd
                .ok_or_else(|| CliError::Config("config has no `dmd` block".into()))?;
            let set = ctx.training_set()?;
            let model = dmd_fit(&set, block.rank)?;
            info!("DMD rank {}", model.rank());
            model.save(&path)?;
        }
    }
    info!("wrote {}", path.display());
    Ok(path)
}

fn check_dims(model_dim: usize, basis: &PodBasis) -> CliResult<()> {
    if model_dim != basis.rank() {
        return Err(CliError::Config(format!(
            "model latent dimension {model_dim} does not match POD basis rank {}",
            basis.rank()
        )));
    }
    Ok(())
}

/// Forecast times starting at the training start `t0`; returns them with the
/// number of leading entries to drop afterwards.
fn anchored(grid: &[f64], t0: f64) -> CliResult<(Vec<f64>, usize)> {
    let tol = 1e-9 * t0.abs().max(grid[grid.len() - 1].abs()).max(1.0);
    if grid[0] < t0 - tol {
        return Err(CliError::Config(format!(
            "prediction grid starts at {} before the training start {t0}",
            grid[0]
        )));
    }
    if (grid[0] - t0).abs() <= tol {
        Ok((grid.to_vec(), 0))
    } else {
        let mut times = Vec::with_capacity(grid.len() + 1);
        times.push(t0);
        times.extend_from_slice(grid);
        Ok((times, 1))
    }
}

fn drop_leading(traj: LatentTrajectory, skip: usize) -> CliResult<LatentTrajectory> {
    if skip == 0 {
        return Ok(traj);
    }
    let n = traj.len() - skip;
    let coeffs = traj.coeffs().columns(skip, n).into_owned();
    Ok(LatentTrajectory::new(coeffs, traj.times()[skip..].to_vec())?)
}

/// Predicted snapshots on the configured grid from the model at `model`.
pub fn predict_snapshots(ctx: &Context, method: Method, model: &Path) -> CliResult<SnapshotSet> {
    let grid = ctx.config.predict.times()?;
    match method {
        Method::Dmd => {
            let model = DmdModel::load(model)?;
            Ok(model.forecast(&grid)?)
        }
        Method::Rbf | Method::Node => {
            let basis = load_basis(ctx)?;
            let latent = load_latent(ctx)?;
            let z0: Vec<f64> = latent.state(0).iter().copied().collect();
            let (times, skip) = anchored(&grid, latent.times()[0])?;
            let traj = if method == Method::Rbf {
                let model = RbfModel::load(model)?;
                check_dims(model.dim(), &basis)?;
                model.forecast(&z0, &times)?
            } else {
                let net = DynamicsNet::load(model)?;
                check_dims(net.latent_dim(), &basis)?;
                let block = ctx
                    .config
                    .node
                    .as_ref()
                    .ok_or_else(|| CliError::Config("config has no `node` block".into()))?;
                let (_, training) = block.build(net.latent_dim(), ctx.seed)?;
                net.forecast(&z0, &times, &block.prediction_solver(&training))?
            };
            let component = ctx.training_set()?.component().to_string();
            Ok(basis.reconstruct(&drop_leading(traj, skip)?, &component)?)
        }
    }
}

/// Writes `pred_<method>.snp`. Without an explicit model path the method's
/// model in the output directory is used.
pub fn cmd_predict(ctx: &Context, method: Option<Method>, model: Option<&Path>) -> CliResult<PathBuf> {
    let (method, model) = match (method, model) {
        (m, Some(path)) => {
            let detected = Method::detect(path)?;
            if let Some(m) = m.filter(|&m| m != detected) {
                return Err(CliError::Config(format!(
                    "--method {} given but {} holds a {} model",
                    m.name(),
                    path.display(),
                    detected.name()
                )));
            }
            (detected, path.to_path_buf())
        }
        (Some(m), None) => (m, ctx.path(&m.model_file())),
        (None, None) => return Err(CliError::Config("predict needs --method or --model".into())),
    };
    require(&model, &format!("fit --method {}", method.name()))?;
    let set = predict_snapshots(ctx, method, &model)?;
    let path = ctx.path(&method.prediction_file());
    set.save(&path, SnapshotFormat::Binary)?;
    info!("wrote {} ({} times)", path.display(), set.len());
    Ok(path)
}

fn load_snapshots(path: &Path) -> CliResult<SnapshotSet> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => SnapshotFormat::Csv,
        _ => SnapshotFormat::Binary,
    };
    Ok(SnapshotSet::load(path, format)?)
}

/// Method name for a prediction file: `pred_<name>.snp` gives `<name>`.
fn method_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    stem.strip_prefix("pred_").unwrap_or(stem).to_string()
}

fn latent_dim_of(ctx: &Context, label: &str) -> Option<usize> {
    let method = Method::ALL.into_iter().find(|m| m.name() == label)?;
    let path = ctx.path(&method.model_file());
    match method {
        Method::Rbf => RbfModel::load(path).ok().map(|m| m.dim()),
        Method::Node => DynamicsNet::load(path).ok().map(|n| n.latent_dim()),
        Method::Dmd => DmdModel::load(path).ok().map(|m| m.rank()),
    }
}

/// Reference snapshots on the prediction grid: an explicit file, or the
/// synthetic generator re-evaluated (and saved as `truth.snp`).
pub fn truth_snapshots(ctx: &Context, truth: Option<&Path>) -> CliResult<SnapshotSet> {
    if let Some(path) = truth {
        return load_snapshots(path);
    }
    let spec = ctx
        .config
        .synthetic(ctx.seed)
        .ok_or_else(|| CliError::Config("compare needs --truth when the input is a snapshot file".into()))?;
    let set = spec.generate_at(&ctx.config.predict.times()?)?;
    set.save(ctx.path(TRUTH_FILE), SnapshotFormat::Binary)?;
    Ok(set)
}

pub fn compare_with(
    ctx: &Context,
    truth: Option<&Path>,
    predictions: &[PathBuf],
    runtimes: &BTreeMap<String, f64>,
) -> CliResult<Vec<MetricsReport>> {
    let truth = truth_snapshots(ctx, truth)?;
    let predictions: Vec<PathBuf> = if predictions.is_empty() {
        ctx.methods(None)?
            .into_iter()
            .map(|m| ctx.path(&m.prediction_file()))
            .collect()
    } else {
        predictions.to_vec()
    };
    let mut reports = Vec::with_capacity(predictions.len());
    for path in &predictions {
        require(path, "predict")?;
        let pred = load_snapshots(path)?;
        let label = method_label(path);
        let rmse = metrics::spatial_rmse(&pred, &truth)?;
        let mut report = MetricsReport::new(&label, truth.component(), truth.times().to_vec(), rmse)?;
        report.latent_dim = latent_dim_of(ctx, &label);
        report.runtime_seconds = runtimes.get(&label).copied();
        info!("{label}: max RMSE {:e}", report.max());
        reports.push(report);
    }
    metrics::report_emit(&reports, ctx.path(METRICS_JSON), ReportFormat::Json)?;
    metrics::report_emit(&reports, ctx.path(METRICS_CSV), ReportFormat::Csv)?;
    Ok(reports)
}

pub fn cmd_compare(ctx: &Context, truth: Option<&Path>, predictions: &[PathBuf]) -> CliResult<Vec<MetricsReport>> {
    compare_with(ctx, truth, predictions, &BTreeMap::new())
}

/// Per-method summary of `metrics.json`, written to `summary.csv` and
/// returned as an aligned text table.
pub fn cmd_report(ctx: &Context) -> CliResult<String> {
    let path = ctx.path(METRICS_JSON);
    require(&path, "compare")?;
    let reports = metrics::from_json(&fs::read_to_string(&path)?)?;
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".to_string());
    let mut csv = String::from("method,component,latent_dim,runtime_seconds,max_rmse,mean_rmse,final_rmse\n");
    let mut table = format!(
        "{:<10} {:<10} {:>6} {:>10} {:>12} {:>12} {:>12}\n",
        "method", "component", "dim", "runtime_s", "max_rmse", "mean_rmse", "final_rmse"
    );
    for r in &reports {
        let dim = opt(r.latent_dim.map(|d| d.to_string()));
        let runtime = opt(r.runtime_seconds.map(|s| format!("{s:.3}")));
        let last = r.rmse.last().copied().unwrap_or(0.0);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.method,
            r.component,
            if dim == "-" { "" } else { &dim },
            if runtime == "-" { "" } else { &runtime },
            r.max(),
            r.mean(),
            last
        );
        let _ = writeln!(
            table,
            "{:<10} {:<10} {:>6} {:>10} {:>12.4e} {:>12.4e} {:>12.4e}",
            r.method,
            r.component,
            dim,
            runtime,
            r.max(),
            r.mean(),
            last
        );
    }
    let mut out = BufWriter::new(File::create(ctx.path(SUMMARY_FILE))?);
    out.write_all(csv.as_bytes())?;
    out.flush()?;
    Ok(table)
}

/// Every stage in order for all configured methods; fit plus predict time
/// is recorded per method in the metrics.
pub fn cmd_run(ctx: &Context) -> CliResult<Vec<MetricsReport>> {
    cmd_generate(ctx)?;
    cmd_decompose(ctx)?;
    let mut runtimes = BTreeMap::new();
    let mut predictions = Vec::new();
    for method in ctx.methods(None)? {
        let start = Instant::now();
        cmd_fit(ctx, method)?;
        predictions.push(cmd_predict(ctx, Some(method), None)?);
        runtimes.insert(method.name().to_string(), start.elapsed().as_secs_f64());
    }
    compare_with(ctx, None, &predictions, &runtimes)
}
