//! Error measures for comparing predicted and reference snapshot sets.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};
use crate::snapshot::SnapshotSet;

fn check_same_grid(pred: &SnapshotSet, truth: &SnapshotSet) -> Result<()> {
    if pred.data().shape() != truth.data().shape() {
        return Err(RomError::arg(format!(
            "prediction shape {:?} differs from reference {:?}",
            pred.data().shape(),
            truth.data().shape()
        )));
    }
    for (k, (a, b)) in pred.times().iter().zip(truth.times()).enumerate() {
        if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
            return Err(RomError::arg(format!(
                "time {k} differs: prediction {a}, reference {b}"
            )));
        }
    }
    Ok(())
}

/// `RMSE(t_k) = sqrt(mean_i (pred_ik - truth_ik)^2)` for every time column.
pub fn spatial_rmse(pred: &SnapshotSet, truth: &SnapshotSet) -> Result<Vec<f64>> {
    check_same_grid(pred, truth)?;
    let n = truth.mesh_size() as f64;
    Ok(pred
        .data()
        .column_iter()
        .zip(truth.data().column_iter())
        .map(|(p, t)| ((p - t).norm_squared() / n).sqrt())
        .collect())
}

/// Spatial RMSE divided by `max |truth|` over the whole reference set.
pub fn spatial_rmse_normalized(pred: &SnapshotSet, truth: &SnapshotSet) -> Result<Vec<f64>> {
    let scale = truth.data().amax();
    if scale == 0.0 {
        return Err(RomError::arg("cannot normalize by an identically zero reference"));
    }
    Ok(spatial_rmse(pred, truth)?.into_iter().map(|e| e / scale).collect())
}

/// Floor used when the caller does not supply one: `1e-8 * max |truth|`.
pub fn default_floor(truth: &SnapshotSet) -> f64 {
    let f = 1e-8 * truth.data().amax();
    if f > 0.0 {
        f
    } else {
        1e-8
    }
}

/// Pointwise `|pred - truth| / max(|truth|, floor)`.
pub fn relative_error_field(pred: &SnapshotSet, truth: &SnapshotSet, floor: f64) -> Result<SnapshotSet> {
    if !(floor > 0.0) {
        return Err(RomError::arg(format!("relative error floor {floor} must be positive")));
    }
    check_same_grid(pred, truth)?;
    let (p, t) = (pred.data(), truth.data());
    let field = DMatrix::from_fn(t.nrows(), t.ncols(), |i, k| {
        (p[(i, k)] - t[(i, k)]).abs() / t[(i, k)].abs().max(floor)
    });
    SnapshotSet::new(field, truth.times().to_vec(), format!("relerr_{}", truth.component()))
}

/// RMSE trajectory of one method on one solution component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub component: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
    pub times: Vec<f64>,
    pub rmse: Vec<f64>,
}

impl MetricsReport {
    pub fn new(method: &str, component: &str, times: Vec<f64>, rmse: Vec<f64>) -> Result<Self> {
        if times.len() != rmse.len() {
            return Err(RomError::arg("times and RMSE series differ in length"));
        }
        if let Some(k) = rmse.iter().position(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(RomError::numerical(format!(
                "RMSE at index {k} is not a finite nonnegative number"
            )));
        }
        Ok(Self {
            method: method.to_string(),
            component: component.to_string(),
            latent_dim: None,
            runtime_seconds: None,
            times,
            rmse,
        })
    }

    pub fn max(&self) -> f64 {
        self.rmse.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.rmse.is_empty() {
            0.0
        } else {
            self.rmse.iter().sum::<f64>() / self.rmse.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComponentSeries {
    times: Vec<f64>,
    rmse: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MethodEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    runtime_seconds: Option<f64>,
    components: BTreeMap<String, ComponentSeries>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonReport {
    methods: BTreeMap<String, MethodEntry>,
}

pub fn write_csv<W: Write>(reports: &[MetricsReport], mut out: W) -> Result<()> {
    writeln!(out, "method,component,time,rmse")?;
    for r in reports {
        for (t, e) in r.times.iter().zip(&r.rmse) {
            writeln!(out, "{},{},{t},{e}", r.method, r.component)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn to_json(reports: &[MetricsReport]) -> Result<String> {
    let mut methods: BTreeMap<String, MethodEntry> = BTreeMap::new();
    for r in reports {
        let entry = methods.entry(r.method.clone()).or_insert_with(|| MethodEntry {
            latent_dim: r.latent_dim,
            runtime_seconds: r.runtime_seconds,
            components: BTreeMap::new(),
        });
        if entry
            .components
            .insert(
                r.component.clone(),
                ComponentSeries {
                    times: r.times.clone(),
                    rmse: r.rmse.clone(),
                },
            )
            .is_some()
        {
            return Err(RomError::arg(format!(
                "duplicate report for method `{}`, component `{}`",
                r.method, r.component
            )));
        }
    }
    serde_json::to_string_pretty(&JsonReport { methods }).map_err(|e| RomError::Format(format!("metrics JSON: {e}")))
}

pub fn from_json(text: &str) -> Result<Vec<MetricsReport>> {
    let parsed: JsonReport = serde_json::from_str(text).map_err(|e| RomError::Format(format!("metrics JSON: {e}")))?;
    let mut out = Vec::new();
    for (method, entry) in parsed.methods {
        for (component, series) in entry.components {
            let mut r = MetricsReport::new(&method, &component, series.times, series.rmse)?;
            r.latent_dim = entry.latent_dim;
            r.runtime_seconds = entry.runtime_seconds;
            out.push(r);
        }
    }
    Ok(out)
}

pub fn report_emit(reports: &[MetricsReport], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Csv => write_csv(reports, out),
        ReportFormat::Json => {
            out.write_all(to_json(reports)?.as_bytes())?;
            out.write_all(b"\n")?;
            out.flush()?;
            Ok(())
        }
    }
}
