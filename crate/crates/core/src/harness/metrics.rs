use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::models::TrainedModel;
use crate::data::{Dataset, ProblemInstance, Split};
use crate::error::{Error, Result};

/// Reported value for exact recovery.
pub const NMSE_FLOOR_DB: f64 = -300.0;
pub const CSV_HEADER: &str = "split,model,m,median_nmse_db,n,wall_s";

/// `10 log₁₀(‖x̂ − x*‖² / ‖x*‖²)`, floored at [`NMSE_FLOOR_DB`].
pub fn nmse_db(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape("nmse_db", &[estimate.len()], &[reference.len()]));
    }
    let den: f64 = reference.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::UndefinedReference);
    }
    let num: f64 = estimate.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    if num == 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * (num / den).log10()).max(NMSE_FLOOR_DB))
}

/// Per-instance NMSE of `preds`. Instances with `x* = 0` have no NMSE and
/// are left out; an error is returned only when none remain.
pub fn nmse_scores(preds: &[Vec<f64>], instances: &[ProblemInstance]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(instances.len());
    for (p, i) in preds.iter().zip(instances) {
        match nmse_db(p, i.x_star.data()) {
            Ok(v) => out.push(v),
            Err(Error::UndefinedReference) => {}
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::UndefinedReference);
    }
    Ok(out)
}

/// Median with the two-middle average for even lengths. NaNs sort last.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySplit("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub split: Split,
    pub model: String,
    pub m: usize,
    pub nmse_db: Vec<f64>,
    pub median_nmse_db: f64,
    pub wall_s: f64,
}

impl MetricRecord {
    pub fn n(&self) -> usize {
        self.nmse_db.len()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.split,
            self.model,
            self.m,
            self.median_nmse_db,
            self.n(),
            self.wall_s
        )
    }
}

pub fn run_eval(model: &TrainedModel, ds: &Dataset, split: Split) -> Result<MetricRecord> {
    let d = model.dims();
    if d != ds.dims {
        return Err(Error::InvalidArgument(format!(
            "checkpoint dims m={} n={} b={} do not match data m={} n={} b={}",
            d.m, d.n, d.b, ds.dims.m, ds.dims.n, ds.dims.b
        )));
    }
    let instances = ds.split(split);
    if instances.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let start = std::time::Instant::now();
    let preds = model.predict(instances)?;
    let wall_s = start.elapsed().as_secs_f64();
    let nmse_db = nmse_scores(&preds, instances)?;
    Ok(MetricRecord {
        split,
        model: model.kind().name().into(),
        m: ds.dims.m,
        median_nmse_db: median(&nmse_db)?,
        nmse_db,
        wall_s,
    })
}

/// CSV text for `records`. With `wall_time` off, `wall_s` is written as 0 so
/// reruns produce identical bytes.
pub fn metrics_csv(records: &[MetricRecord], wall_time: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let mut r = r.clone();
        if !wall_time {
            r.wall_s = 0.0;
        }
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Writes `<path>` (CSV) and `<path>.json` (full records).
pub fn write_metrics(path: &Path, records: &[MetricRecord], wall_time: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, metrics_csv(records, wall_time)).map_err(|e| Error::io(path, e))?;
    let json_path = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.json", ext.to_string_lossy()),
        None => "json".into(),
    });
    let stored: Vec<MetricRecord> = records
        .iter()
        .cloned()
        .map(|mut r| {
            if !wall_time {
                r.wall_s = 0.0;
            }
            r
        })
        .collect();
    let text = serde_json::to_string_pretty(&stored).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}
