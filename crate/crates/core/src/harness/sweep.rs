use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use super::metrics::{run_eval, MetricRecord};
use super::models::{train_model, TrainReport};
use crate::data::{generate, GenConfig, Split};
use crate::error::Result;

/// Measurement counts on the x-axis of the benchmark figure.
pub const DEFAULT_MEASUREMENTS: [usize; 5] = [1, 10, 25, 50, 100];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub measurements: Vec<usize>,
    pub models: Vec<ModelKind>,
    /// Base data configuration; `m` is replaced per sweep point.
    pub data: GenConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Test-split records in (m, model) order.
    pub records: Vec<MetricRecord>,
    pub reports: Vec<TrainReport>,
    /// Summed training time over every model and sweep point.
    pub train_wall_s: f64,
}

impl SweepResult {
    pub fn median(&self, model: ModelKind, m: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.m == m && r.model == model.name())
            .map(|r| r.median_nmse_db)
    }
}

/// Generates data at each `m`, trains every model and evaluates on the test
/// split. Checkpoints go to `<out>/m<m>/<model>/` when `out` is given.
pub fn run_sweep(cfg: &SweepConfig, out: Option<&Path>) -> Result<SweepResult> {
    let mut result = SweepResult::default();
    for &m in &cfg.measurements {
        let ds = generate(&GenConfig { m, ..cfg.data.clone() })?;
        for &kind in &cfg.models {
            let (model, report) = train_model(kind, &ds, &cfg.experiment)?;
            result.train_wall_s += report.wall_s;
            if let Some(dir) = out {
                model.save(&dir.join(format!("m{m}")).join(kind.name()))?;
            }
            result.records.push(run_eval(&model, &ds, Split::Test)?);
            result.reports.push(report);
        }
    }
    Ok(result)
}
