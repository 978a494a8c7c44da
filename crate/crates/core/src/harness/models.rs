use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use super::metrics::{median, nmse_scores};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Dims, ProblemInstance, Split};
use crate::error::{Error, Result};
use crate::ista::{ista_solve, IstaConfig, StepSize};
use crate::tensor::Tensor;
use crate::train::TrainHistory;
use crate::unfolded::{train_unfolded, InitConfig, UnfoldedKind, UnfoldedModel};
use crate::vlista::{train_vlista, InferenceMode, Sampler, VlistaModel};

/// Thresholds `10^k` tried by the ISTA baseline search.
pub const ISTA_THETA_EXPONENTS: std::ops::RangeInclusive<i32> = -4..=1;
pub const ISTA_GAMMAS: [StepSize; 4] = [
    StepSize::Auto,
    StepSize::Fixed(0.1),
    StepSize::Fixed(0.5),
    StepSize::Fixed(1.0),
];
/// Instances used for scale-aware initialisation and feature statistics.
const INIT_REFERENCE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct IstaBaseline {
    pub dims: Dims,
    /// Dictionary the baseline runs with (the generating one).
    pub psi: Tensor,
    pub config: IstaConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Ista(IstaBaseline),
    Unfolded(UnfoldedModel),
    Vlista(VlistaModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub theta: f64,
    pub gamma: StepSize,
    pub val_median_nmse_db: f64,
}

/// What training produced besides the model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub history: Option<TrainHistory>,
    pub grid: Vec<GridPoint>,
    /// Smallest unweighted KL block seen at any VLISTA step.
    pub min_kl: Option<f64>,
    pub wall_s: f64,
}

fn reference(ds: &Dataset) -> Vec<&Tensor> {
    ds.split(Split::Train).iter().take(INIT_REFERENCE).map(|i| &i.phi).collect()
}

/// Grid search on the validation split; non-finite scores rank last and
/// ties keep the first point in grid order.
pub fn ista_grid_search(ds: &Dataset, iterations: usize) -> Result<(IstaBaseline, Vec<GridPoint>)> {
    let val = ds.split(Split::Val);
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let mut grid = Vec::new();
    let mut best: Option<(f64, IstaConfig)> = None;
    for k in ISTA_THETA_EXPONENTS {
        for gamma in ISTA_GAMMAS {
            let cfg = IstaConfig {
                iterations,
                theta: 10f64.powi(k),
                gamma,
            };
            let preds: Vec<Vec<f64>> = val
                .iter()
                .map(|inst| Ok(ista_solve(inst, &ds.psi_o, &cfg)?.x))
                .collect::<Result<_>>()?;
            let scores: Vec<f64> = nmse_scores(&preds, val)?
                .into_iter()
                .map(|s| if s.is_finite() { s } else { f64::INFINITY })
                .collect();
            let score = median(&scores)?;
            let score = if score.is_nan() { f64::INFINITY } else { score };
            grid.push(GridPoint {
                theta: cfg.theta,
                gamma,
                val_median_nmse_db: score,
            });
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, cfg));
            }
        }
    }
    let (_, config) = best.expect("grid is nonempty");
    Ok((
        IstaBaseline {
            dims: ds.dims,
            psi: ds.psi_o.clone(),
            config,
        },
        grid,
    ))
}

pub fn train_model(kind: ModelKind, ds: &Dataset, cfg: &ExperimentConfig) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut report = TrainReport {
        model: kind.name().into(),
        ..Default::default()
    };
    let model = match kind {
        ModelKind::IstaGrid => {
            let (m, grid) = ista_grid_search(ds, cfg.layers)?;
            report.grid = grid;
            TrainedModel::Ista(m)
        }
        ModelKind::Vlista => {
            let mut m = VlistaModel::init(ds.dims, &reference(ds), &cfg.vlista_config())?;
            let h = train_vlista(&mut m, ds, &cfg.train_config(kind))?;
            report.min_kl = Some(h.min_kl());
            report.history = Some(h.train);
            TrainedModel::Vlista(m)
        }
        _ => {
            let uk = kind.unfolded().expect("unfolded kinds handled here");
            let init = InitConfig {
                share_dictionary: cfg.share_dictionary,
                seed: cfg.seed,
                ..Default::default()
            };
            let mut m = UnfoldedModel::init(uk, ds.dims, cfg.layers, &reference(ds), &init)?;
            report.history = Some(train_unfolded(&mut m, ds, &cfg.train_config(kind))?);
            TrainedModel::Unfolded(m)
        }
    };
    report.wall_s = start.elapsed().as_secs_f64();
    Ok((model, report))
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Ista(_) => ModelKind::IstaGrid,
            TrainedModel::Unfolded(m) => match m.kind {
                UnfoldedKind::Lista => ModelKind::Lista,
                UnfoldedKind::Dlista => ModelKind::Dlista,
                UnfoldedKind::Adlista => ModelKind::Adlista,
            },
            TrainedModel::Vlista(_) => ModelKind::Vlista,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            TrainedModel::Ista(m) => m.dims,
            TrainedModel::Unfolded(m) => m.dims,
            TrainedModel::Vlista(m) => m.dims,
        }
    }

    /// Point reconstructions. VLISTA uses its posterior means.
    pub fn predict(&self, instances: &[ProblemInstance]) -> Result<Vec<Vec<f64>>> {
        for inst in instances {
            let d = self.dims();
            if inst.m() != d.m || inst.n() != d.n || inst.b() != d.b {
                return Err(Error::InvalidArgument(format!(
                    "model dims m={} n={} b={} do not match data m={} n={} b={}",
                    d.m,
                    d.n,
                    d.b,
                    inst.m(),
                    inst.n(),
                    inst.b()
                )));
            }
        }
        match self {
            TrainedModel::Ista(m) => instances
                .iter()
                .map(|i| Ok(ista_solve(i, &m.psi, &m.config)?.x))
                .collect(),
            TrainedModel::Unfolded(m) => m.predict(instances),
            TrainedModel::Vlista(m) => {
                let mut s = Sampler::new(m, InferenceMode::Mean)?;
                let mut rng = ChaCha20Rng::seed_from_u64(0);
                instances.iter().map(|i| Ok(s.run(i, &mut rng)?.x)).collect()
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            TrainedModel::Ista(m) => {
                let mut ck = Checkpoint::new(ModelKind::IstaGrid.name(), m.config.iterations, m.dims);
                ck.params.insert("psi".into(), crate::checkpoint::EncodedTensor::encode(&m.psi));
                ck.settings.insert("theta".into(), m.config.theta);
                let (auto, g) = match m.config.gamma {
                    StepSize::Auto => (1.0, 0.0),
                    StepSize::Fixed(g) => (0.0, g),
                };
                ck.settings.insert("gamma_auto".into(), auto);
                ck.settings.insert("gamma".into(), g);
                ck
            }
            TrainedModel::Unfolded(m) => m.to_checkpoint(),
            TrainedModel::Vlista(m) => m.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ck
            .model
            .parse()
            .map_err(|_| Error::Checkpoint(format!("unknown model `{}`", ck.model)))?;
        Ok(match kind {
            ModelKind::IstaGrid => {
                let psi = ck
                    .params
                    .get("psi")
                    .ok_or_else(|| Error::Checkpoint("missing parameter `psi`".into()))?
                    .decode("psi")?;
                let dims: Dims = (&ck.dims).into();
                if psi.shape() != [dims.n, dims.b] {
                    return Err(Error::Checkpoint("dictionary shape does not match dims".into()));
                }
                let gamma = if ck.setting("gamma_auto")? != 0.0 {
                    StepSize::Auto
                } else {
                    StepSize::Fixed(ck.setting("gamma")?)
                };
                let config = IstaConfig {
                    iterations: ck.layers,
                    theta: ck.setting("theta")?,
                    gamma,
                };
                config.validate()?;
                TrainedModel::Ista(IstaBaseline { dims, psi, config })
            }
            ModelKind::Vlista => TrainedModel::Vlista(VlistaModel::from_checkpoint(ck)?),
            _ => TrainedModel::Unfolded(UnfoldedModel::from_checkpoint(ck)?),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
