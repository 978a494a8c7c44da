//! Mini-batch training loop shared by the unrolled and variational models:
//! seeded shuffling, per-group Adam, reduce-on-plateau on the validation
//! loss (restarting from the best parameters at each drop), best-on-validation
//! parameter tracking, and divergence abort.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, ParamSet, PlateauEvent, PlateauSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of solver parameters (dictionaries, scalars, LISTA matrices).
    pub lr_solver: f64,
    /// Learning rate of the augmentation head.
    pub lr_head: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before the learning rate drops.
    pub patience: usize,
    pub lr_factor: f64,
    /// Stop once the learning rate would be dropped more than this many times.
    pub max_lr_drops: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr_solver: 1e-2,
            lr_head: 1e-3,
            weight_decay: 5e-4,
            patience: 10,
            lr_factor: 10.0,
            max_lr_drops: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr_solver >= 0.0 && self.lr_head >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rates and weight decay must be >= 0".into()));
        }
        if !(self.lr_factor > 1.0) {
            return Err(Error::InvalidConfig(format!("lr_factor {} must be > 1", self.lr_factor)));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Entry 0 is the untrained model; entry `k` is after epoch `k`.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// One optimiser group: its parameter names and base learning rate.
pub struct ParamGroup {
    pub names: Vec<String>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSet {
    Train,
    Val,
}

/// Runs the loop. `batch` returns the summed loss and summed gradients over
/// the given training indices; `eval` returns the mean loss over a set.
/// On success `params` holds the best-on-validation values.
pub fn fit<B, E>(
    params: &mut ParamSet,
    groups: Vec<ParamGroup>,
    n_train: usize,
    cfg: &TrainConfig,
    mut batch: B,
    mut eval: E,
) -> Result<TrainHistory>
where
    B: FnMut(&ParamSet, &[usize], usize) -> Result<(f64, Gradients)>,
    E: FnMut(&ParamSet, EvalSet) -> Result<f64>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut opts: Vec<(AdamState, Vec<String>, f64)> = groups
        .into_iter()
        .filter(|g| !g.names.is_empty())
        .map(|g| (AdamState::new(AdamConfig::new(g.lr, cfg.weight_decay)), g.names, g.lr))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut schedule = PlateauSchedule::new(cfg.patience, cfg.lr_factor);
    let mut lr_scale = 1.0;

    let val0 = eval(params, EvalSet::Val)?;
    let mut history = TrainHistory {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: eval(params, EvalSet::Train)?,
            val_loss: val0,
            lr_scale,
        }],
        best_epoch: 0,
        best_val_loss: val0,
    };
    schedule.observe(val0);
    let mut best = params.clone();
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = batch(params, chunk, epoch)?;
            let finite = loss.is_finite() && grads.values().all(|g| g.is_finite());
            if !finite {
                *params = best;
                return Err(Error::Diverged { epoch, loss });
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.values_mut() {
                *g = g.scale(inv);
            }
            for (opt, names, _) in &mut opts {
                opt.apply(params, &grads, Some(names))?;
            }
            total += loss;
        }
        let train_loss = total / n_train as f64;
        let val_loss = eval(params, EvalSet::Val)?;
        if !val_loss.is_finite() {
            *params = best;
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr_scale,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = params.clone();
        }
        if schedule.observe(val_loss) == PlateauEvent::Drop {
            if schedule.drops() > cfg.max_lr_drops {
                break;
            }
            // Restart from the best point with fresh moments at the lower rate.
            lr_scale /= cfg.lr_factor;
            *params = best.clone();
            for (opt, _, base) in &mut opts {
                *opt = AdamState::new(AdamConfig::new(*base * lr_scale, cfg.weight_decay));
            }
        }
    }
    *params = best;
    Ok(history)
}

/// Adds `src` into `acc`, inserting missing entries.
pub fn accumulate(acc: &mut Gradients, src: Gradients) -> Result<()> {
    for (k, v) in src {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&v)?,
            None => {
                acc.insert(k, v);
            }
        }
    }
    Ok(())
}
