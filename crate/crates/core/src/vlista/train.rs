use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::model::{phi_summary, ElboBreakdown, InferenceMode, VlistaModel};
use super::ood::{Reconstruction, Sampler};
use crate::autodiff::Gradients;
use crate::data::{Dataset, ProblemInstance, Split};
use crate::error::{Error, Result};
use crate::train::{accumulate, fit, EvalSet, ParamGroup, TrainConfig, TrainHistory};
use crate::tensor::Tensor;
use crate::unfolded::head::is_head_param;

/// Seed offset of the fixed noise used for validation ELBOs.
const EVAL_STREAM: u64 = 0x5eed_e7a1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VlistaHistory {
    pub train: TrainHistory,
    /// Unweighted KL block of every training instance, per optimiser step.
    pub kl_per_step: Vec<Vec<f64>>,
}

impl VlistaHistory {
    pub fn min_kl(&self) -> f64 {
        self.kl_per_step.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Mean `−ELBO` over `instances` under noise drawn from `seed`.
pub fn mean_negative_elbo(model: &VlistaModel, instances: &[ProblemInstance], seed: u64) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptySplit("elbo".into()));
    }
    let mut vg = model.build(InferenceMode::Sample, true)?;
    let loss = vg.objective.as_ref().map(|o| o.loss).expect("training graph");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for inst in instances {
        let s = phi_summary(&inst.phi)?;
        vg.bind_instance(inst, &s, &mut rng);
        vg.graph.evaluate()?;
        total += vg.graph.value(loss)?.item();
    }
    Ok(total / instances.len() as f64)
}

/// Minimises the batch-mean `−ELBO` with one reparametrised dictionary chain
/// per instance and step. Two groups: solver-side nets at `lr_solver`, the
/// augmentation head at `lr_head`.
pub fn train_vlista(model: &mut VlistaModel, ds: &Dataset, cfg: &TrainConfig) -> Result<VlistaHistory> {
    if ds.dims != model.dims {
        return Err(Error::InvalidArgument("model and data dimensions differ".into()));
    }
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let summaries = |set: &[ProblemInstance]| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|i| phi_summary(&i.phi)).collect()
    };
    let train_s = summaries(train)?;
    let val_s = summaries(val)?;
    let vg = model.build(InferenceMode::Sample, true)?;
    let names = vg.graph.param_names();
    let (head, solver): (Vec<String>, Vec<String>) = names.into_iter().partition(|n| is_head_param(n));
    let groups = vec![
        ParamGroup {
            names: solver,
            lr: cfg.lr_solver,
        },
        ParamGroup {
            names: head,
            lr: cfg.lr_head,
        },
    ];
    let (loss, kl_nodes) = {
        let o = vg.objective.as_ref().expect("training graph");
        (o.loss, o.kl.clone())
    };
    let vg = RefCell::new(vg);
    let kl_trace = RefCell::new(Vec::new());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ model.config.seed.rotate_left(17));
    let rng = RefCell::new(&mut rng);
    let eval_seed = cfg.seed ^ EVAL_STREAM;
    let mut params = std::mem::take(&mut model.params);
    let result = fit(
        &mut params,
        groups,
        train.len(),
        cfg,
        |p, idx, _| {
            let mut vg = vg.borrow_mut();
            let mut rng = rng.borrow_mut();
            vg.bind_params(p);
            let mut total = 0.0;
            let mut grads = Gradients::new();
            let mut kls = Vec::with_capacity(idx.len());
            for &i in idx {
                vg.bind_instance(&train[i], &train_s[i], &mut **rng);
                vg.graph.evaluate()?;
                total += vg.graph.value(loss)?.item();
                let mut kl = 0.0;
                for &k in &kl_nodes {
                    kl += vg.graph.value(k)?.item();
                }
                kls.push(kl);
                accumulate(&mut grads, vg.graph.backward(loss)?)?;
            }
            kl_trace.borrow_mut().push(kls);
            Ok((total, grads))
        },
        |p, which| {
            let mut vg = vg.borrow_mut();
            vg.bind_params(p);
            let (set, sums) = match which {
                EvalSet::Train => (train, &train_s),
                EvalSet::Val => (val, &val_s),
            };
            let mut eval_rng = ChaCha20Rng::seed_from_u64(eval_seed);
            let mut total = 0.0;
            for (inst, s) in set.iter().zip(sums) {
                vg.bind_instance(inst, s, &mut eval_rng);
                vg.graph.evaluate()?;
                total += vg.graph.value(loss)?.item();
            }
            Ok(total / set.len() as f64)
        },
    );
    model.params = params;
    Ok(VlistaHistory {
        train: result?,
        kl_per_step: kl_trace.into_inner(),
    })
}

/// Single-sample ELBO with explicit per-layer noise (flattened `n·b` each).
pub fn elbo_with_noise(model: &VlistaModel, inst: &ProblemInstance, noise: &[Tensor]) -> Result<ElboBreakdown> {
    let mut vg = model.build(InferenceMode::Sample, true)?;
    let s = phi_summary(&inst.phi)?;
    let mut unused = ChaCha20Rng::seed_from_u64(0);
    vg.bind_instance(inst, &s, &mut unused);
    vg.bind_noise(noise)?;
    vg.graph.evaluate()?;
    vg.breakdown(model.config.delta_lik, model.config.kl_weight)
}

/// Single-sample ELBO with noise drawn from `rng`.
pub fn elbo(model: &VlistaModel, inst: &ProblemInstance, rng: &mut impl Rng) -> Result<ElboBreakdown> {
    let mut vg = model.build(InferenceMode::Sample, true)?;
    let s = phi_summary(&inst.phi)?;
    vg.bind_instance(inst, &s, rng);
    vg.graph.evaluate()?;
    vg.breakdown(model.config.delta_lik, model.config.kl_weight)
}

/// Algorithm-style inference: one chain of posterior dictionaries (or their
/// means) through the augmented layers.
pub fn vlista_inference(
    model: &VlistaModel,
    inst: &ProblemInstance,
    mode: InferenceMode,
    rng: &mut ChaCha20Rng,
) -> Result<Reconstruction> {
    Sampler::new(model, mode)?.run(inst, rng)
}
