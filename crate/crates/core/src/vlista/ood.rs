use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::model::{phi_summary, InferenceMode, VlistaGraph, VlistaModel};
use crate::data::{generate, Dataset, GenConfig, ProblemInstance, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DRAWS: usize = 100;
pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;
/// Variance substituted for both samples when both are constant.
pub const VARIANCE_GUARD: f64 = 1e-12;
/// Seed offset of the shifted-dictionary dataset.
const OOD_STREAM: u64 = 0x00d_0005;

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub x: Vec<f64>,
    pub dictionaries: Vec<Tensor>,
}

/// Reusable inference graph for one mode.
pub struct Sampler {
    vg: VlistaGraph,
}

impl Sampler {
    pub fn new(model: &VlistaModel, mode: InferenceMode) -> Result<Self> {
        Ok(Self {
            vg: model.build(mode, false)?,
        })
    }

    pub fn run(&mut self, inst: &ProblemInstance, rng: &mut ChaCha20Rng) -> Result<Reconstruction> {
        let s = phi_summary(&inst.phi)?;
        self.run_with_summary(inst, &s, rng)
    }

    fn run_with_summary(&mut self, inst: &ProblemInstance, s: &[f64], rng: &mut ChaCha20Rng) -> Result<Reconstruction> {
        self.vg.bind_instance(inst, s, rng);
        self.vg.graph.evaluate()?;
        Ok(Reconstruction {
            x: self.vg.output()?,
            dictionaries: self.vg.sampled_dictionaries()?,
        })
    }

    /// Unbiased per-entry variance of `x_T` over `draws` reconstructions.
    pub fn entry_variance(&mut self, inst: &ProblemInstance, draws: usize, rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
        if draws < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 draws, got {draws}")));
        }
        let s = phi_summary(&inst.phi)?;
        let b = inst.b();
        let (mut mean, mut m2) = (vec![0.0; b], vec![0.0; b]);
        for k in 0..draws {
            let x = self.run_with_summary(inst, &s, rng)?.x;
            let w = 1.0 / (k + 1) as f64;
            for j in 0..b {
                let d = x[j] - mean[j];
                mean[j] += d * w;
                m2[j] += d * (x[j] - mean[j]);
            }
        }
        Ok(m2.into_iter().map(|v| v / (draws - 1) as f64).collect())
    }
}

/// Per-instance statistic fed to the test: the mean of the per-entry
/// variances (equivalently, the mean of their empirical distribution).
pub fn variance_summary(entry_variance: &[f64]) -> f64 {
    entry_variance.iter().sum::<f64>() / entry_variance.len() as f64
}

/// Variance summaries for each instance. Instance `i` draws from its own
/// ChaCha stream `i` under `seed`, so results do not depend on order.
pub fn summaries(model: &VlistaModel, instances: &[ProblemInstance], draws: usize, seed: u64) -> Result<Vec<f64>> {
    let mut sampler = Sampler::new(model, InferenceMode::Sample)?;
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Ok(variance_summary(&sampler.entry_variance(inst, draws, &mut rng)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub dof: f64,
    /// Two-sided.
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance two-sample t-test. When both samples are
/// constant, their variances are replaced by [`VARIANCE_GUARD`].
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "Welch test needs two samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("welch_t_test"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mut va) = mean_var(a);
    let (mb, mut vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        va = VARIANCE_GUARD;
        vb = VARIANCE_GUARD;
    }
    let (sa, sb) = (va / na, vb / nb);
    let t = (ma - mb) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p_value = if t == 0.0 {
        1.0
    } else {
        beta_reg(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
    };
    Ok(WelchTest { t, dof, p_value })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct OodReport {
    pub noise_std: f64,
    pub num_draws: usize,
    pub n_id: usize,
    pub n_ood: usize,
    pub t_statistic: f64,
    pub dof: f64,
    pub p_value: f64,
    pub reject: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodDetection {
    pub test: WelchTest,
    pub reject: bool,
    pub num_draws: usize,
    pub id_summaries: Vec<f64>,
    pub candidate_summaries: Vec<f64>,
    /// Instances whose reconstructions did not vary across draws.
    pub degenerate: usize,
}

impl OodDetection {
    pub fn report(&self, noise_std: f64) -> OodReport {
        OodReport {
            noise_std,
            num_draws: self.num_draws,
            n_id: self.id_summaries.len(),
            n_ood: self.candidate_summaries.len(),
            t_statistic: self.test.t,
            dof: self.test.dof,
            p_value: self.test.p_value,
            reject: self.reject,
        }
    }
}

/// Tests whether precomputed summaries come from the same population.
pub fn detect_from_summaries(id: Vec<f64>, candidate: Vec<f64>, draws: usize, significance: f64) -> Result<OodDetection> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::InvalidArgument(format!("significance {significance} must lie in (0, 1)")));
    }
    let test = welch_t_test(&id, &candidate)?;
    let degenerate = id.iter().chain(&candidate).filter(|&&v| v == 0.0).count();
    Ok(OodDetection {
        test,
        reject: test.p_value < significance,
        num_draws: draws,
        id_summaries: id,
        candidate_summaries: candidate,
        degenerate,
    })
}

pub fn ood_detect(
    model: &VlistaModel,
    id: &[ProblemInstance],
    candidates: &[ProblemInstance],
    draws: usize,
    significance: f64,
    seed: u64,
) -> Result<OodDetection> {
    if id.is_empty() || candidates.is_empty() {
        return Err(Error::EmptySplit("ood_detect".into()));
    }
    let a = summaries(model, id, draws, seed)?;
    let b = summaries(model, candidates, draws, seed.wrapping_add(1))?;
    detect_from_summaries(a, b, draws, significance)
}

/// In-distribution and shifted-dictionary instance pools at a noise level.
/// ID is the test split with fresh noise; OOD regenerates the dataset from
/// the same configuration with a different seed (hence a new dictionary).
pub fn ood_pools(ds: &Dataset, noise_std: f64, seed: u64) -> Result<(Vec<ProblemInstance>, Vec<ProblemInstance>)> {
    let cfg = ds
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset has no generation config".into()))?;
    let id = ds.with_noise(noise_std, seed)?.split(Split::Test).to_vec();
    let shifted = GenConfig {
        seed: cfg.seed ^ OOD_STREAM ^ seed.rotate_left(32),
        noise_std,
        ..cfg.clone()
    };
    let ood = generate(&shifted)?.split(Split::Test).to_vec();
    Ok((id, ood))
}

/// Repeated tests on random subsets of two summary pools. With `disjoint`,
/// both subsets are drawn without overlap from `a` alone (ID-vs-ID).
pub fn resampled_rejections(
    a: &[f64],
    b: &[f64],
    size: usize,
    reps: usize,
    significance: f64,
    disjoint: bool,
    seed: u64,
) -> Result<Vec<bool>> {
    let need_a = if disjoint { 2 * size } else { size };
    if a.len() < need_a || (!disjoint && b.len() < size) {
        return Err(Error::InvalidArgument("pools too small for the requested subset size".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..reps)
        .map(|_| {
            let mut ia: Vec<usize> = (0..a.len()).collect();
            ia.shuffle(&mut rng);
            let first: Vec<f64> = ia[..size].iter().map(|&i| a[i]).collect();
            let second: Vec<f64> = if disjoint {
                ia[size..2 * size].iter().map(|&i| a[i]).collect()
            } else {
                let mut ib: Vec<usize> = (0..b.len()).collect();
                ib.shuffle(&mut rng);
                ib[..size].iter().map(|&i| b[i]).collect()
            };
            Ok(detect_from_summaries(first, second, 0, significance)?.reject)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_do_not_reject() {
        let a = [0.3, 0.1, 0.7, 0.2];
        let w = welch_t_test(&a, &a).unwrap();
        assert_eq!(w.t, 0.0);
        assert_eq!(w.p_value, 1.0);
    }

    #[test]
    fn separated_constants_reject() {
        let w = welch_t_test(&[0.0; 3], &[1.0; 3]).unwrap();
        assert!(w.p_value < 1e-6, "{w:?}");
        assert!((w.dof - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_samples_are_rejected() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn summary_is_mean() {
        assert_eq!(variance_summary(&[1.0, 2.0, 3.0, 6.0]), 3.0);
    }
}
