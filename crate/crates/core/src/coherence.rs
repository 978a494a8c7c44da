//! Coherence quantities of an unrolled layer and offline checks of the
//! no-false-positive threshold condition and the per-layer ℓ1 error bound.
//!
//! With `A = ΦΨ_t`, `S = supp(x*)` and `e = x_{t−1} − x*`:
//!
//! * `μ̃  = max_{i≠j} |A_iᵀ A_j|`
//! * `μ̃₂ = max_{i,j} |A_iᵀ (Φ(Ψ_t − Ψ_o))_j|`
//! * `δ  = max_i |1 − γ‖A_i‖²|`
//! * threshold condition: `γ(μ̃‖e‖₁ + μ̃₂‖x*‖₁) ≤ θ`
//! * error bound: `‖x_t − x*‖₁ ≤ (δ + γμ̃(|S|−1))‖e‖₁ + γμ̃₂|S|‖x*‖₁ + |S|θ`
//!
//! These need the ground truth and are diagnostics only, never used by solvers.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gaussian_matrix, random_dictionary, support, ProblemInstance};
use crate::error::{Error, Result};
use crate::ista::{ista_step, spectral_norm};
use crate::tensor::{dot, Tensor};

/// Roundoff slack used when comparing the error bound.
pub const BOUND_SLACK: f64 = 1e-9;

fn columns(a: &Tensor) -> Vec<Vec<f64>> {
    let t = a.transpose();
    let m = a.rows();
    t.data().chunks(m.max(1)).map(<[f64]>::to_vec).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

/// Largest absolute inner product between distinct columns. With `normalized`
/// the columns are scaled to unit norm first (zero columns stay zero).
pub fn mutual_coherence(a: &Tensor, normalized: bool) -> Result<f64> {
    if a.rank() != 2 || a.cols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mutual coherence needs at least 2 columns, got shape {:?}",
            a.shape()
        )));
    }
    let mut cols = columns(a);
    if normalized {
        cols = cols.into_iter().map(unit).collect();
    }
    let mut best = 0.0f64;
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            best = best.max(dot(&cols[i], &cols[j]).abs());
        }
    }
    Ok(best)
}

/// Largest `|(ΦΨ_t)_iᵀ (Φ(Ψ_t − Ψ_o))_j|` over all pairs, diagonal included.
pub fn generalized_coherence(phi: &Tensor, psi_t: &Tensor, psi_o: &Tensor) -> Result<f64> {
    if psi_t.shape() != psi_o.shape() {
        return Err(Error::shape("generalized_coherence", psi_t.shape(), psi_o.shape()));
    }
    if phi.rank() != 2 || phi.cols() != psi_t.rows() {
        return Err(Error::shape("generalized_coherence", phi.shape(), psi_t.shape()));
    }
    let a = columns(&phi.matmul(psi_t)?);
    let d = columns(&phi.matmul(&psi_t.sub(psi_o)?)?);
    let mut best = 0.0f64;
    for ai in &a {
        for dj in &d {
            best = best.max(dot(ai, dj).abs());
        }
    }
    Ok(best)
}

/// `max_i |1 − γ‖(ΦΨ_t)_i‖²|`
pub fn delta(gamma: f64, phi: &Tensor, psi_t: &Tensor) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size {gamma} must be >= 0")));
    }
    if phi.rank() != 2 || psi_t.rank() != 2 || phi.cols() != psi_t.rows() {
        return Err(Error::shape("delta", phi.shape(), psi_t.shape()));
    }
    Ok(delta_of(gamma, &phi.matmul(psi_t)?))
}

pub(crate) fn delta_of(gamma: f64, a: &Tensor) -> f64 {
    a.column_norms()
        .iter()
        .fold(0.0f64, |m, c| m.max((1.0 - gamma * c * c).abs()))
}

/// Per-layer settings of a solver run.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub psi: Tensor,
    pub gamma: f64,
    pub theta: f64,
}

/// A finished solver pass: `trajectory = [x₀, …, x_T]` and one spec per layer.
#[derive(Clone, Debug)]
pub struct SolverRun {
    pub phi: Tensor,
    pub x_star: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
    pub layers: Vec<LayerSpec>,
}

impl SolverRun {
    fn check_aligned(&self) -> Result<()> {
        if self.trajectory.len() != self.layers.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "trajectory has {} iterates for {} layers",
                self.trajectory.len(),
                self.layers.len()
            )));
        }
        let b = self.x_star.len();
        if self.trajectory.iter().any(|x| x.len() != b) {
            return Err(Error::InvalidArgument("trajectory iterate length differs from x*".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
    /// `supp(x_t) ⊆ supp(x*)` actually held.
    pub no_false_positive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
    pub contraction: f64,
}

/// All per-layer quantities of one run, one JSON record each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub instance: usize,
    pub t: usize,
    pub mu: f64,
    pub mu2: f64,
    pub delta: f64,
    pub support_size: usize,
    pub threshold_lhs: f64,
    pub threshold_rhs: f64,
    pub threshold_ok: bool,
    pub no_false_positive: bool,
    pub contraction: f64,
    pub bound_lhs: f64,
    pub bound_rhs: f64,
    pub bound_ok: bool,
}

struct LayerTerms {
    mu: f64,
    mu2: f64,
    delta: f64,
}

fn layer_terms(phi: &Tensor, spec: &LayerSpec, psi_o: &Tensor) -> Result<LayerTerms> {
    let a = phi.matmul(&spec.psi)?;
    Ok(LayerTerms {
        mu: mutual_coherence(&a, false)?,
        mu2: generalized_coherence(phi, &spec.psi, psi_o)?,
        delta: delta_of(spec.gamma, &a),
    })
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn l1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

fn within_support(x: &[f64], x_star: &[f64]) -> bool {
    x.iter().zip(x_star).all(|(xi, si)| *xi == 0.0 || *si != 0.0)
}

/// `γ(μ̃‖x* − x‖₁ + μ̃₂‖x*‖₁)`
fn threshold_lhs(gamma: f64, terms: &LayerTerms, x_prev: &[f64], x_star: &[f64]) -> f64 {
    gamma * (terms.mu * l1_diff(x_prev, x_star) + terms.mu2 * l1(x_star))
}

fn threshold_from(t: usize, terms: &LayerTerms, run: &SolverRun) -> ThresholdCheck {
    let spec = &run.layers[t - 1];
    let lhs = threshold_lhs(spec.gamma, terms, &run.trajectory[t - 1], &run.x_star);
    ThresholdCheck {
        t,
        lhs,
        rhs: spec.theta,
        ok: lhs <= spec.theta,
        no_false_positive: within_support(&run.trajectory[t], &run.x_star),
    }
}

fn bound_from(t: usize, terms: &LayerTerms, run: &SolverRun) -> BoundCheck {
    let spec = &run.layers[t - 1];
    let s = support(&run.x_star).len() as f64;
    let contraction = terms.delta + spec.gamma * terms.mu * (s - 1.0).max(0.0);
    let rhs = contraction * l1_diff(&run.trajectory[t - 1], &run.x_star)
        + spec.gamma * terms.mu2 * s * l1(&run.x_star)
        + s * spec.theta;
    let lhs = l1_diff(&run.trajectory[t], &run.x_star);
    BoundCheck {
        t,
        lhs,
        rhs,
        ok: lhs <= rhs + BOUND_SLACK,
        contraction,
    }
}

pub fn check_threshold_condition(run: &SolverRun, psi_o: &Tensor) -> Result<Vec<ThresholdCheck>> {
    run.check_aligned()?;
    (1..=run.layers.len())
        .map(|t| Ok(threshold_from(t, &layer_terms(&run.phi, &run.layers[t - 1], psi_o)?, run)))
        .collect()
}

pub fn check_error_bound(run: &SolverRun, psi_o: &Tensor) -> Result<Vec<BoundCheck>> {
    run.check_aligned()?;
    (1..=run.layers.len())
        .map(|t| Ok(bound_from(t, &layer_terms(&run.phi, &run.layers[t - 1], psi_o)?, run)))
        .collect()
}

pub fn diagnose_run(instance: usize, run: &SolverRun, psi_o: &Tensor) -> Result<Vec<LayerDiagnostics>> {
    run.check_aligned()?;
    let s = support(&run.x_star).len();
    (1..=run.layers.len())
        .map(|t| {
            let terms = layer_terms(&run.phi, &run.layers[t - 1], psi_o)?;
            let th = threshold_from(t, &terms, run);
            let bd = bound_from(t, &terms, run);
            Ok(LayerDiagnostics {
                instance,
                t,
                mu: terms.mu,
                mu2: terms.mu2,
                delta: terms.delta,
                support_size: s,
                threshold_lhs: th.lhs,
                threshold_rhs: th.rhs,
                threshold_ok: th.ok,
                no_false_positive: th.no_false_positive,
                contraction: bd.contraction,
                bound_lhs: bd.lhs,
                bound_rhs: bd.rhs,
                bound_ok: bd.ok,
            })
        })
        .collect()
}

/// Absolute margin added to each certified threshold. When the condition is
/// tight (a single support entry) the off-support pre-threshold value equals
/// the left-hand side exactly and roundoff could otherwise leak through.
pub const CERTIFY_MARGIN: f64 = 1e-12;

/// Runs `layers` ISTA steps with `Ψ_t = Ψ_o`, `γ = 1/σ_max(ΦΨ_o)²`, and each
/// `θ_t` set to the threshold-condition left-hand side at that step, plus
/// [`CERTIFY_MARGIN`].
pub fn certified_run(inst: &ProblemInstance, psi_o: &Tensor, layers: usize) -> Result<SolverRun> {
    let a = inst.phi.matmul(psi_o)?;
    let gamma = 1.0 / spectral_norm(&a)?.powi(2);
    let spec = LayerSpec {
        psi: psi_o.clone(),
        gamma,
        theta: 0.0,
    };
    let terms = layer_terms(&inst.phi, &spec, psi_o)?;
    let x_star = inst.x_star.data().to_vec();
    let y = inst.y.data();
    let mut x = vec![0.0; x_star.len()];
    let mut trajectory = vec![x.clone()];
    let mut specs = Vec::with_capacity(layers);
    for _ in 0..layers {
        let theta = threshold_lhs(gamma, &terms, &x, &x_star) + CERTIFY_MARGIN;
        x = ista_step(&a, y, &x, gamma, theta)?;
        trajectory.push(x.clone());
        specs.push(LayerSpec { theta, ..spec.clone() });
    }
    Ok(SolverRun {
        phi: inst.phi.clone(),
        x_star,
        trajectory,
        layers: specs,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificationSummary {
    pub trials: usize,
    pub layers: usize,
    pub false_positive_violations: usize,
    pub threshold_violations: usize,
    pub bound_violations: usize,
    /// Largest `lhs − rhs` of the error bound (negative when it always held).
    pub worst_bound_margin: f64,
}

impl CertificationSummary {
    pub fn passed(&self) -> bool {
        self.false_positive_violations == 0 && self.threshold_violations == 0 && self.bound_violations == 0
    }
}

/// Certifies every instance and streams one JSON record per layer to `sink`.
pub fn certify<'a, I, W>(instances: I, psi_o: &Tensor, layers: usize, mut sink: Option<W>) -> Result<CertificationSummary>
where
    I: IntoIterator<Item = &'a ProblemInstance>,
    W: Write,
{
    let mut summary = CertificationSummary {
        layers,
        worst_bound_margin: f64::NEG_INFINITY,
        ..Default::default()
    };
    for inst in instances {
        let run = certified_run(inst, psi_o, layers)?;
        for rec in diagnose_run(inst.index, &run, psi_o)? {
            summary.false_positive_violations += usize::from(!rec.no_false_positive);
            summary.threshold_violations += usize::from(!rec.threshold_ok);
            summary.bound_violations += usize::from(!rec.bound_ok);
            summary.worst_bound_margin = summary.worst_bound_margin.max(rec.bound_lhs - rec.bound_rhs);
            if let Some(w) = sink.as_mut() {
                let line = serde_json::to_string(&rec).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io("<diagnostics sink>", e))?;
            }
        }
        summary.trials += 1;
    }
    Ok(summary)
}

/// A noiseless random instance with its own column-normalised `Ψ_o`.
pub fn random_instance(rng: &mut impl Rng, m: usize, n: usize, b: usize, p: f64) -> (ProblemInstance, Tensor) {
    let psi_o = random_dictionary(rng, n, b);
    let phi = gaussian_matrix(rng, m, n);
    let x: Vec<f64> = (0..b)
        .map(|_| {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            if rng.random_bool(p) {
                v
            } else {
                0.0
            }
        })
        .collect();
    let x_star = Tensor::vector(x);
    let s = psi_o.matvec(x_star.data()).expect("shapes fixed above");
    let y = Tensor::vector(phi.matvec(&s).expect("shapes fixed above"));
    (
        ProblemInstance {
            y,
            phi,
            x_star,
            index: 0,
        },
        psi_o,
    )
}
