//! Classical baselines: soft-thresholding, ISTA, spectral norm and a
//! coordinate-descent LASSO solver used as the reference minimiser.

use serde::{Deserialize, Serialize};

use crate::data::ProblemInstance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `sign(u)·max(|u|−θ, 0)` for one entry.
#[inline]
pub fn shrink(u: f64, theta: f64) -> f64 {
    if u > theta {
        u - theta
    } else if u < -theta {
        u + theta
    } else {
        0.0
    }
}

pub fn soft_threshold(u: &[f64], theta: f64) -> Result<Vec<f64>> {
    if theta < 0.0 || theta.is_nan() {
        return Err(Error::InvalidArgument(format!("negative threshold {theta}")));
    }
    Ok(u.iter().map(|&v| shrink(v, theta)).collect())
}

/// Largest singular value by power iteration on `AᵀA`, stopping when the
/// Rayleigh quotient changes by less than 1e-10 (relative) or after 1000 steps.
pub fn spectral_norm(a: &Tensor) -> Result<f64> {
    if a.rank() != 2 {
        return Err(Error::shape("spectral_norm", a.shape(), &[]));
    }
    if a.data().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let c = a.cols();
    // Start from the heaviest column direction blended with ones so that
    // the start is never orthogonal to the top singular vector by accident.
    let norms = a.column_norms();
    let mut v: Vec<f64> = norms.iter().map(|n| 1.0 + n).collect();
    normalize(&mut v);
    let mut prev = 0.0;
    for _ in 0..1000 {
        let av = a.matvec(&v)?;
        let mut w = a.t_matvec(&av)?;
        let lambda: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        if normalize(&mut w) == 0.0 {
            break;
        }
        v = w;
        if (lambda - prev).abs() <= 1e-10 * lambda.abs() {
            prev = lambda;
            break;
        }
        prev = lambda;
    }
    debug_assert_eq!(v.len(), c);
    Ok(prev.max(0.0).sqrt())
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    /// `1/σ_max(ΦΨ)²`, computed per instance.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IstaConfig {
    pub iterations: usize,
    pub theta: f64,
    pub gamma: StepSize,
}

impl IstaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::InvalidConfig(format!("theta {} must be > 0", self.theta)));
        }
        if let StepSize::Fixed(g) = self.gamma {
            if !(g > 0.0) {
                return Err(Error::InvalidConfig(format!("gamma {g} must be > 0")));
            }
        }
        Ok(())
    }
}

/// `ΦΨ`, checking shapes against the instance.
pub fn effective_matrix(inst: &ProblemInstance, psi: &Tensor) -> Result<Tensor> {
    if inst.phi.rank() != 2 || psi.rank() != 2 || inst.phi.cols() != psi.rows() || inst.y.len() != inst.phi.rows() {
        return Err(Error::shape("effective_matrix", inst.phi.shape(), psi.shape()));
    }
    inst.phi.matmul(psi)
}

pub fn resolve_gamma(a: &Tensor, gamma: StepSize) -> Result<f64> {
    match gamma {
        StepSize::Auto => {
            let s = spectral_norm(a)?;
            Ok(1.0 / (s * s))
        }
        StepSize::Fixed(g) => Ok(g),
    }
}

/// One ISTA/DLISTA layer: `η_θ(x + γ Aᵀ(y − A x))`.
pub fn ista_step(a: &Tensor, y: &[f64], x: &[f64], gamma: f64, theta: f64) -> Result<Vec<f64>> {
    let ax = a.matvec(x)?;
    let r: Vec<f64> = y.iter().zip(&ax).map(|(yi, ai)| yi - ai).collect();
    let g = a.t_matvec(&r)?;
    Ok(x.iter()
        .zip(&g)
        .map(|(xi, gi)| shrink(xi + gamma * gi, theta))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IstaRun {
    pub x: Vec<f64>,
    /// `x₀ … x_T`
    pub trajectory: Vec<Vec<f64>>,
    pub gamma: f64,
}

pub fn ista_solve(inst: &ProblemInstance, psi: &Tensor, cfg: &IstaConfig) -> Result<IstaRun> {
    cfg.validate()?;
    let a = effective_matrix(inst, psi)?;
    let gamma = resolve_gamma(&a, cfg.gamma)?;
    let b = a.cols();
    let mut x = vec![0.0; b];
    let mut trajectory = Vec::with_capacity(cfg.iterations + 1);
    trajectory.push(x.clone());
    for _ in 0..cfg.iterations {
        x = ista_step(&a, inst.y.data(), &x, gamma, cfg.theta)?;
        trajectory.push(x.clone());
    }
    Ok(IstaRun { x, trajectory, gamma })
}

/// `½‖y − A x‖² + ρ‖x‖₁`
pub fn lasso_objective(a: &Tensor, y: &[f64], x: &[f64], rho: f64) -> Result<f64> {
    let ax = a.matvec(x)?;
    let fit: f64 = y.iter().zip(&ax).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(0.5 * fit + rho * x.iter().map(|v| v.abs()).sum::<f64>())
}

/// Cyclic coordinate descent on `½‖y − ΦΨx‖² + ρ‖x‖₁`, stopping when no
/// coordinate moves by more than 1e-10 in a sweep.
pub fn lasso_oracle(inst: &ProblemInstance, psi: &Tensor, rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("lasso penalty {rho} must be > 0")));
    }
    let a = effective_matrix(inst, psi)?;
    lasso_cd(&a, inst.y.data(), rho, 1e-10, 1_000_000)
}

pub fn lasso_cd(a: &Tensor, y: &[f64], rho: f64, tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
    let (m, b) = (a.rows(), a.cols());
    if y.len() != m {
        return Err(Error::shape("lasso", a.shape(), &[y.len()]));
    }
    let at = a.transpose();
    let col_sq: Vec<f64> = a.column_norms().iter().map(|n| n * n).collect();
    let mut x = vec![0.0; b];
    let mut r = y.to_vec();
    for _ in 0..max_sweeps {
        let mut max_change: f64 = 0.0;
        for j in 0..b {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = &at.data()[j * m..(j + 1) * m];
            let rho_j: f64 = col.iter().zip(&r).map(|(c, ri)| c * ri).sum::<f64>() + col_sq[j] * x[j];
            let new = shrink(rho_j, rho) / col_sq[j];
            let d = new - x[j];
            if d != 0.0 {
                for (ri, c) in r.iter_mut().zip(col) {
                    *ri -= d * c;
                }
                x[j] = new;
                max_change = max_change.max(d.abs());
            }
        }
        if max_change < tol {
            break;
        }
    }
    Ok(x)
}
