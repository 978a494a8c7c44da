//! Eight summary statistics of the effective matrix `A = ΦΨ` that feed the
//! augmentation head: column-norm min/mean/max, max and mean absolute
//! off-diagonal entries of the normalised Gram matrix, `log m`, `log b`, and
//! `σ_max(A)` from a fixed 10-step power iteration.

use crate::autodiff::CustomOp;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const NUM_FEATURES: usize = 8;
pub const POWER_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub values: [f64; NUM_FEATURES],
    /// `A` was identically zero; coherence and σ terms were set to 0.
    pub degenerate: bool,
}

pub fn augmentation_features(phi: &Tensor, psi: &Tensor) -> Result<Features> {
    if phi.rank() != 2 || psi.rank() != 2 || phi.cols() != psi.rows() {
        return Err(Error::shape("augmentation_features", phi.shape(), psi.shape()));
    }
    features_of(&phi.matmul(psi)?)
}

pub fn features_of(a: &Tensor) -> Result<Features> {
    let (out, saved) = FeatureOp.forward(&[a])?;
    let mut values = [0.0; NUM_FEATURES];
    values.copy_from_slice(out.data());
    Ok(Features {
        values,
        degenerate: saved.is_empty(),
    })
}

/// Index of the first minimum / maximum.
fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Column-normalised copy of `a` (zero columns stay zero) and the norms.
fn normalised(a: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, b) = (a.rows(), a.cols());
    let norms = a.column_norms();
    let mut ahat = a.data().to_vec();
    for i in 0..m {
        for j in 0..b {
            if norms[j] > 0.0 {
                ahat[i * b + j] /= norms[j];
            }
        }
    }
    (ahat, norms)
}

struct Power {
    /// `v₀ … v_K`, each length b
    v: Vec<Vec<f64>>,
    /// `w_k = A v_k` for k = 0..=K
    w: Vec<Vec<f64>>,
    /// `‖Aᵀ w_k‖` for k = 0..K−1
    n: Vec<f64>,
    sigma: f64,
}

fn power_iterate(a: &Tensor) -> Result<Power> {
    let b = a.cols();
    let mut v = vec![vec![1.0 / (b as f64).sqrt(); b]];
    let mut w = Vec::new();
    let mut n = Vec::new();
    for k in 0..POWER_STEPS {
        w.push(a.matvec(&v[k])?);
        let z = a.t_matvec(&w[k])?;
        let nk = crate::tensor::dot(&z, &z).sqrt();
        if nk == 0.0 {
            return Ok(Power { v, w, n, sigma: 0.0 });
        }
        n.push(nk);
        v.push(z.into_iter().map(|x| x / nk).collect());
    }
    let last = a.matvec(&v[POWER_STEPS])?;
    let sigma = crate::tensor::dot(&last, &last).sqrt();
    w.push(last);
    Ok(Power { v, w, n, sigma })
}

/// The feature map as a graph op with an analytic backward pass.
/// Selections (min/max) route the gradient to the first selected element.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureOp;

impl CustomOp for FeatureOp {
    fn name(&self) -> &'static str {
        "augmentation-features"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        let a = inputs[0];
        if a.rank() != 2 {
            return Err(Error::shape("augmentation-features", a.shape(), &[]));
        }
        let (m, b) = (a.rows(), a.cols());
        let mut f = [0.0; NUM_FEATURES];
        f[5] = (m as f64).ln();
        f[6] = (b as f64).ln();
        if a.data().iter().all(|&x| x == 0.0) {
            return Ok((Tensor::vector(f.to_vec()), Vec::new()));
        }
        let (ahat, norms) = normalised(a);
        f[0] = norms[argmin(&norms)];
        f[1] = norms.iter().sum::<f64>() / b as f64;
        f[2] = norms[argmax(&norms)];
        let mut gram = vec![0.0; b * b];
        gemm(b, m, b, &ahat, true, &ahat, false, &mut gram, 0.0);
        // The Gram matrix is symmetric; its upper triangle is the canonical copy.
        if b > 1 {
            let (mut mx, mut total) = (0.0f64, 0.0);
            for i in 0..b {
                for &gij in &gram[i * b + i + 1..(i + 1) * b] {
                    let g = gij.abs();
                    mx = mx.max(g);
                    total += g;
                }
            }
            f[3] = mx;
            f[4] = 2.0 * total / (b * (b - 1)) as f64;
        }
        let p = power_iterate(a)?;
        f[7] = p.sigma;
        let flat = |rows: &[Vec<f64>]| -> Tensor {
            let width = rows.first().map_or(0, Vec::len);
            Tensor::raw(vec![rows.len(), width], rows.concat())
        };
        Ok((
            Tensor::vector(f.to_vec()),
            vec![
                Tensor::raw(vec![m, b], ahat),
                Tensor::raw(vec![b, b], gram),
                flat(&p.v),
                flat(&p.w),
                Tensor::vector(p.n),
            ],
        ))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: &[Tensor],
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let a = inputs[0];
        let (m, b) = (a.rows(), a.cols());
        if saved.is_empty() {
            return Ok(vec![Some(Tensor::zeros(a.shape()))]);
        }
        let g = grad.data();
        let ahat = saved[0].data();
        let gram = saved[1].data();
        let norms = a.column_norms();

        // Gradient with respect to the column norms.
        let mut dnorm = vec![g[1] / b as f64; b];
        dnorm[argmin(&norms)] += g[0];
        dnorm[argmax(&norms)] += g[2];

        // G = ÂᵀÂ is symmetric, so dÂ = Â S with S = dG + dGᵀ.
        let mut sym = vec![0.0; b * b];
        if b > 1 {
            let coef = 2.0 * g[4] / (b * (b - 1)) as f64;
            let mut best = (0usize, 1usize, f64::NEG_INFINITY);
            for i in 0..b {
                for j in i + 1..b {
                    let gij = gram[i * b + j];
                    let s = coef * sign(gij);
                    sym[i * b + j] = s;
                    sym[j * b + i] = s;
                    if gij.abs() > best.2 {
                        best = (i, j, gij.abs());
                    }
                }
            }
            let (i, j) = (best.0, best.1);
            let s = g[3] * sign(gram[i * b + j]);
            sym[i * b + j] += s;
            sym[j * b + i] += s;
        }
        let mut dahat = vec![0.0; m * b];
        gemm(m, b, b, ahat, false, &sym, false, &mut dahat, 0.0);

        // Back through Â_i = A_i / c_i and c_i = ‖A_i‖.
        let mut proj = vec![0.0; b];
        for i in 0..m {
            for j in 0..b {
                proj[j] += ahat[i * b + j] * dahat[i * b + j];
            }
        }
        let mut da = vec![0.0; m * b];
        for i in 0..m {
            for j in 0..b {
                let k = i * b + j;
                let c = norms[j];
                if c > 0.0 {
                    da[k] = (dahat[k] - ahat[k] * proj[j]) / c + dnorm[j] * ahat[k];
                }
            }
        }

        // Reverse pass through the power iteration; `σ = 0` means it stopped
        // early on an exact null direction and carries no gradient.
        let (vs, ws, ns) = (&saved[2], &saved[3], saved[4].data());
        let sigma = output.data()[7];
        if g[7] != 0.0 && ns.len() == POWER_STEPS && sigma > 0.0 {
            let mut add_outer = |u: &[f64], v: &[f64]| {
                for (i, &ui) in u.iter().enumerate() {
                    for (d, &vj) in da[i * b..(i + 1) * b].iter_mut().zip(v) {
                        *d += ui * vj;
                    }
                }
            };
            let dw: Vec<f64> = row(ws, POWER_STEPS, m).iter().map(|x| g[7] * x / sigma).collect();
            add_outer(&dw, row(vs, POWER_STEPS, b));
            let mut dv = a.t_matvec(&dw)?;
            for k in (0..POWER_STEPS).rev() {
                let vn = row(vs, k + 1, b);
                let dot: f64 = crate::tensor::dot(vn, &dv);
                let dz: Vec<f64> = dv.iter().zip(vn).map(|(d, x)| (d - x * dot) / ns[k]).collect();
                // z = Aᵀ w
                add_outer(row(ws, k, m), &dz);
                let dwk = a.matvec(&dz)?;
                // w = A v
                add_outer(&dwk, row(vs, k, b));
                if k > 0 {
                    dv = a.t_matvec(&dwk)?;
                }
            }
        }
        Ok(vec![Some(Tensor::raw(vec![m, b], da))])
    }
}

fn row(t: &Tensor, k: usize, len: usize) -> &[f64] {
    &t.data()[k * len..(k + 1) * len]
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
