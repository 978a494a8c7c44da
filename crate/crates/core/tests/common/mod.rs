//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's numerical kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sparselab::data::ProblemInstance;
use sparselab::optim::ParamSet;
use sparselab::vlista::VlistaModel;
use sparselab::Tensor;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn gaussian(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian_vec(rng, len, scale)).unwrap()
}

pub mod chains;

// ---------------------------------------------------------------- linear algebra

pub fn mat(rows: usize, cols: usize, data: &[f64]) -> Vec<Vec<f64>> {
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    mat(t.rows(), t.cols(), t.data())
}

pub fn mv(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn mtv(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().zip(x).map(|(r, xi)| r[j] * xi).sum()).collect()
}

pub fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|r| (0..cols).map(|j| (0..k).map(|l| r[l] * b[l][j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(sym: &[Vec<f64>]) -> Vec<f64> {
    let n = sym.len();
    let mut a = sym.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Largest singular value via the eigenvalues of `AᵀA`.
pub fn spectral_norm_oracle(a: &[Vec<f64>]) -> f64 {
    let ata = mm(&transpose(a), a);
    jacobi_eigenvalues(&ata).into_iter().fold(0.0, f64::max).sqrt()
}

// ---------------------------------------------------------------- LASSO

pub fn soft(u: f64, t: f64) -> f64 {
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

/// `½‖y − Ax‖² + ρ‖x‖₁`
pub fn lasso_value(a: &[Vec<f64>], y: &[f64], x: &[f64], rho: f64) -> f64 {
    let r: Vec<f64> = mv(a, x).iter().zip(y).map(|(p, q)| q - p).collect();
    0.5 * r.iter().map(|v| v * v).sum::<f64>() + rho * x.iter().map(|v| v.abs()).sum::<f64>()
}

/// Cyclic coordinate descent run to a tight fixed point.
pub fn lasso_cd_oracle(a: &[Vec<f64>], y: &[f64], rho: f64) -> Vec<f64> {
    let b = a[0].len();
    let col_sq: Vec<f64> = (0..b).map(|j| a.iter().map(|r| r[j] * r[j]).sum()).collect();
    let mut x = vec![0.0; b];
    let mut r = y.to_vec();
    for _ in 0..100_000 {
        let mut change = 0.0f64;
        for j in 0..b {
            if col_sq[j] == 0.0 {
                continue;
            }
            let rho_j: f64 = a.iter().zip(&r).map(|(row, ri)| row[j] * ri).sum::<f64>() + col_sq[j] * x[j];
            let new = soft(rho_j, rho) / col_sq[j];
            let d = new - x[j];
            if d != 0.0 {
                for (ri, row) in r.iter_mut().zip(a) {
                    *ri -= d * row[j];
                }
                x[j] = new;
            }
            change = change.max(d.abs());
        }
        if change < 1e-15 {
            break;
        }
    }
    x
}

// ---------------------------------------------------------------- calculus

/// Central finite differences of `f` with respect to every parameter entry.
pub fn fd_gradient(f: &mut dyn FnMut(&ParamSet) -> f64, params: &ParamSet, eps: f64) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, value) in params {
        let mut g = vec![0.0; value.len()];
        for k in 0..value.len() {
            let mut p = params.clone();
            let base = value.data()[k];
            p.get_mut(name).unwrap().data_mut()[k] = base + eps;
            let up = f(&p);
            p.get_mut(name).unwrap().data_mut()[k] = base - eps;
            let down = f(&p);
            g[k] = (up - down) / (2.0 * eps);
        }
        out.insert(name.clone(), Tensor::new(value.shape().to_vec(), g).unwrap());
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over all entries of two tensor maps.
pub fn rel_error(a: &ParamSet, b: &ParamSet, floor: f64) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (k, va) in a {
        let vb = &b[k];
        for (x, y) in va.data().iter().zip(vb.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}

/// `KL(N(mq, vq) ‖ N(mp, vp))` by composite Simpson quadrature of
/// `q log(q/p)` over ±14 standard deviations of `q`.
pub fn kl_quadrature(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
    let sq = vq.sqrt();
    let (lo, hi) = (mq - 14.0 * sq, mq + 14.0 * sq);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let log_pdf = |x: f64, m: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m) * (x - m) / (2.0 * v);
    let f = |x: f64| {
        let lq = log_pdf(x, mq, vq);
        lq.exp() * (lq - log_pdf(x, mp, vp))
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

// ---------------------------------------------------------------- statistics

/// Regularised incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - incomplete_beta(b, a, 1.0 - x);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = 1.0 + num / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        h *= d * c;
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = 1.0 + num / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    ln_front.exp() * h / a
}

/// `ln Γ` by the Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut s = G[0];
    for (i, g) in G.iter().enumerate().skip(1) {
        s += g / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Textbook Welch test: `(t, dof, two-sided p)`.
pub fn welch_reference(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (n1, m1, v1) = stats(a);
    let (n2, m2, v2) = stats(b);
    let se2 = v1 / n1 + v2 / n2;
    let t = (m1 - m2) / se2.sqrt();
    let dof = se2 * se2 / ((v1 / n1).powi(2) / (n1 - 1.0) + (v2 / n2).powi(2) / (n2 - 1.0));
    let p = incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
    (t, dof, p)
}

// ---------------------------------------------------------------- VLISTA

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn dense(params: &ParamSet, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
    let wt = &params[w];
    let rows = mat(wt.rows(), wt.cols(), wt.data());
    mv(&rows, x).iter().zip(params[b].data()).map(|(p, q)| p + q).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// The eight effective-matrix statistics, recomputed with plain loops.
pub fn features_reference(a: &[Vec<f64>]) -> [f64; 8] {
    let (m, b) = (a.len(), a[0].len());
    let mut f = [0.0; 8];
    f[5] = (m as f64).ln();
    f[6] = (b as f64).ln();
    if a.iter().flatten().all(|&v| v == 0.0) {
        return f;
    }
    let norms: Vec<f64> = (0..b).map(|j| a.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt()).collect();
    f[0] = norms.iter().copied().fold(f64::INFINITY, f64::min);
    f[1] = norms.iter().sum::<f64>() / b as f64;
    f[2] = norms.iter().copied().fold(0.0, f64::max);
    let (mut mx, mut total, mut count) = (0.0f64, 0.0, 0usize);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let mut g = 0.0;
            for r in a {
                let (u, v) = (
                    if norms[i] > 0.0 { r[i] / norms[i] } else { 0.0 },
                    if norms[j] > 0.0 { r[j] / norms[j] } else { 0.0 },
                );
                g += u * v;
            }
            mx = mx.max(g.abs());
            total += g.abs();
            count += 1;
        }
    }
    if count > 0 {
        f[3] = mx;
        f[4] = total / count as f64;
    }
    let mut v = vec![1.0 / (b as f64).sqrt(); b];
    for _ in 0..10 {
        let z = mtv(a, &mv(a, &v));
        let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nz == 0.0 {
            break;
        }
        v = z.into_iter().map(|x| x / nz).collect();
    }
    f[7] = mv(a, &v).iter().map(|x| x * x).sum::<f64>().sqrt();
    f
}

fn standardise(f: &[f64], shift: &Tensor, inv: &Tensor) -> Vec<f64> {
    f.iter()
        .zip(shift.data())
        .zip(inv.data())
        .map(|((x, s), i)| (x - s) * i)
        .collect()
}

/// Augmentation head on `A`: `(θ, γ)`.
pub fn head_reference(model_params: &ParamSet, buffers: &ParamSet, a: &[Vec<f64>]) -> (f64, f64) {
    let z = standardise(&features_reference(a), &buffers["head.shift"], &buffers["head.inv_scale"]);
    let h = relu(dense(model_params, "head.w1", "head.b1", &z));
    let o = dense(model_params, "head.w2", "head.b2", &h);
    (softplus(o[0]), softplus(o[1]))
}

/// `η_θ(x + γ (ΦΨ)ᵀ(y − ΦΨx))`
pub fn layer_reference(phi: &[Vec<f64>], psi: &[Vec<f64>], y: &[f64], x: &[f64], theta: f64, gamma: f64) -> Vec<f64> {
    let a = mm(phi, psi);
    let r: Vec<f64> = y.iter().zip(mv(&a, x)).map(|(p, q)| p - q).collect();
    let g = mtv(&a, &r);
    x.iter().zip(g).map(|(xi, gi)| soft(xi + gamma * gi, theta)).collect()
}

fn kl_sum(mq: &[f64], vq: &[f64], mp: &[f64], vp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|k| 0.5 * (vp[k] / vq[k]).ln() + (vq[k] + (mq[k] - mp[k]).powi(2)) / (2.0 * vp[k]) - 0.5)
        .sum()
}

/// One-chain ELBO written directly from the objective with nested loops;
/// `noise[t]` holds the `n·b` standard normals of layer `t`.
pub fn elbo_reference(model: &VlistaModel, inst: &ProblemInstance, noise: &[Vec<f64>]) -> f64 {
    let p = &model.params;
    let (n, b) = (model.dims.n, model.dims.b);
    let nb = n * b;
    let cfg = &model.config;
    let phi = rows_of(&inst.phi);
    let y = inst.y.data().to_vec();
    let x_star = inst.x_star.data();
    let identity: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let summary = standardise(
        &features_reference(&mm(&phi, &identity)),
        &model.buffers["post.phi_shift"],
        &model.buffers["post.phi_inv_scale"],
    );
    let d2 = cfg.delta_lik * cfg.delta_lik;
    let mut x = vec![0.0; b];
    let mut prev: Option<Vec<f64>> = None;
    let (mut loglik, mut kl) = (0.0, 0.0);
    for eps in noise.iter().take(cfg.layers) {
        let hx = relu(dense(p, "post.wx", "post.bx", &x));
        let hy = relu(dense(p, "post.wy", "post.by", &y));
        let hf = relu(dense(p, "post.wf", "post.bf", &summary));
        let cat: Vec<f64> = hx.into_iter().chain(hy).chain(hf).collect();
        let t = relu(dense(p, "post.wt", "post.bt", &cat));
        let mu = dense(p, "post.wmu", "post.bmu", &t);
        let var: Vec<f64> = dense(p, "post.wvar", "post.bvar", &t)
            .into_iter()
            .map(|r| softplus(r) + 1e-6)
            .collect();
        let sample: Vec<f64> = (0..nb).map(|k| mu[k] + var[k].sqrt() * eps[k]).collect();
        kl += match &prev {
            None => kl_sum(&mu, &var, &vec![0.0; nb], &vec![1.0; nb]),
            Some(prev) => {
                let h = relu(dense(p, "prior.w1", "prior.b1", prev));
                let pm = dense(p, "prior.wmu", "prior.bmu", &h);
                let pv: Vec<f64> = dense(p, "prior.wvar", "prior.bvar", &h)
                    .into_iter()
                    .map(|r| softplus(r) + 1e-6)
                    .collect();
                kl_sum(&mu, &var, &pm, &pv)
            }
        };
        let psi = mat(n, b, &sample);
        let (theta, gamma) = head_reference(p, &model.buffers, &mm(&phi, &psi));
        x = layer_reference(&phi, &psi, &y, &x, theta, gamma);
        let sq: f64 = x.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum();
        loglik += -0.5 * sq / d2 - 0.5 * b as f64 * (2.0 * std::f64::consts::PI * d2).ln();
        prev = Some(sample);
    }
    loglik - cfg.kl_weight * kl
}

/// Mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

// ---------------------------------------------------------------- random graphs

use sparselab::autodiff::{Graph, NodeId, OpKind};
use sparselab::unfolded::FeatureOp;
use std::sync::Arc;

pub struct RandomGraph {
    pub graph: Graph,
    pub params: ParamSet,
    pub root: NodeId,
    pub kinds: Vec<OpKind>,
    /// `(input, threshold)` pairs whose values must stay off a kink.
    kinks: Vec<(NodeId, Option<NodeId>)>,
}

const VEC: usize = 4;

/// A random scalar-valued graph over a few small parameters, built from
/// `steps` randomly chosen vector-to-vector blocks.
pub fn random_graph(seed: u64, steps: usize) -> RandomGraph {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let mut params = ParamSet::new();
    let mut kinks = Vec::new();
    let add_param = |g: &mut Graph, params: &mut ParamSet, r: &mut ChaCha20Rng, name: &str, shape: &[usize], scale: f64| {
        params.insert(name.into(), gaussian(r, shape, scale));
        g.param(name)
    };
    let mut x = add_param(&mut g, &mut params, &mut r, "x0", &[VEC], 1.0);
    for step in 0..steps {
        let choice = r.random_range(0..17);
        let p = |s: &str| format!("p{step}.{s}");
        x = match choice {
            0 => {
                let m = add_param(&mut g, &mut params, &mut r, &p("m"), &[VEC, VEC], 0.5);
                g.matmul(m, x)
            }
            1 => {
                let m = add_param(&mut g, &mut params, &mut r, &p("m"), &[VEC, VEC], 0.5);
                g.t_matvec(m, x)
            }
            2 => {
                let v = add_param(&mut g, &mut params, &mut r, &p("v"), &[VEC], 1.0);
                g.add(x, v)
            }
            3 => {
                let v = add_param(&mut g, &mut params, &mut r, &p("v"), &[VEC], 1.0);
                g.sub(v, x)
            }
            4 => {
                let s = add_param(&mut g, &mut params, &mut r, &p("s"), &[1], 1.0);
                g.scalar_mul(s, x)
            }
            5 => {
                let y = g.scale(0.7, x);
                g.add_scalar(0.3, y)
            }
            6 => {
                let v = add_param(&mut g, &mut params, &mut r, &p("v"), &[VEC], 1.0);
                g.mul(x, v)
            }
            7 => g.softplus(x),
            8 => {
                kinks.push((x, None));
                g.relu(x)
            }
            9 => {
                let s = add_param(&mut g, &mut params, &mut r, &p("s"), &[1], 1.0);
                let th = g.softplus(s);
                let th = g.scale(0.3, th);
                kinks.push((x, Some(th)));
                g.soft_threshold(x, th)
            }
            10 => {
                let pos = g.softplus(x);
                let pos = g.add_scalar(0.1, pos);
                g.sqrt(pos)
            }
            11 => {
                let mx = g.reshape(x, &[2, 2]);
                let t = g.transpose(mx);
                let w = add_param(&mut g, &mut params, &mut r, &p("w"), &[2, 2], 1.0);
                let prod = g.matmul(t, w);
                g.reshape(prod, &[VEC])
            }
            12 => {
                let v = add_param(&mut g, &mut params, &mut r, &p("v"), &[3], 1.0);
                let c = g.concat(&[v, x]);
                g.slice(c, 2, VEC)
            }
            13 => {
                let vq = g.softplus(x);
                let vq = g.add_scalar(0.2, vq);
                let mp = add_param(&mut g, &mut params, &mut r, &p("mp"), &[VEC], 1.0);
                let vp = add_param(&mut g, &mut params, &mut r, &p("vp"), &[VEC], 1.0);
                let vp = g.softplus(vp);
                let vp = g.add_scalar(0.2, vp);
                g.kl_gaussian(x, vq, mp, vp)
            }
            14 => {
                kinks.push((x, None));
                let s = g.reduce_max_abs(x);
                g.scalar_mul(s, x)
            }
            15 => {
                let s = g.sum(x);
                let m = g.mean(x);
                let y = g.scalar_mul(s, x);
                let y = g.scale(0.2, y);
                g.scalar_mul(m, y)
            }
            _ => {
                let w = add_param(&mut g, &mut params, &mut r, &p("w"), &[6, VEC], 1.0);
                let a = g.matmul(w, x);
                let a = g.reshape(a, &[3, 2]);
                let f = g.custom(Arc::new(FeatureOp), &[a]);
                let f = g.slice(f, 0, 5);
                let f = g.scale(0.5, f);
                g.slice(f, 1, VEC)
            }
        };
    }
    let target = g.constant(Tensor::vector(gaussian_vec(&mut r, VEC, 1.0)));
    let root = g.squared_error(x, target);
    let kinds = g.kinds();
    RandomGraph {
        graph: g,
        params,
        root,
        kinds,
        kinks,
    }
}

impl RandomGraph {
    pub fn eval(&mut self, params: &ParamSet) -> f64 {
        for (k, v) in params {
            self.graph.bind(k, v.clone());
        }
        self.graph.evaluate().unwrap();
        self.graph.value(self.root).unwrap().item()
    }

    /// Smallest distance of any kink input to its kink (after `eval`).
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for &(input, theta) in &self.kinks {
            let th = theta.map_or(0.0, |t| self.graph.value(t).unwrap().item());
            let vals = self.graph.value(input).unwrap().data().to_vec();
            for v in &vals {
                margin = margin.min((v.abs() - th).abs());
            }
            if theta.is_none() {
                // Ties in the arg-max of |x| are kinks too.
                let mut a: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
                a.sort_by(|p, q| q.total_cmp(p));
                if a.len() > 1 {
                    margin = margin.min(a[0] - a[1]);
                }
            }
        }
        margin
    }
}
