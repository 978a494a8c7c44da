//! Augmentation head: `features(ΦΨ_t) → MLP(8→25→2) → softplus → (θ, γ)`.
//! One parameter set is shared by every layer.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::features::{features_of, FeatureOp, NUM_FEATURES};
use crate::autodiff::{softplus, softplus_inv, Graph, NodeId};
use crate::error::Result;
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const HEAD_HIDDEN: usize = 25;

pub const W1: &str = "head.w1";
pub const B1: &str = "head.b1";
pub const W2: &str = "head.w2";
pub const B2: &str = "head.b2";
/// Fixed feature standardisation, `z = (f − shift) ⊙ inv_scale`.
pub const SHIFT: &str = "head.shift";
pub const INV_SCALE: &str = "head.inv_scale";

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Initial weights. The output layer starts at zero so the head initially
/// emits exactly `(theta0, gamma0)` for every input.
pub fn init_head(rng: &mut impl Rng, theta0: f64, gamma0: f64, params: &mut ParamSet) {
    let scale = (2.0 / NUM_FEATURES as f64).sqrt();
    let w1 = (0..HEAD_HIDDEN * NUM_FEATURES)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    params.insert(W1.into(), Tensor::raw(vec![HEAD_HIDDEN, NUM_FEATURES], w1));
    params.insert(B1.into(), Tensor::filled(&[HEAD_HIDDEN], 0.1));
    params.insert(W2.into(), Tensor::zeros(&[2, HEAD_HIDDEN]));
    params.insert(B2.into(), Tensor::vector(vec![softplus_inv(theta0), softplus_inv(gamma0)]));
}

/// Standardisation constants from a sample of effective matrices.
pub fn feature_buffers(samples: &[Tensor]) -> Result<ParamSet> {
    let mut rows = Vec::with_capacity(samples.len());
    for a in samples {
        rows.push(features_of(a)?.values);
    }
    let k = rows.len().max(1) as f64;
    let mut shift = vec![0.0; NUM_FEATURES];
    let mut inv = vec![1.0; NUM_FEATURES];
    for j in 0..NUM_FEATURES {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / k;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / k;
        shift[j] = mean;
        let sd = var.sqrt();
        // Constant features (log m, log b within one dataset) pass through centred.
        inv[j] = if sd > 1e-9 * mean.abs().max(1.0) { 1.0 / sd } else { 1.0 };
    }
    let mut out = ParamSet::new();
    out.insert(SHIFT.into(), Tensor::vector(shift));
    out.insert(INV_SCALE.into(), Tensor::vector(inv));
    Ok(out)
}

/// Adds the head to `g` for effective matrix node `a`; returns `(θ, γ)` nodes.
/// `buffers` must hold [`SHIFT`] and [`INV_SCALE`].
pub fn head_nodes(g: &mut Graph, a: NodeId, buffers: &ParamSet) -> (NodeId, NodeId) {
    let f = g.custom(Arc::new(FeatureOp), &[a]);
    let shift = g.constant(buffers[SHIFT].clone());
    let inv = g.constant(buffers[INV_SCALE].clone());
    let c = g.sub(f, shift);
    let z = g.mul(c, inv);
    let w1 = g.param(W1);
    let b1 = g.param(B1);
    let w2 = g.param(W2);
    let b2 = g.param(B2);
    let h = g.matmul(w1, z);
    let h = g.add(h, b1);
    let h = g.relu(h);
    let o = g.matmul(w2, h);
    let o = g.add(o, b2);
    let o = g.softplus(o);
    (g.slice(o, 0, 1), g.slice(o, 1, 1))
}

/// Straight-line evaluation of the head on one feature vector.
pub fn head_eval(params: &ParamSet, buffers: &ParamSet, features: &[f64]) -> (f64, f64) {
    let (w1, b1, w2, b2) = (&params[W1], &params[B1], &params[W2], &params[B2]);
    let (shift, inv) = (buffers[SHIFT].data(), buffers[INV_SCALE].data());
    let z: Vec<f64> = (0..NUM_FEATURES).map(|j| (features[j] - shift[j]) * inv[j]).collect();
    let h: Vec<f64> = (0..HEAD_HIDDEN)
        .map(|i| {
            let s: f64 = (0..NUM_FEATURES).map(|j| w1.at(i, j) * z[j]).sum::<f64>() + b1.data()[i];
            s.max(0.0)
        })
        .collect();
    let out = |r: usize| {
        let s: f64 = (0..HEAD_HIDDEN).map(|i| w2.at(r, i) * h[i]).sum::<f64>() + b2.data()[r];
        softplus(s)
    };
    (out(0), out(1))
}
