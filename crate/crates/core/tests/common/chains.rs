//! Compositions of library models shared by several test targets.

use sparselab::data::{Dataset, Dims, ProblemInstance};
use sparselab::ista::{ista_solve, IstaConfig, StepSize};
use sparselab::unfolded::{head, psi_name, InitConfig, UnfoldedKind, UnfoldedModel};
use sparselab::vlista::{VlistaConfig, VlistaModel};
use sparselab::Tensor;

/// A-DLISTA with constant scalars, DLISTA and ISTA on `Ψ_o` with scalars `(θ, γ)`.
pub fn reduction_chain(inst: &ProblemInstance, psi_o: &Tensor, layers: usize, theta: f64, gamma: f64) -> [Vec<f64>; 3] {
    let dims = Dims {
        m: inst.m(),
        n: inst.n(),
        b: inst.b(),
    };
    let reference = [&inst.phi];
    let cfg = InitConfig {
        theta,
        gamma: Some(gamma),
        ..InitConfig::default()
    };
    let mut dl = UnfoldedModel::init(UnfoldedKind::Dlista, dims, layers, &reference, &cfg).unwrap();
    let mut ad = UnfoldedModel::init(UnfoldedKind::Adlista, dims, layers, &reference, &cfg).unwrap();
    for t in 1..=layers {
        dl.params.insert(psi_name(false, t), psi_o.clone());
        ad.params.insert(psi_name(false, t), psi_o.clone());
    }
    let scalars = dl.dlista_scalars().unwrap();
    let x_ad = ad.build(Some(&scalars)).unwrap().run(inst).unwrap();
    let x_dl = dl.forward(inst).unwrap();
    let ista_cfg = IstaConfig {
        iterations: layers,
        theta: scalars[0].0,
        gamma: StepSize::Fixed(scalars[0].1),
    };
    let x_is = ista_solve(inst, psi_o, &ista_cfg).unwrap().x;
    [x_ad, x_dl, x_is]
}

/// A-DLISTA carrying the same head and, per layer, the given dictionaries.
pub fn adlista_twin(model: &VlistaModel, dicts: &[Tensor], reference: &[&Tensor]) -> UnfoldedModel {
    let mut twin =
        UnfoldedModel::init(UnfoldedKind::Adlista, model.dims, dicts.len(), reference, &InitConfig::default()).unwrap();
    for (t, d) in dicts.iter().enumerate() {
        twin.params.insert(psi_name(false, t + 1), d.clone());
    }
    for (k, v) in &model.params {
        if head::is_head_param(k) {
            twin.params.insert(k.clone(), v.clone());
        }
    }
    for key in [head::SHIFT, head::INV_SCALE] {
        twin.buffers.insert(key.into(), model.buffers[key].clone());
    }
    twin
}

/// A model whose nets all depend on their inputs: the zero-initialised output
/// layers get random weights.
pub fn busy_model(ds: &Dataset, layers: usize, init_var: f64, kl_weight: f64, seed: u64) -> VlistaModel {
    let reference: Vec<&Tensor> = ds.instances.iter().take(8).map(|i| &i.phi).collect();
    let cfg = VlistaConfig {
        layers,
        hidden: 4,
        init_var,
        kl_weight,
        seed,
        ..VlistaConfig::default()
    };
    let mut model = VlistaModel::init(ds.dims, &reference, &cfg).unwrap();
    let mut r = super::rng(seed ^ 0xabc);
    for key in ["post.wmu", "post.wvar", "prior.wmu", "prior.wvar"] {
        let shape = model.params[key].shape().to_vec();
        model.params.insert(key.into(), super::gaussian(&mut r, &shape, 0.3));
    }
    model.params.insert("prior.bmu".into(), super::gaussian(&mut r, &[ds.dims.n * ds.dims.b], 0.5));
    // the first layer sees x = 0, so a zero bias would sit on the relu kink
    model.params.insert("post.bx".into(), super::gaussian(&mut r, &[4], 0.5));
    model
}
