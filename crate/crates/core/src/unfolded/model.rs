use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::head;
use crate::autodiff::{softplus, softplus_inv, Graph, NodeId};
use crate::checkpoint::{decode_set, encode_set, Checkpoint};
use crate::data::{random_dictionary, Dims, ProblemInstance};
use crate::error::{Error, Result};
use crate::ista::spectral_norm;
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const DEFAULT_LAYERS: usize = 3;
pub const THETA_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnfoldedKind {
    Lista,
    Dlista,
    Adlista,
}

impl UnfoldedKind {
    pub fn name(self) -> &'static str {
        match self {
            UnfoldedKind::Lista => "lista",
            UnfoldedKind::Dlista => "dlista",
            UnfoldedKind::Adlista => "adlista",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lista" => Ok(UnfoldedKind::Lista),
            "dlista" => Ok(UnfoldedKind::Dlista),
            "adlista" => Ok(UnfoldedKind::Adlista),
            other => Err(Error::InvalidArgument(format!("unknown unfolded model `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub theta: f64,
    /// `None` picks `1 / σ_max(ΦΨ_init)²` on the reference matrix.
    pub gamma: Option<f64>,
    pub share_dictionary: bool,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            theta: THETA_INIT,
            gamma: None,
            share_dictionary: false,
            seed: 0,
        }
    }
}

/// Parameters of one unrolled solver. Scalars are stored pre-softplus.
///
/// Names: `lista.V.t`, `lista.W.t`, `theta.t`, `gamma.t`, `psi.t` (or `psi`
/// when shared) and `head.*`, with layers counted from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedModel {
    pub kind: UnfoldedKind,
    pub layers: usize,
    pub dims: Dims,
    pub share_dictionary: bool,
    pub params: ParamSet,
    /// Fixed, non-trained tensors (feature standardisation).
    pub buffers: ParamSet,
}

pub fn psi_name(share: bool, t: usize) -> String {
    if share {
        "psi".into()
    } else {
        format!("psi.{t}")
    }
}

pub fn theta_name(t: usize) -> String {
    format!("theta.{t}")
}

pub fn gamma_name(t: usize) -> String {
    format!("gamma.{t}")
}

/// One unrolled ISTA layer `η_θ(x + γ (ΦΨ)ᵀ(y − ΦΨ x))`, evaluated in the
/// factored order `Ψᵀ(Φᵀ(y − Φ(Ψx)))`; `x = None` means `x = 0`.
pub fn dlista_layer(
    g: &mut Graph,
    phi: NodeId,
    psi: NodeId,
    y: NodeId,
    x: Option<NodeId>,
    theta: NodeId,
    gamma: NodeId,
) -> NodeId {
    let r = match x {
        None => y,
        Some(x) => {
            let px = g.matmul(psi, x);
            let apx = g.matmul(phi, px);
            g.sub(y, apx)
        }
    };
    let h = g.t_matvec(phi, r);
    let grad = g.t_matvec(psi, h);
    let step = g.scalar_mul(gamma, grad);
    let u = match x {
        None => step,
        Some(x) => g.add(x, step),
    };
    g.soft_threshold(u, theta)
}

/// A built graph with its interesting nodes. Bound inputs: `phi`, `y`, `x_star`.
pub struct ModelGraph {
    pub graph: Graph,
    pub output: NodeId,
    pub loss: NodeId,
    /// Per layer `(θ, γ)`; `γ` is `None` for LISTA.
    pub scalars: Vec<(NodeId, Option<NodeId>)>,
}

impl ModelGraph {
    /// Runs one instance and returns `x_T`.
    pub fn run(&mut self, inst: &ProblemInstance) -> Result<Vec<f64>> {
        self.graph.bind("phi", inst.phi.clone());
        self.graph.bind("y", inst.y.clone());
        self.graph.bind("x_star", inst.x_star.clone());
        self.graph.evaluate()?;
        Ok(self.graph.value(self.output)?.data().to_vec())
    }

    pub fn bind_params(&mut self, params: &ParamSet) {
        for (k, v) in params {
            self.graph.bind(k, v.clone());
        }
    }

    /// `(θ_t, γ_t)` of the last run.
    pub fn layer_scalars(&self) -> Result<Vec<(f64, f64)>> {
        self.scalars
            .iter()
            .map(|(t, g)| {
                Ok((
                    self.graph.value(*t)?.item(),
                    match g {
                        Some(g) => self.graph.value(*g)?.item(),
                        None => f64::NAN,
                    },
                ))
            })
            .collect()
    }
}

impl UnfoldedModel {
    /// Fresh model. `reference` supplies sensing matrices used for scale-aware
    /// initialisation (first one) and head feature standardisation (all).
    pub fn init(kind: UnfoldedKind, dims: Dims, layers: usize, reference: &[&Tensor], cfg: &InitConfig) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::EmptySplit("initialisation reference".into()));
        }
        for phi in reference {
            if phi.shape() != [dims.m, dims.n] {
                return Err(Error::shape("init", phi.shape(), &[dims.m, dims.n]));
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let (n, b) = (dims.n, dims.b);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let share = cfg.share_dictionary && kind != UnfoldedKind::Lista;

        let psi0 = random_dictionary(&mut rng, n, b);
        let a_ref = reference[0].matmul(&psi0)?;
        let gamma0 = match cfg.gamma {
            Some(g) => g,
            None => 1.0 / spectral_norm(&a_ref)?.powi(2),
        };
        match kind {
            UnfoldedKind::Lista => {
                let w = a_ref.transpose().scale(gamma0);
                let ata = a_ref.transpose().matmul(&a_ref)?;
                let v = Tensor::identity(b).sub(&ata.scale(gamma0))?;
                for t in 1..=layers {
                    params.insert(format!("lista.W.{t}"), w.clone());
                    params.insert(format!("lista.V.{t}"), v.clone());
                    params.insert(theta_name(t), Tensor::scalar(softplus_inv(cfg.theta)));
                }
            }
            UnfoldedKind::Dlista | UnfoldedKind::Adlista => {
                let mut dicts = Vec::new();
                for t in 1..=layers {
                    let name = psi_name(share, t);
                    if params.contains_key(&name) {
                        continue;
                    }
                    let psi = if t == 1 { psi0.clone() } else { random_dictionary(&mut rng, n, b) };
                    dicts.push(psi.clone());
                    params.insert(name, psi);
                }
                if kind == UnfoldedKind::Dlista {
                    for t in 1..=layers {
                        params.insert(theta_name(t), Tensor::scalar(softplus_inv(cfg.theta)));
                        params.insert(gamma_name(t), Tensor::scalar(softplus_inv(gamma0)));
                    }
                }
                if kind == UnfoldedKind::Adlista {
                    head::init_head(&mut rng, cfg.theta, gamma0, &mut params);
                    let mut samples = Vec::new();
                    for (k, phi) in reference.iter().enumerate() {
                        samples.push(phi.matmul(dicts.get(k % dicts.len().max(1)).unwrap_or(&psi0))?);
                    }
                    buffers = head::feature_buffers(&samples)?;
                }
            }
        }
        Ok(Self {
            kind,
            layers,
            dims,
            share_dictionary: share,
            params,
            buffers,
        })
    }

    /// Builds the training/inference graph. `constant_scalars` replaces the
    /// augmentation head (A-DLISTA only) by fixed per-layer `(θ, γ)`.
    pub fn build(&self, constant_scalars: Option<&[(f64, f64)]>) -> Result<ModelGraph> {
        if let Some(c) = constant_scalars {
            if c.len() != self.layers {
                return Err(Error::InvalidArgument(format!(
                    "{} constant scalar pairs for {} layers",
                    c.len(),
                    self.layers
                )));
            }
        }
        let mut g = Graph::new();
        let phi = g.input("phi");
        let y = g.input("y");
        let x_star = g.input("x_star");
        let mut x: Option<NodeId> = None;
        let mut scalars = Vec::with_capacity(self.layers);
        for t in 1..=self.layers {
            match self.kind {
                UnfoldedKind::Lista => {
                    let w = g.param(&format!("lista.W.{t}"));
                    let v = g.param(&format!("lista.V.{t}"));
                    let raw = g.param(&theta_name(t));
                    let theta = g.softplus(raw);
                    let wy = g.matmul(w, y);
                    let u = match x {
                        None => wy,
                        Some(x) => {
                            let vx = g.matmul(v, x);
                            g.add(vx, wy)
                        }
                    };
                    x = Some(g.soft_threshold(u, theta));
                    scalars.push((theta, None));
                }
                UnfoldedKind::Dlista | UnfoldedKind::Adlista => {
                    let psi = g.param(&psi_name(self.share_dictionary, t));
                    let (theta, gamma) = match (self.kind, constant_scalars) {
                        (UnfoldedKind::Adlista, Some(c)) => {
                            (g.constant(Tensor::scalar(c[t - 1].0)), g.constant(Tensor::scalar(c[t - 1].1)))
                        }
                        (UnfoldedKind::Adlista, None) => {
                            let a = g.matmul(phi, psi);
                            head::head_nodes(&mut g, a, &self.buffers)
                        }
                        _ => {
                            let tr = g.param(&theta_name(t));
                            let gr = g.param(&gamma_name(t));
                            (g.softplus(tr), g.softplus(gr))
                        }
                    };
                    x = Some(dlista_layer(&mut g, phi, psi, y, x, theta, gamma));
                    scalars.push((theta, Some(gamma)));
                }
            }
        }
        let output = match x {
            Some(x) => x,
            None => g.constant(Tensor::zeros(&[self.dims.b])),
        };
        let loss = g.squared_error(output, x_star);
        let mut mg = ModelGraph {
            graph: g,
            output,
            loss,
            scalars,
        };
        mg.bind_params(&self.params);
        Ok(mg)
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        if dims != self.dims {
            return Err(Error::InvalidArgument(format!(
                "model dims m={} n={} b={} do not match data m={} n={} b={}",
                self.dims.m, self.dims.n, self.dims.b, dims.m, dims.n, dims.b
            )));
        }
        Ok(())
    }

    /// `x_T` for each instance, in order.
    pub fn predict(&self, instances: &[ProblemInstance]) -> Result<Vec<Vec<f64>>> {
        let mut mg = self.build(None)?;
        instances.iter().map(|inst| mg.run(inst)).collect()
    }

    pub fn forward(&self, inst: &ProblemInstance) -> Result<Vec<f64>> {
        self.build(None)?.run(inst)
    }

    /// DLISTA scalars after the softplus, per layer.
    pub fn dlista_scalars(&self) -> Result<Vec<(f64, f64)>> {
        if self.kind != UnfoldedKind::Dlista {
            return Err(Error::InvalidArgument("not a dlista model".into()));
        }
        Ok((1..=self.layers)
            .map(|t| {
                (
                    softplus(self.params[&theta_name(t)].item()),
                    softplus(self.params[&gamma_name(t)].item()),
                )
            })
            .collect())
    }

    pub fn dictionary(&self, t: usize) -> Option<&Tensor> {
        self.params.get(&psi_name(self.share_dictionary, t))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.kind.name(), self.layers, self.dims);
        ck.share_dictionary = self.share_dictionary;
        ck.params = encode_set(&self.params);
        ck.buffers = encode_set(&self.buffers);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = UnfoldedKind::parse(&ck.model)?;
        if kind == UnfoldedKind::Adlista && !(ck.buffers.contains_key(head::SHIFT) && ck.buffers.contains_key(head::INV_SCALE)) {
            return Err(Error::Checkpoint("missing head feature buffers".into()));
        }
        let model = Self {
            kind,
            layers: ck.layers,
            dims: (&ck.dims).into(),
            share_dictionary: ck.share_dictionary,
            params: decode_set(&ck.params)?,
            buffers: decode_set(&ck.buffers)?,
        };
        // Building validates that every parameter the graph needs is present.
        let mg = model.build(None)?;
        for name in mg.graph.param_names() {
            if !model.params.contains_key(&name) {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            }
        }
        Ok(model)
    }
}
