use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inv, Graph, NodeId};
use crate::checkpoint::{decode_set, encode_set, Checkpoint};
use crate::data::{random_dictionary, Dims, ProblemInstance};
use crate::error::{Error, Result};
use crate::ista::spectral_norm;
use crate::optim::ParamSet;
use crate::tensor::Tensor;
use crate::unfolded::{augmentation_features, dlista_layer, head, NUM_FEATURES, THETA_INIT};

/// Floor added to every softplus variance.
pub const VAR_FLOOR: f64 = 1e-6;

pub const PHI_SHIFT: &str = "post.phi_shift";
pub const PHI_INV_SCALE: &str = "post.phi_inv_scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlistaConfig {
    pub layers: usize,
    /// Width of every hidden layer in the prior and posterior nets.
    pub hidden: usize,
    /// Fixed standard deviation of the Gaussian likelihood.
    pub delta_lik: f64,
    pub kl_weight: f64,
    /// Initial posterior variance of every dictionary entry.
    pub init_var: f64,
    pub seed: u64,
}

impl Default for VlistaConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 64,
            delta_lik: 1.0,
            kl_weight: 1e-3,
            init_var: 1e-4,
            seed: 0,
        }
    }
}

impl VlistaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_lik > 0.0) {
            return Err(Error::InvalidConfig(format!("delta_lik {} must be > 0", self.delta_lik)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!("kl_weight {} must be >= 0", self.kl_weight)));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden must be >= 1".into()));
        }
        if !(self.init_var > 0.0) {
            return Err(Error::InvalidConfig(format!("init_var {} must be > 0", self.init_var)));
        }
        Ok(())
    }
}

/// Entrywise Gaussian over an `n × b` dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMatrixDist {
    pub mu: Tensor,
    pub var: Tensor,
}

impl GaussianMatrixDist {
    pub fn new(mu: Tensor, var: Tensor) -> Result<Self> {
        if mu.shape() != var.shape() {
            return Err(Error::shape("gaussian-matrix", mu.shape(), var.shape()));
        }
        if var.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("variances must be > 0".into()));
        }
        Ok(Self { mu, var })
    }

    /// The fixed first-layer prior `N(0, 1)`.
    pub fn standard(n: usize, b: usize) -> Self {
        Self {
            mu: Tensor::zeros(&[n, b]),
            var: Tensor::filled(&[n, b], 1.0),
        }
    }

    /// `μ + σ ⊙ noise`
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != self.mu.shape() {
            return Err(Error::shape("sample_dictionary", self.mu.shape(), noise.shape()));
        }
        let data = (0..self.mu.len())
            .map(|k| self.mu.data()[k] + self.var.data()[k].sqrt() * noise.data()[k])
            .collect();
        Ok(Tensor::raw(self.mu.shape().to_vec(), data))
    }
}

pub fn sample_dictionary(dist: &GaussianMatrixDist, noise: &Tensor) -> Result<Tensor> {
    dist.sample(noise)
}

/// `Σ KL(q ‖ p)` over entries.
pub fn kl_gaussian(q: &GaussianMatrixDist, p: &GaussianMatrixDist) -> Result<f64> {
    if q.mu.shape() != p.mu.shape() {
        return Err(Error::shape("kl_gaussian", q.mu.shape(), p.mu.shape()));
    }
    let mut total = 0.0;
    for k in 0..q.mu.len() {
        let (vq, vp) = (q.var.data()[k], p.var.data()[k]);
        if !(vq > 0.0 && vp > 0.0) {
            return Err(Error::InvalidArgument("nonpositive variance in KL".into()));
        }
        total += crate::autodiff::kl_entry(q.mu.data()[k], vq, p.mu.data()[k], vp);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Use the posterior mean as the dictionary.
    Mean,
    /// Draw a dictionary from the posterior.
    Sample,
}

/// Variational unrolled solver. Parameters:
///
/// * `prior.*`: MLP on the flattened previous dictionary → (μ, raw σ²)
/// * `post.*`: three input branches (`x_{t−1}`, `y`, Φ summary) concatenated
///   into a trunk → (μ, raw σ²); one net shared by all layers
/// * `head.*`: the augmentation head
#[derive(Clone, Debug, PartialEq)]
pub struct VlistaModel {
    pub dims: Dims,
    pub config: VlistaConfig,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::raw(
        shape.to_vec(),
        (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

/// Standardised feature summary of a sensing matrix, fed to the posterior.
pub fn phi_summary(phi: &Tensor) -> Result<Vec<f64>> {
    Ok(augmentation_features(phi, &Tensor::identity(phi.cols()))?.values.to_vec())
}

/// Nodes of a built VLISTA graph. Bound inputs: `phi`, `y`, `x_star`,
/// `phi_summary` and, in sample mode, `eps.t` (flattened standard normals).
pub struct VlistaGraph {
    pub graph: Graph,
    pub output: NodeId,
    /// Per layer output `x_t`.
    pub iterates: Vec<NodeId>,
    /// Per layer dictionary actually used.
    pub dictionaries: Vec<NodeId>,
    pub post_mu: Vec<NodeId>,
    pub post_var: Vec<NodeId>,
    /// Present when built for training.
    pub objective: Option<ElboNodes>,
    pub mode: InferenceMode,
    nb: usize,
    layers: usize,
}

pub struct ElboNodes {
    /// `−ELBO` (the minimised loss).
    pub loss: NodeId,
    /// `Σ_j (x*_j − x_{t,j})²` per layer.
    pub sq_err: Vec<NodeId>,
    /// KL per layer (layer 1 against `N(0, 1)`).
    pub kl: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub elbo: f64,
    pub log_lik: Vec<f64>,
    pub kl: Vec<f64>,
    /// `Σ_t KL_t`, before the KL weight.
    pub kl_block: f64,
}

impl VlistaModel {
    /// Fresh model. `reference` supplies training sensing matrices for the
    /// step-size scale and the feature standardisation.
    pub fn init(dims: Dims, reference: &[&Tensor], cfg: &VlistaConfig) -> Result<Self> {
        cfg.validate()?;
        if reference.is_empty() {
            return Err(Error::EmptySplit("initialisation reference".into()));
        }
        let Dims { m, n, b } = dims;
        let (h, nb) = (cfg.hidden, n * b);
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let psi0 = random_dictionary(&mut rng, n, b);
        let a_ref = reference[0].matmul(&psi0)?;
        let gamma0 = 1.0 / spectral_norm(&a_ref)?.powi(2);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        params.insert("post.wx".into(), gaussian(&mut rng, &[h, b], he(b)));
        params.insert("post.bx".into(), Tensor::zeros(&[h]));
        params.insert("post.wy".into(), gaussian(&mut rng, &[h, m], he(m)));
        params.insert("post.by".into(), Tensor::zeros(&[h]));
        params.insert("post.wf".into(), gaussian(&mut rng, &[h, NUM_FEATURES], he(NUM_FEATURES)));
        params.insert("post.bf".into(), Tensor::zeros(&[h]));
        params.insert("post.wt".into(), gaussian(&mut rng, &[h, 3 * h], he(3 * h)));
        params.insert("post.bt".into(), Tensor::filled(&[h], 0.1));
        params.insert("post.wmu".into(), Tensor::zeros(&[nb, h]));
        params.insert("post.bmu".into(), psi0.clone().reshape(&[nb])?);
        params.insert("post.wvar".into(), Tensor::zeros(&[nb, h]));
        params.insert("post.bvar".into(), Tensor::filled(&[nb], softplus_inv(cfg.init_var)));

        params.insert("prior.w1".into(), gaussian(&mut rng, &[h, nb], he(nb)));
        params.insert("prior.b1".into(), Tensor::filled(&[h], 0.1));
        params.insert("prior.wmu".into(), Tensor::zeros(&[nb, h]));
        params.insert("prior.bmu".into(), Tensor::zeros(&[nb]));
        params.insert("prior.wvar".into(), Tensor::zeros(&[nb, h]));
        params.insert("prior.bvar".into(), Tensor::filled(&[nb], softplus_inv(1.0 - VAR_FLOOR)));

        head::init_head(&mut rng, THETA_INIT, gamma0, &mut params);
        let samples: Vec<Tensor> = reference
            .iter()
            .map(|phi| phi.matmul(&psi0))
            .collect::<Result<_>>()?;
        let mut buffers = head::feature_buffers(&samples)?;
        let phis: Vec<Tensor> = reference.iter().map(|p| (*p).clone()).collect();
        let pb = head::feature_buffers(&phis)?;
        buffers.insert(PHI_SHIFT.into(), pb[head::SHIFT].clone());
        buffers.insert(PHI_INV_SCALE.into(), pb[head::INV_SCALE].clone());
        Ok(Self {
            dims,
            config: cfg.clone(),
            params,
            buffers,
        })
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    fn phi_summary_node(&self, g: &mut Graph) -> NodeId {
        let raw = g.input("phi_summary");
        let shift = g.constant(self.buffers[PHI_SHIFT].clone());
        let inv = g.constant(self.buffers[PHI_INV_SCALE].clone());
        let c = g.sub(raw, shift);
        g.mul(c, inv)
    }

    fn dense(g: &mut Graph, w: &str, b: &str, x: NodeId) -> NodeId {
        let w = g.param(w);
        let b = g.param(b);
        let h = g.matmul(w, x);
        g.add(h, b)
    }

    /// `(μ, σ²)` as flattened nodes from trunk activation `h`.
    fn gaussian_heads(g: &mut Graph, prefix: &str, h: NodeId) -> (NodeId, NodeId) {
        let mu = Self::dense(g, &format!("{prefix}.wmu"), &format!("{prefix}.bmu"), h);
        let raw = Self::dense(g, &format!("{prefix}.wvar"), &format!("{prefix}.bvar"), h);
        let sp = g.softplus(raw);
        (mu, g.add_scalar(VAR_FLOOR, sp))
    }

    fn posterior_nodes(g: &mut Graph, x_prev: NodeId, y: NodeId, summary: NodeId) -> (NodeId, NodeId) {
        let hx = Self::dense(g, "post.wx", "post.bx", x_prev);
        let hx = g.relu(hx);
        let hy = Self::dense(g, "post.wy", "post.by", y);
        let hy = g.relu(hy);
        let hf = Self::dense(g, "post.wf", "post.bf", summary);
        let hf = g.relu(hf);
        let cat = g.concat(&[hx, hy, hf]);
        let t = Self::dense(g, "post.wt", "post.bt", cat);
        let t = g.relu(t);
        Self::gaussian_heads(g, "post", t)
    }

    fn prior_nodes(g: &mut Graph, psi_prev_flat: NodeId) -> (NodeId, NodeId) {
        let h = Self::dense(g, "prior.w1", "prior.b1", psi_prev_flat);
        let h = g.relu(h);
        Self::gaussian_heads(g, "prior", h)
    }

    /// Builds the unrolled graph. With `train`, adds prior nets, KL terms and
    /// the `−ELBO` loss (sample mode only).
    pub fn build(&self, mode: InferenceMode, train: bool) -> Result<VlistaGraph> {
        if train && mode != InferenceMode::Sample {
            return Err(Error::InvalidArgument("training needs sample mode".into()));
        }
        let Dims { n, b, .. } = self.dims;
        let nb = n * b;
        let layers = self.config.layers;
        let mut g = Graph::new();
        let phi = g.input("phi");
        let y = g.input("y");
        let x_star = g.input("x_star");
        let summary = self.phi_summary_node(&mut g);
        let zero_x = g.constant(Tensor::zeros(&[b]));
        let mut x: Option<NodeId> = None;
        let (mut iterates, mut dictionaries, mut post_mu, mut post_var) = (vec![], vec![], vec![], vec![]);
        let mut sq_err = Vec::new();
        let mut kl = Vec::new();
        let mut prev_flat: Option<NodeId> = None;
        for t in 1..=layers {
            let (mu, var) = Self::posterior_nodes(&mut g, x.unwrap_or(zero_x), y, summary);
            let flat = match mode {
                InferenceMode::Mean => mu,
                InferenceMode::Sample => {
                    let eps = g.input(&format!("eps.{t}"));
                    let sd = g.sqrt(var);
                    let noise = g.mul(sd, eps);
                    g.add(mu, noise)
                }
            };
            let psi = g.reshape(flat, &[n, b]);
            if train {
                let (pmu, pvar) = match prev_flat {
                    None => (g.constant(Tensor::zeros(&[nb])), g.constant(Tensor::filled(&[nb], 1.0))),
                    Some(prev) => Self::prior_nodes(&mut g, prev),
                };
                let k = g.kl_gaussian(mu, var, pmu, pvar);
                kl.push(g.sum(k));
            }
            let a = g.matmul(phi, psi);
            let (theta, gamma) = head::head_nodes(&mut g, a, &self.buffers);
            let xt = dlista_layer(&mut g, phi, psi, y, x, theta, gamma);
            if train {
                sq_err.push(g.squared_error(xt, x_star));
            }
            x = Some(xt);
            iterates.push(xt);
            dictionaries.push(psi);
            post_mu.push(mu);
            post_var.push(var);
            prev_flat = Some(flat);
        }
        let output = x.unwrap_or(zero_x);
        let objective = if train {
            // −ELBO = Σ_t ‖x* − x_t‖²/(2δ²) + const + w Σ_t KL_t
            let d2 = self.config.delta_lik.powi(2);
            let log_norm = 0.5 * b as f64 * (2.0 * std::f64::consts::PI * d2).ln();
            let mut terms = Vec::new();
            for &e in &sq_err {
                let s = g.scale(0.5 / d2, e);
                terms.push(g.add_scalar(log_norm, s));
            }
            for &k in &kl {
                terms.push(g.scale(self.config.kl_weight, k));
            }
            let all = g.concat(&terms);
            let loss = g.sum(all);
            Some(ElboNodes { loss, sq_err, kl })
        } else {
            None
        };
        let mut vg = VlistaGraph {
            graph: g,
            output,
            iterates,
            dictionaries,
            post_mu,
            post_var,
            objective,
            mode,
            nb,
            layers,
        };
        for (k, v) in &self.params {
            vg.graph.bind(k, v.clone());
        }
        Ok(vg)
    }

    /// Posterior over layer-`t` dictionaries given the previous iterate.
    pub fn posterior_step(&self, x_prev: &[f64], inst: &ProblemInstance) -> Result<GaussianMatrixDist> {
        let Dims { n, b, .. } = self.dims;
        if x_prev.len() != b {
            return Err(Error::shape("posterior_step", &[x_prev.len()], &[b]));
        }
        let mut g = Graph::new();
        let xp = g.input("x_prev");
        let y = g.input("y");
        let summary = self.phi_summary_node(&mut g);
        let (mu, var) = Self::posterior_nodes(&mut g, xp, y, summary);
        for (k, v) in &self.params {
            g.bind(k, v.clone());
        }
        g.bind("x_prev", Tensor::vector(x_prev.to_vec()));
        g.bind("y", inst.y.clone());
        g.bind("phi_summary", Tensor::vector(phi_summary(&inst.phi)?));
        g.evaluate()?;
        GaussianMatrixDist::new(g.value(mu)?.clone().reshape(&[n, b])?, g.value(var)?.clone().reshape(&[n, b])?)
    }

    /// Prior over the next dictionary given the previously sampled one.
    pub fn prior_step(&self, psi_prev: &Tensor) -> Result<GaussianMatrixDist> {
        let Dims { n, b, .. } = self.dims;
        if psi_prev.shape() != [n, b] {
            return Err(Error::shape("prior_step", psi_prev.shape(), &[n, b]));
        }
        let mut g = Graph::new();
        let p = g.input("psi_prev");
        let flat = g.reshape(p, &[n * b]);
        let (mu, var) = Self::prior_nodes(&mut g, flat);
        for (k, v) in &self.params {
            g.bind(k, v.clone());
        }
        g.bind("psi_prev", psi_prev.clone());
        g.evaluate()?;
        GaussianMatrixDist::new(g.value(mu)?.clone().reshape(&[n, b])?, g.value(var)?.clone().reshape(&[n, b])?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("vlista", self.config.layers, self.dims);
        ck.params = encode_set(&self.params);
        ck.buffers = encode_set(&self.buffers);
        let c = &self.config;
        ck.settings.insert("hidden".into(), c.hidden as f64);
        ck.settings.insert("delta_lik".into(), c.delta_lik);
        ck.settings.insert("kl_weight".into(), c.kl_weight);
        ck.settings.insert("init_var".into(), c.init_var);
        ck.settings.insert("seed".into(), c.seed as f64);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != "vlista" {
            return Err(Error::Checkpoint(format!("expected a vlista checkpoint, found `{}`", ck.model)));
        }
        let config = VlistaConfig {
            layers: ck.layers,
            hidden: ck.setting("hidden")? as usize,
            delta_lik: ck.setting("delta_lik")?,
            kl_weight: ck.setting("kl_weight")?,
            init_var: ck.setting("init_var")?,
            seed: ck.setting("seed")? as u64,
        };
        config.validate()?;
        let model = Self {
            dims: (&ck.dims).into(),
            config,
            params: decode_set(&ck.params)?,
            buffers: decode_set(&ck.buffers)?,
        };
        for key in [head::SHIFT, head::INV_SCALE, PHI_SHIFT, PHI_INV_SCALE] {
            if !model.buffers.contains_key(key) {
                return Err(Error::Checkpoint(format!("missing buffer `{key}`")));
            }
        }
        let vg = model.build(InferenceMode::Sample, true)?;
        for name in vg.graph.param_names() {
            if !model.params.contains_key(&name) {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            }
        }
        Ok(model)
    }
}

impl VlistaGraph {
    /// Binds one instance and, in sample mode, fresh noise from `rng`.
    pub fn bind_instance(&mut self, inst: &ProblemInstance, summary: &[f64], rng: &mut impl Rng) {
        self.graph.bind("phi", inst.phi.clone());
        self.graph.bind("y", inst.y.clone());
        self.graph.bind("x_star", inst.x_star.clone());
        self.graph.bind("phi_summary", Tensor::vector(summary.to_vec()));
        if self.mode == InferenceMode::Sample {
            for t in 1..=self.layers {
                let eps = (0..self.nb).map(|_| rng.sample(StandardNormal)).collect();
                self.graph.bind(&format!("eps.{t}"), Tensor::vector(eps));
            }
        }
    }

    /// Binds explicit per-layer noise (flattened `n·b` each).
    pub fn bind_noise(&mut self, noise: &[Tensor]) -> Result<()> {
        if noise.len() != self.layers {
            return Err(Error::InvalidArgument(format!("{} noise tensors for {} layers", noise.len(), self.layers)));
        }
        for (t, e) in noise.iter().enumerate() {
            if e.len() != self.nb {
                return Err(Error::shape("bind_noise", e.shape(), &[self.nb]));
            }
            self.graph.bind(&format!("eps.{}", t + 1), e.clone().reshape(&[self.nb])?);
        }
        Ok(())
    }

    pub fn bind_params(&mut self, params: &ParamSet) {
        for (k, v) in params {
            self.graph.bind(k, v.clone());
        }
    }

    pub fn output(&self) -> Result<Vec<f64>> {
        Ok(self.graph.value(self.output)?.data().to_vec())
    }

    pub fn sampled_dictionaries(&self) -> Result<Vec<Tensor>> {
        self.dictionaries.iter().map(|&d| Ok(self.graph.value(d)?.clone())).collect()
    }

    pub fn breakdown(&self, delta_lik: f64, kl_weight: f64) -> Result<ElboBreakdown> {
        let obj = self
            .objective
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("graph was not built for training".into()))?;
        let b = self.graph.value(self.output)?.len() as f64;
        let d2 = delta_lik * delta_lik;
        let log_norm = 0.5 * b * (2.0 * std::f64::consts::PI * d2).ln();
        let log_lik: Vec<f64> = obj
            .sq_err
            .iter()
            .map(|&e| Ok(-0.5 * self.graph.value(e)?.item() / d2 - log_norm))
            .collect::<Result<_>>()?;
        let kl: Vec<f64> = obj
            .kl
            .iter()
            .map(|&k| Ok(self.graph.value(k)?.item()))
            .collect::<Result<_>>()?;
        let kl_block: f64 = kl.iter().sum();
        Ok(ElboBreakdown {
            elbo: log_lik.iter().sum::<f64>() - kl_weight * kl_block,
            log_lik,
            kl,
            kl_block,
        })
    }
}
