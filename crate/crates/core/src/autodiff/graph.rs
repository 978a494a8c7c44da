use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ista::shrink;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside the engine.
///
/// `forward` returns the output plus any tensors it wants handed back to
/// `backward`. `backward` returns one optional gradient per input.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)>;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: &[Tensor],
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

/// Kind tag of a node, used in diagnostics and error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Constant,
    MatMul,
    TransposeMatVec,
    Add,
    Sub,
    ScalarMul,
    Scale,
    AddScalar,
    ElementwiseMul,
    Transpose,
    SoftThreshold,
    Softplus,
    Relu,
    Sqrt,
    Sum,
    Mean,
    SquaredError,
    KlGaussianElementwise,
    ReduceMaxAbs,
    Reshape,
    Concat,
    Slice,
    Custom,
}

#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String, trainable: bool },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    /// `aᵀ v` for a matrix `a` and vector `v`, without forming `aᵀ`.
    TransposeMatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `scalar · tensor`, the only broadcast the engine supports.
    ScalarMul { scalar: NodeId, tensor: NodeId },
    Scale(f64, NodeId),
    AddScalar(f64, NodeId),
    ElementwiseMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftThreshold { input: NodeId, theta: NodeId },
    Softplus(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// `Σ (input − target)²`
    SquaredError { input: NodeId, target: NodeId },
    /// Entrywise `KL(N(mu_q, var_q) ‖ N(mu_p, var_p))`.
    KlGaussian {
        mu_q: NodeId,
        var_q: NodeId,
        mu_p: NodeId,
        var_p: NodeId,
    },
    ReduceMaxAbs(NodeId),
    Reshape(NodeId, Vec<usize>),
    /// Concatenation of flattened inputs into one vector.
    Concat(Vec<NodeId>),
    Slice { input: NodeId, start: usize, len: usize },
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<NodeId> },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::Constant(_) => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::TransposeMatVec(..) => OpKind::TransposeMatVec,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::ScalarMul { .. } => OpKind::ScalarMul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::ElementwiseMul(..) => OpKind::ElementwiseMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::SoftThreshold { .. } => OpKind::SoftThreshold,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Relu(_) => OpKind::Relu,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SquaredError { .. } => OpKind::SquaredError,
            Op::KlGaussian { .. } => OpKind::KlGaussianElementwise,
            Op::ReduceMaxAbs(_) => OpKind::ReduceMaxAbs,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Custom { .. } => OpKind::Custom,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::TransposeMatVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::ElementwiseMul(a, b) => vec![*a, *b],
            Op::ScalarMul { scalar, tensor } => vec![*scalar, *tensor],
            Op::Scale(_, a)
            | Op::AddScalar(_, a)
            | Op::Transpose(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ReduceMaxAbs(a)
            | Op::Reshape(a, _)
            | Op::Slice { input: a, .. } => vec![*a],
            Op::SoftThreshold { input, theta } => vec![*input, *theta],
            Op::SquaredError { input, target } => vec![*input, *target],
            Op::KlGaussian {
                mu_q,
                var_q,
                mu_p,
                var_p,
            } => vec![*mu_q, *var_q, *mu_p, *var_p],
            Op::Concat(v) => v.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    saved: Vec<Tensor>,
    needs_grad: bool,
}

/// Gradients of the root with respect to every trainable input, by name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Define-then-run computation graph. Nodes are appended in topological
/// order, so the graph is acyclic by construction. Build once, then call
/// [`Graph::forward`] per datum and [`Graph::backward`] for gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Input { trainable, .. } => *trainable,
            Op::Constant(_) => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        let value = match &op {
            Op::Constant(t) => Some(t.clone()),
            _ => None,
        };
        self.nodes.push(Node {
            op,
            value,
            saved: Vec::new(),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn named(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.names.get(name) {
            return id;
        }
        let id = self.push(Op::Input {
            name: name.to_string(),
            trainable,
        });
        self.names.insert(name.to_string(), id);
        id
    }

    /// Non-differentiated named input (data). Re-using a name returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.named(name, false)
    }

    /// Differentiated named input (parameter). Re-using a name returns the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.named(name, true)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn t_matvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        self.push(Op::TransposeMatVec(a, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn scalar_mul(&mut self, scalar: NodeId, tensor: NodeId) -> NodeId {
        self.push(Op::ScalarMul { scalar, tensor })
    }

    pub fn scale(&mut self, s: f64, a: NodeId) -> NodeId {
        self.push(Op::Scale(s, a))
    }

    pub fn add_scalar(&mut self, c: f64, a: NodeId) -> NodeId {
        self.push(Op::AddScalar(c, a))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ElementwiseMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn soft_threshold(&mut self, input: NodeId, theta: NodeId) -> NodeId {
        self.push(Op::SoftThreshold { input, theta })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn squared_error(&mut self, input: NodeId, target: NodeId) -> NodeId {
        self.push(Op::SquaredError { input, target })
    }

    pub fn kl_gaussian(&mut self, mu_q: NodeId, var_q: NodeId, mu_p: NodeId, var_p: NodeId) -> NodeId {
        self.push(Op::KlGaussian {
            mu_q,
            var_q,
            mu_p,
            var_p,
        })
    }

    pub fn reduce_max_abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceMaxAbs(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { input, start, len })
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> NodeId {
        self.push(Op::Custom {
            op,
            inputs: inputs.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Kind of every node, in insertion order.
    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Names of all trainable inputs, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input {
                    name,
                    trainable: true,
                } => Some(name.clone()),
                _ => None,
            })
            .collect();
        v.sort();
        v
    }

    /// Binds a value to a named input. Unknown names are ignored so callers
    /// can bind a full parameter set to a graph that uses only part of it.
    pub fn bind(&mut self, name: &str, value: Tensor) {
        if let Some(&id) = self.names.get(name) {
            self.nodes[id.0].value = Some(value);
        }
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0].value.as_ref().ok_or(Error::NotEvaluated)
    }

    /// Binds `inputs`, evaluates every node, and returns the value of the last node.
    pub fn forward<I, S>(&mut self, inputs: I) -> Result<&Tensor>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: AsRef<str>,
    {
        for (name, t) in inputs {
            self.bind(name.as_ref(), t);
        }
        self.evaluate()?;
        self.value(NodeId(self.nodes.len() - 1))
    }

    /// Evaluates every node against the currently bound inputs.
    pub fn evaluate(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Input { name, .. } => {
                    if self.nodes[i].value.is_none() {
                        return Err(Error::UnboundInput(name.clone()));
                    }
                }
                Op::Constant(_) => {}
                _ => {
                    let (value, saved) = self.eval_node(i)?;
                    let node = &mut self.nodes[i];
                    node.value = Some(value);
                    node.saved = saved;
                }
            }
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("parents are evaluated before children")
    }

    fn eval_node(&self, i: usize) -> Result<(Tensor, Vec<Tensor>)> {
        let v = |id: &NodeId| self.val(*id);
        let out = match &self.nodes[i].op {
            Op::Input { .. } | Op::Constant(_) => unreachable!(),
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::TransposeMatVec(a, x) => {
                let (ta, tx) = (v(a), v(x));
                if ta.rank() != 2 || tx.rank() != 1 {
                    return Err(Error::shape("transpose-matvec", ta.shape(), tx.shape()));
                }
                Tensor::vector(ta.t_matvec(tx.data())?)
            }
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::ScalarMul { scalar, tensor } => {
                let s = v(scalar);
                if !s.is_scalar() {
                    return Err(Error::shape("scalar-mul", s.shape(), v(tensor).shape()));
                }
                v(tensor).scale(s.item())
            }
            Op::Scale(c, a) => v(a).scale(*c),
            Op::AddScalar(c, a) => v(a).map(|x| x + c),
            Op::ElementwiseMul(a, b) => v(a).zip_map(v(b), "elementwise-mul", |x, y| x * y)?,
            Op::Transpose(a) => {
                let t = v(a);
                if t.rank() != 2 {
                    return Err(Error::shape("transpose", t.shape(), &[]));
                }
                t.transpose()
            }
            Op::SoftThreshold { input, theta } => {
                let th = v(theta);
                if !th.is_scalar() {
                    return Err(Error::shape("soft-threshold", v(input).shape(), th.shape()));
                }
                let th = th.item();
                if th < 0.0 {
                    return Err(Error::InvalidArgument(format!("soft-threshold with negative theta {th}")));
                }
                v(input).map(|u| shrink(u, th))
            }
            Op::Softplus(a) => v(a).map(softplus),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::Sqrt(a) => v(a).map(f64::sqrt),
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Mean(a) => {
                let t = v(a);
                Tensor::scalar(t.sum() / t.len() as f64)
            }
            Op::SquaredError { input, target } => {
                let d = v(input).sub(v(target))?;
                Tensor::scalar(d.dot(&d))
            }
            Op::KlGaussian {
                mu_q,
                var_q,
                mu_p,
                var_p,
            } => {
                let (mq, vq, mp, vp) = (v(mu_q), v(var_q), v(mu_p), v(var_p));
                for t in [vq, mp, vp] {
                    if t.shape() != mq.shape() {
                        return Err(Error::shape("kl-gaussian-elementwise", mq.shape(), t.shape()));
                    }
                }
                if vq.data().iter().chain(vp.data()).any(|&s| s <= 0.0) {
                    return Err(Error::InvalidArgument("nonpositive variance in KL".into()));
                }
                let data = (0..mq.len())
                    .map(|k| kl_entry(mq.data()[k], vq.data()[k], mp.data()[k], vp.data()[k]))
                    .collect();
                Tensor::raw(mq.shape().to_vec(), data)
            }
            Op::ReduceMaxAbs(a) => Tensor::scalar(v(a).norm_linf()),
            Op::Reshape(a, shape) => v(a).clone().reshape(shape)?,
            Op::Concat(parts) => {
                let mut data = Vec::new();
                for p in parts {
                    data.extend_from_slice(v(p).data());
                }
                Tensor::vector(data)
            }
            Op::Slice { input, start, len } => {
                let t = v(input);
                if start + len > t.len() {
                    return Err(Error::shape("slice", t.shape(), &[start + len]));
                }
                Tensor::vector(t.data()[*start..start + len].to_vec())
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
                return op.forward(&ins);
            }
        };
        Ok((out, Vec::new()))
    }

    /// Reverse sweep from `root` (must be a scalar). Returns gradients for
    /// every trainable input, zero-filled where the root does not depend on it.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self.value(root)?;
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::raw(root_val.shape().to_vec(), vec![1.0]));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Input { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }

        let mut out = Gradients::new();
        for node_id in self.names.values() {
            let node = &self.nodes[node_id.0];
            if let Op::Input {
                name,
                trainable: true,
            } = &node.op
            {
                let g = match grads.get_mut(node_id.0).and_then(Option::take) {
                    Some(g) => g,
                    None => Tensor::zeros(self.value(*node_id)?.shape()),
                };
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: &NodeId| self.val(*id);
        let out = match &self.nodes[i].op {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::TransposeMatVec(a, x) => {
                let (ta, tx) = (v(a), v(x));
                let (r, c) = (ta.rows(), ta.cols());
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; r * c];
                    for (i, &xi) in tx.data().iter().enumerate() {
                        for (o, &gj) in ga[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                            *o = xi * gj;
                        }
                    }
                    out.push((*a, Tensor::raw(vec![r, c], ga)));
                }
                if self.nodes[x.0].needs_grad {
                    out.push((*x, Tensor::vector(ta.matvec(g.data())?)));
                }
                out
            }
            Op::MatMul(a, b) if v(b).rank() == 1 => {
                let (ta, tb) = (v(a), v(b));
                let (m, k) = (ta.rows(), ta.cols());
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    for (i, &gi) in g.data().iter().enumerate() {
                        for (o, &bj) in ga[i * k..(i + 1) * k].iter_mut().zip(tb.data()) {
                            *o = gi * bj;
                        }
                    }
                    out.push((*a, Tensor::raw(vec![m, k], ga)));
                }
                if self.nodes[b.0].needs_grad {
                    out.push((*b, Tensor::vector(ta.t_matvec(g.data())?)));
                }
                out
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(a), v(b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                if self.nodes[a.0].needs_grad {
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                }
                if self.nodes[b.0].needs_grad {
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                }
                vec![
                    (*a, Tensor::raw(ta.shape().to_vec(), ga)),
                    (*b, Tensor::raw(tb.shape().to_vec(), gb)),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::ScalarMul { scalar, tensor } => {
                let s = v(scalar);
                let t = v(tensor);
                vec![
                    (*scalar, Tensor::raw(s.shape().to_vec(), vec![g.dot(t)])),
                    (*tensor, g.scale(s.item())),
                ]
            }
            Op::Scale(c, a) => vec![(*a, g.scale(*c))],
            Op::AddScalar(_, a) => vec![(*a, g.clone())],
            Op::ElementwiseMul(a, b) => vec![
                (*a, g.zip_map(v(b), "elementwise-mul", |x, y| x * y)?),
                (*b, g.zip_map(v(a), "elementwise-mul", |x, y| x * y)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::SoftThreshold { input, theta } => {
                let u = v(input);
                let th = v(theta);
                let t = th.item();
                let mut gu = vec![0.0; u.len()];
                let mut gt = 0.0;
                for (k, (&uk, &gk)) in u.data().iter().zip(g.data()).enumerate() {
                    // Kink |u| = θ counts as inactive.
                    if uk.abs() > t {
                        gu[k] = gk;
                        gt -= uk.signum() * gk;
                    }
                }
                vec![
                    (*input, Tensor::raw(u.shape().to_vec(), gu)),
                    (*theta, Tensor::raw(th.shape().to_vec(), vec![gt])),
                ]
            }
            Op::Softplus(a) => vec![(*a, g.zip_map(v(a), "softplus", |gk, x| gk * sigmoid(x))?)],
            Op::Relu(a) => vec![(*a, g.zip_map(v(a), "relu", |gk, x| if x > 0.0 { gk } else { 0.0 })?)],
            Op::Sqrt(a) => {
                let out = self.val(NodeId(i));
                vec![(*a, g.zip_map(out, "sqrt", |gk, s| 0.5 * gk / s)?)]
            }
            Op::Sum(a) => {
                let t = v(a);
                vec![(*a, Tensor::filled(t.shape(), g.item()))]
            }
            Op::Mean(a) => {
                let t = v(a);
                vec![(*a, Tensor::filled(t.shape(), g.item() / t.len() as f64))]
            }
            Op::SquaredError { input, target } => {
                let d = v(input).sub(v(target))?.scale(2.0 * g.item());
                let neg = d.scale(-1.0);
                vec![(*input, d), (*target, neg)]
            }
            Op::KlGaussian {
                mu_q,
                var_q,
                mu_p,
                var_p,
            } => {
                let (mq, vq, mp, vp) = (v(mu_q), v(var_q), v(mu_p), v(var_p));
                let n = mq.len();
                let shape = mq.shape().to_vec();
                let (mut gmq, mut gvq, mut gmp, mut gvp) =
                    (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for k in 0..n {
                    let (a, s, b, t, gk) = (mq.data()[k], vq.data()[k], mp.data()[k], vp.data()[k], g.data()[k]);
                    let d = a - b;
                    gmq[k] = gk * d / t;
                    gmp[k] = -gk * d / t;
                    gvq[k] = gk * 0.5 * (1.0 / t - 1.0 / s);
                    gvp[k] = gk * 0.5 * (1.0 / t - (s + d * d) / (t * t));
                }
                vec![
                    (*mu_q, Tensor::raw(shape.clone(), gmq)),
                    (*var_q, Tensor::raw(shape.clone(), gvq)),
                    (*mu_p, Tensor::raw(shape.clone(), gmp)),
                    (*var_p, Tensor::raw(shape, gvp)),
                ]
            }
            Op::ReduceMaxAbs(a) => {
                let t = v(a);
                let mut ga = vec![0.0; t.len()];
                let mut best = (0usize, f64::NEG_INFINITY);
                for (k, x) in t.data().iter().enumerate() {
                    if x.abs() > best.1 {
                        best = (k, x.abs());
                    }
                }
                if !t.is_empty() {
                    let x = t.data()[best.0];
                    ga[best.0] = if x >= 0.0 { g.item() } else { -g.item() };
                }
                vec![(*a, Tensor::raw(t.shape().to_vec(), ga))]
            }
            Op::Reshape(a, _) => vec![(*a, g.clone().reshape(v(a).shape())?)],
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let t = v(p);
                    let len = t.len();
                    out.push((*p, Tensor::raw(t.shape().to_vec(), g.data()[offset..offset + len].to_vec())));
                    offset += len;
                }
                out
            }
            Op::Slice { input, start, len } => {
                let t = v(input);
                let mut ga = vec![0.0; t.len()];
                ga[*start..start + len].copy_from_slice(g.data());
                vec![(*input, Tensor::raw(t.shape().to_vec(), ga))]
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
                let node = &self.nodes[i];
                let out = node.value.as_ref().ok_or(Error::NotEvaluated)?;
                let grads = op.backward(&ins, out, &node.saved, g)?;
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(id, g)| g.map(|g| (*id, g)))
                    .collect()
            }
        };
        Ok(out)
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `KL(N(mq, vq) ‖ N(mp, vp))` for one entry.
pub fn kl_entry(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
    let d = mq - mp;
    0.5 * ((vp / vq).ln() + (vq + d * d) / vp - 1.0)
}
