//! Trainable loss networks.
//!
//! [`MetaLossNetwork`] is the edge-weighted, terminal-to-root form of a
//! [`LossExpr`]: every tree edge carries a multiplicative weight, so with all
//! weights at exactly one the network reproduces the symbolic expression.
//! [`FeedForwardLoss`] is the fixed-architecture alternative (a small MLP
//! applied to each `(yᵢ, fᵢ)` pair).

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::expr::{LossExpr, Operator, Symbol, Terminal};
use crate::scalar::{Scalar, PROTECT_EPS};

/// Mean of the initial edge-weight distribution.
pub const PHI_INIT_MEAN: f64 = 1.0;
/// Standard deviation of the initial edge-weight distribution.
pub const PHI_INIT_STD: f64 = 1e-3;

/// A loss whose parameters φ can be trained by gradient descent.
///
/// Implementations are applied elementwise to `n×C` label/prediction batches;
/// the per-sample loss sums the `C` outputs and [`LearnableLoss::loss`] takes
/// the batch mean.
pub trait LearnableLoss<T: Scalar>: Send + Sync {
    fn parameter_count(&self) -> usize;

    fn phi(&self) -> Vec<T>;

    fn set_phi(&mut self, phi: &[T]) -> Result<()>;

    /// Places the weights `phi` in `g`, as leaves when `trainable`, otherwise
    /// as constants.
    fn bind(&self, g: &Graph<T>, phi: &[T], trainable: bool) -> Vec<Var>;

    fn bind_phi(&self, g: &Graph<T>, trainable: bool) -> Vec<Var> {
        self.bind(g, &self.phi(), trainable)
    }

    /// Per-sample loss as an `n×1` column.
    fn per_sample(&self, g: &Graph<T>, phi: &[Var], y: Var, f: Var) -> Var;

    fn loss(&self, g: &Graph<T>, phi: &[Var], y: Var, f: Var) -> Var {
        let per = self.per_sample(g, phi, y, f);
        g.mean(per)
    }

    /// Flattens gradients returned for [`LearnableLoss::bind_phi`] leaves into φ order.
    fn flatten(&self, g: &Graph<T>, grads: &[Var]) -> Vec<T> {
        grads
            .iter()
            .flat_map(|&v| g.value(v).data().to_vec())
            .collect()
    }

    /// Scalar loss value on concrete batches.
    fn forward(&self, y: &Tensor<T>, f: &Tensor<T>) -> Result<T> {
        check_batch(y, f)?;
        let g = Graph::new();
        g.set_recording(false);
        let phi = self.bind_phi(&g, false);
        let (yv, fv) = (g.constant(y.clone()), g.constant(f.clone()));
        let out = self.loss(&g, &phi, yv, fv);
        Ok(g.item(out))
    }
}

fn check_batch<T: Scalar>(y: &Tensor<T>, f: &Tensor<T>) -> Result<()> {
    if y.shape() != f.shape() {
        return Err(Error::Contract(format!(
            "label batch {:?} and prediction batch {:?} differ in shape",
            y.shape(),
            f.shape()
        )));
    }
    if y.rows() == 0 || y.cols() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if !y.is_finite() || !f.is_finite() {
        return Err(Error::Contract("non-finite loss input".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetNode {
    Input(Terminal),
    Apply(Operator),
}

/// Weighted edge, oriented from a child (operand) towards the node consuming it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Argument position at `to`.
    pub slot: usize,
}

/// Work counters recorded while building a network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConstructionStats {
    pub node_visits: usize,
    pub edge_visits: usize,
}

#[derive(Debug, Clone)]
pub struct MetaLossNetwork<T> {
    source: LossExpr,
    key: String,
    /// Topological order: operands precede consumers; the root is last.
    nodes: Vec<NetNode>,
    /// Incoming edge ids per node, in argument order.
    incoming: Vec<[usize; 2]>,
    edges: Vec<Edge>,
    phi: Vec<T>,
    wrapper: bool,
}

impl<T: Scalar> MetaLossNetwork<T> {
    /// Transposes `expr` into a network with φ drawn from `N(1, 1e-3²)`.
    pub fn transpose_and_parameterize<R: Rng + ?Sized>(expr: &LossExpr, rng: &mut R) -> Self {
        let normal = Normal::new(PHI_INIT_MEAN, PHI_INIT_STD).expect("valid normal");
        let (mut net, _) = Self::build(expr);
        for w in net.phi.iter_mut() {
            *w = T::of(normal.sample(rng));
        }
        net
    }

    /// Network with every weight exactly one.
    pub fn unit(expr: &LossExpr) -> Self {
        Self::build(expr).0
    }

    pub fn with_phi(expr: &LossExpr, phi: &[T], wrapper: bool) -> Result<Self> {
        let (mut net, _) = Self::build(expr);
        net.set_phi(phi)?;
        net.wrapper = wrapper;
        Ok(net)
    }

    /// Single pass over the prefix sequence (reversed): each symbol becomes
    /// one node, each operand link one edge.
    pub fn build(expr: &LossExpr) -> (Self, ConstructionStats) {
        let symbols = expr.symbols();
        let mut stats = ConstructionStats::default();
        let mut nodes = Vec::with_capacity(symbols.len());
        let mut incoming = Vec::with_capacity(symbols.len());
        let mut edges = Vec::with_capacity(symbols.len().saturating_sub(1));
        let mut pending: Vec<usize> = Vec::with_capacity(symbols.len());
        for sym in symbols.iter().rev() {
            stats.node_visits += 1;
            let id = nodes.len();
            match *sym {
                Symbol::Term(t) => {
                    nodes.push(NetNode::Input(t));
                    incoming.push([usize::MAX; 2]);
                }
                Symbol::Op(op) => {
                    let mut slots = [usize::MAX; 2];
                    for (slot, s) in slots.iter_mut().enumerate().take(op.arity()) {
                        let from = pending.pop().expect("valid tree");
                        *s = edges.len();
                        edges.push(Edge { from, to: id, slot });
                        stats.edge_visits += 1;
                    }
                    nodes.push(NetNode::Apply(op));
                    incoming.push(slots);
                }
            }
            pending.push(id);
        }
        let n_edges = edges.len();
        let net = MetaLossNetwork {
            source: expr.clone(),
            key: expr.canonical_key(),
            nodes,
            incoming,
            edges,
            phi: vec![T::one(); n_edges],
            wrapper: false,
        };
        (net, stats)
    }

    /// Marks the network so its output passes through Softplus.
    pub fn wrap_nonnegative(mut self) -> Self {
        self.wrapper = true;
        self
    }

    pub fn set_wrapper(&mut self, on: bool) {
        self.wrapper = on;
    }

    pub fn wrapper(&self) -> bool {
        self.wrapper
    }

    pub fn source(&self) -> &LossExpr {
        &self.source
    }

    pub fn canonical_key(&self) -> &str {
        &self.key
    }

    pub fn nodes(&self) -> &[NetNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn export(&self) -> ExportedLoss {
        ExportedLoss::Symbolic {
            expression: self.source.to_sexp(),
            phi: self.phi.iter().map(|v| v.to_f64_lossy()).collect(),
            wrapper: self.wrapper,
        }
    }

    /// Root value for every entry of the batch (before per-sample summation).
    fn root(&self, g: &Graph<T>, phi: &[Var], y: Var, f: Var) -> Var {
        let (n, c) = g.shape(y);
        let eps = T::of(PROTECT_EPS);
        let mut plus_one = None;
        let mut minus_one = None;
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match *node {
                NetNode::Input(Terminal::Pred) => f,
                NetNode::Input(Terminal::Target) => y,
                NetNode::Input(Terminal::PlusOne) => {
                    *plus_one.get_or_insert_with(|| g.constant(Tensor::full(n, c, T::one())))
                }
                NetNode::Input(Terminal::MinusOne) => {
                    *minus_one.get_or_insert_with(|| g.constant(Tensor::full(n, c, -T::one())))
                }
                NetNode::Apply(op) => {
                    let arg = |k: usize| {
                        let e = self.incoming[id][k];
                        g.scale_by(phi[e], vals[self.edges[e].from])
                    };
                    match op {
                        Operator::Add => g.add(arg(0), arg(1)),
                        Operator::Sub => g.sub(arg(0), arg(1)),
                        Operator::Mul => g.mul(arg(0), arg(1)),
                        Operator::Aq => g.aq(arg(0), arg(1)),
                        Operator::Square => g.square(arg(0)),
                        Operator::Abs => g.abs(arg(0)),
                        Operator::SqrtP => g.sqrt_p(arg(0), eps),
                        Operator::LnP => g.ln_p(arg(0), eps),
                    }
                }
            };
            vals.push(v);
        }
        let root = *vals.last().expect("non-empty network");
        if self.wrapper {
            g.softplus(root)
        } else {
            root
        }
    }

    /// Loss value per sample *and* output (`n×C`), before the output sum.
    pub fn forward_elementwise(&self, y: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        check_batch(y, f)?;
        let g = Graph::new();
        g.set_recording(false);
        let phi = self.bind_phi(&g, false);
        let out = self.root(&g, &phi, g.constant(y.clone()), g.constant(f.clone()));
        let v = g.value(out).clone();
        Ok(v)
    }

    /// Per-sample losses (sum over outputs) as plain values.
    pub fn forward_per_sample(&self, y: &Tensor<T>, f: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward_elementwise(y, f)?.sum_cols().into_data())
    }
}

impl<T: Scalar> LearnableLoss<T> for MetaLossNetwork<T> {
    fn parameter_count(&self) -> usize {
        self.phi.len()
    }

    fn phi(&self) -> Vec<T> {
        self.phi.clone()
    }

    fn set_phi(&mut self, phi: &[T]) -> Result<()> {
        if phi.len() != self.phi.len() {
            return Err(Error::Contract(format!(
                "network has {} weights, got {}",
                self.phi.len(),
                phi.len()
            )));
        }
        self.phi.copy_from_slice(phi);
        Ok(())
    }

    fn bind(&self, g: &Graph<T>, phi: &[T], trainable: bool) -> Vec<Var> {
        debug_assert_eq!(phi.len(), self.phi.len());
        phi.iter()
            .map(|&w| {
                let t = Tensor::scalar(w);
                if trainable {
                    g.leaf(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    fn per_sample(&self, g: &Graph<T>, phi: &[Var], y: Var, f: Var) -> Var {
        let root = self.root(g, phi, y, f);
        g.sum_cols(root)
    }
}

/// Fixed-architecture loss network: inputs `(yᵢ, fᵢ)` per output, ReLU hidden
/// layers without biases, Softplus output, summed over outputs.
#[derive(Debug, Clone)]
pub struct FeedForwardLoss<T> {
    hidden: Vec<usize>,
    phi: Vec<T>,
}

impl<T: Scalar> FeedForwardLoss<T> {
    pub const DEFAULT_HIDDEN: [usize; 2] = [50, 50];

    fn layer_sizes(hidden: &[usize]) -> Vec<usize> {
        let mut sizes = vec![2];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        sizes
    }

    pub fn count_for(hidden: &[usize]) -> usize {
        Self::layer_sizes(hidden)
            .windows(2)
            .map(|w| w[0] * w[1])
            .sum()
    }

    /// Glorot-uniform initialised weights.
    pub fn glorot<R: Rng + ?Sized>(rng: &mut R, hidden: &[usize]) -> Self {
        let sizes = Self::layer_sizes(hidden);
        let mut phi = Vec::with_capacity(Self::count_for(hidden));
        for w in sizes.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            phi.extend((0..w[0] * w[1]).map(|_| T::of(dist.sample(rng))));
        }
        FeedForwardLoss {
            hidden: hidden.to_vec(),
            phi,
        }
    }

    pub fn with_phi(hidden: &[usize], phi: &[T]) -> Result<Self> {
        let mut net = FeedForwardLoss {
            hidden: hidden.to_vec(),
            phi: vec![T::zero(); Self::count_for(hidden)],
        };
        net.set_phi(phi)?;
        Ok(net)
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn export(&self) -> ExportedLoss {
        ExportedLoss::FeedForward {
            hidden: self.hidden.clone(),
            phi: self.phi.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }
}

impl<T: Scalar> LearnableLoss<T> for FeedForwardLoss<T> {
    fn parameter_count(&self) -> usize {
        self.phi.len()
    }

    fn phi(&self) -> Vec<T> {
        self.phi.clone()
    }

    fn set_phi(&mut self, phi: &[T]) -> Result<()> {
        if phi.len() != self.phi.len() {
            return Err(Error::Contract(format!(
                "network has {} weights, got {}",
                self.phi.len(),
                phi.len()
            )));
        }
        self.phi.copy_from_slice(phi);
        Ok(())
    }

    /// The first layer is bound as two `1×h` rows (the `y` and `f` weights),
    /// followed by one matrix per remaining layer.
    fn bind(&self, g: &Graph<T>, phi: &[T], trainable: bool) -> Vec<Var> {
        debug_assert_eq!(phi.len(), self.phi.len());
        let sizes = Self::layer_sizes(&self.hidden);
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        let mut bind = |rows: usize, cols: usize| {
            let t = Tensor::new(rows, cols, phi[offset..offset + rows * cols].to_vec());
            offset += rows * cols;
            if trainable {
                g.leaf(t)
            } else {
                g.constant(t)
            }
        };
        out.push(bind(1, sizes[1]));
        out.push(bind(1, sizes[1]));
        for w in sizes[1..].windows(2) {
            out.push(bind(w[0], w[1]));
        }
        out
    }

    fn per_sample(&self, g: &Graph<T>, phi: &[Var], y: Var, f: Var) -> Var {
        let (n, c) = g.shape(y);
        let yr = g.reshape(y, n * c, 1);
        let fr = g.reshape(f, n * c, 1);
        let mut h = g.relu(g.add(g.matmul(yr, phi[0]), g.matmul(fr, phi[1])));
        let last = phi.len() - 1;
        for &w in &phi[2..last] {
            h = g.relu(g.matmul(h, w));
        }
        let out = g.softplus(g.matmul(h, phi[last]));
        g.sum_cols(g.reshape(out, n, c))
    }
}

/// Serializable learned loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExportedLoss {
    Symbolic {
        expression: String,
        phi: Vec<f64>,
        wrapper: bool,
    },
    FeedForward {
        hidden: Vec<usize>,
        phi: Vec<f64>,
    },
}

impl ExportedLoss {
    pub fn build<T: Scalar>(&self) -> Result<Box<dyn LearnableLoss<T>>> {
        match self {
            ExportedLoss::Symbolic {
                expression,
                phi,
                wrapper,
            } => {
                let expr = LossExpr::parse(expression)?;
                let phi: Vec<T> = phi.iter().map(|&v| T::of(v)).collect();
                Ok(Box::new(MetaLossNetwork::with_phi(&expr, &phi, *wrapper)?))
            }
            ExportedLoss::FeedForward { hidden, phi } => {
                let phi: Vec<T> = phi.iter().map(|&v| T::of(v)).collect();
                Ok(Box::new(FeedForwardLoss::with_phi(hidden, &phi)?))
            }
        }
    }

    pub fn expression(&self) -> Option<&str> {
        match self {
            ExportedLoss::Symbolic { expression, .. } => Some(expression),
            ExportedLoss::FeedForward { .. } => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            ExportedLoss::Symbolic { phi, .. } | ExportedLoss::FeedForward { phi, .. } => phi.len(),
        }
    }
}
