use std::cell::{Cell, Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// Handle to a value recorded in a [`Graph`].
///
/// Handles are plain indices; using one with a graph other than the one that
/// produced it is a logic error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    Shift(T),
    Square,
    Abs,
    SqrtP(T),
    LnP(T),
    Aq,
    Exp,
    Ln,
    ClampMin(T),
    Softplus,
    Sigmoid,
    Relu,
    MatMul,
    MatMulNt,
    MatMulTn,
    Transpose,
    AddRow,
    SumRows,
    RepeatRows,
    SumCols,
    RepeatCols,
    Sum,
    Fill,
    ScaleBy,
    Reshape,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    parents: [usize; 2],
    arity: u8,
    requires_grad: bool,
}

/// Append-only computation graph with eager evaluation and reverse-mode
/// differentiation.
///
/// Node ids increase in construction order, so every parent precedes its
/// child and the id order is a topological order. Backward passes are
/// themselves expressed with graph operations: with `create_graph = true`
/// the returned gradients carry provenance and can be differentiated again.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, &[], true)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, &[], false)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Enables or disables provenance recording; returns the previous state.
    pub fn set_recording(&self, on: bool) -> bool {
        self.recording.replace(on)
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, parents: &[Var], requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let mut p = [0usize; 2];
        for (slot, v) in p.iter_mut().zip(parents) {
            *slot = v.0;
        }
        nodes.push(Node {
            value,
            op,
            parents: p,
            arity: parents.len() as u8,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let tracked = self.recording.get() && parents.iter().any(|&p| self.requires_grad(p));
        if tracked {
            self.push_raw(value, op, parents, true)
        } else {
            self.push_raw(value, Op::Leaf, &[], false)
        }
    }

    fn unary(&self, a: Var, op: Op<T>, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Var {
        let v = f(&self.value(a));
        self.push(v, op, &[a])
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T>,
    ) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(v, op, &[a, b])
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, |x, y| x.zip_map(y, |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, |x, y| x.zip_map(y, |p, q| p - q))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, |x, y| x.zip_map(y, |p, q| p * q))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div, |x, y| x.zip_map(y, |p, q| p / q))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg, |x| x.map(|v| -v))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(c), |x| x.map(|v| v * c))
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&self, a: Var, c: T) -> Var {
        self.unary(a, Op::Shift(c), |x| x.map(|v| v + c))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square, |x| x.map(|v| v * v))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs, |x| x.map(|v| v.abs()))
    }

    /// `√(|a| + eps)`.
    pub fn sqrt_p(&self, a: Var, eps: T) -> Var {
        self.unary(a, Op::SqrtP(eps), |x| {
            x.map(|v| scalar::protected_sqrt(v, eps))
        })
    }

    /// `ln(|a| + eps)`.
    pub fn ln_p(&self, a: Var, eps: T) -> Var {
        self.unary(a, Op::LnP(eps), |x| x.map(|v| scalar::protected_ln(v, eps)))
    }

    /// Analytic quotient `a / √(1 + b²)`.
    pub fn aq(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Aq, |x, y| x.zip_map(y, scalar::analytic_quotient))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp, |x| x.map(|v| v.exp()))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln, |x| x.map(|v| v.ln()))
    }

    /// `max(a, lo)`; gradient passes only where `a > lo`.
    pub fn clamp_min(&self, a: Var, lo: T) -> Var {
        self.unary(a, Op::ClampMin(lo), |x| x.map(|v| v.max(lo)))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus, |x| x.map(scalar::softplus))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, |x| x.map(scalar::sigmoid))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| x.map(|v| v.max(T::zero())))
    }

    // ---- linear algebra and shape -----------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul, |x, y| x.matmul(y))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMulNt, |x, y| x.matmul_nt(y))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMulTn, |x, y| x.matmul_tn(y))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose, |x| x.transpose())
    }

    /// Adds a `1×m` row to each row of an `n×m` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, Op::AddRow, |x, r| x.add_row(r))
    }

    /// `n×m → 1×m` column sums.
    pub fn sum_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SumRows, |x| x.sum_rows())
    }

    pub fn repeat_rows(&self, a: Var, n: usize) -> Var {
        self.unary(a, Op::RepeatRows, |x| x.repeat_rows(n))
    }

    /// `n×m → n×1` row sums.
    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(a, Op::SumCols, |x| x.sum_cols())
    }

    pub fn repeat_cols(&self, a: Var, m: usize) -> Var {
        self.unary(a, Op::RepeatCols, |x| x.repeat_cols(m))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::Sum, |x| Tensor::scalar(x.sum()))
    }

    /// Broadcasts a `1×1` value to `rows×cols`.
    pub fn fill(&self, a: Var, rows: usize, cols: usize) -> Var {
        self.unary(a, Op::Fill, |x| Tensor::full(rows, cols, x.item()))
    }

    /// Multiplies every entry of `t` by the `1×1` value `s`.
    pub fn scale_by(&self, s: Var, t: Var) -> Var {
        self.binary(s, t, Op::ScaleBy, |sv, tv| {
            let k = sv.item();
            tv.map(|v| k * v)
        })
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        self.unary(a, Op::Reshape, |x| x.reshape(rows, cols))
    }

    // ---- composites --------------------------------------------------------

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Row-wise softmax, stabilised by a constant row-max shift.
    pub fn softmax_rows(&self, z: Var) -> Var {
        let shift = {
            let v = self.value(z);
            Tensor::from_fn(v.rows(), v.cols(), |r, _| {
                v.row(r).iter().copied().fold(T::neg_infinity(), T::max)
            })
        };
        let (_, cols) = self.shape(z);
        let shift = self.constant(shift);
        let e = self.exp(self.sub(z, shift));
        let s = self.repeat_cols(self.sum_cols(e), cols);
        self.div(e, s)
    }

    // ---- reverse mode ------------------------------------------------------

    /// Gradients of the scalar `output` with respect to each of `inputs`.
    ///
    /// Inputs that `output` does not depend on receive zeros. With
    /// `create_graph` the gradient computation is recorded, so the results can
    /// be fed to a further `grad` call.
    pub fn grad(&self, output: Var, inputs: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let n = output.0 + 1;
        let reaches = {
            let nodes = self.nodes.borrow();
            if output.0 >= nodes.len() {
                return Err(Error::Contract("grad output is not in this graph".into()));
            }
            let shape = nodes[output.0].value.shape();
            if shape != (1, 1) {
                return Err(Error::Contract(format!(
                    "grad requires a scalar output, got {}x{}",
                    shape.0, shape.1
                )));
            }
            let mut reaches = vec![false; n];
            for &i in inputs {
                if i.0 < n {
                    reaches[i.0] = true;
                }
            }
            for id in 0..n {
                let node = &nodes[id];
                for &p in &node.parents[..node.arity as usize] {
                    if p >= id {
                        return Err(Error::Contract(format!(
                            "graph is not topologically ordered at node {id}"
                        )));
                    }
                    if reaches[p] {
                        reaches[id] = true;
                    }
                }
            }
            reaches
        };

        let previous = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[output.0] = Some(self.scalar(T::one()));
        for id in (0..n).rev() {
            if !reaches[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let (op, parents, arity) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op, nodes[id].parents, nodes[id].arity as usize)
            };
            if arity == 0 {
                continue;
            }
            let need = [reaches[parents[0]], arity > 1 && reaches[parents[1]]];
            let pg = self.vjp(Var(id), op, parents, need, g);
            for k in 0..arity {
                if let Some(gp) = pg[k] {
                    let slot = &mut grads[parents[k]];
                    *slot = Some(match *slot {
                        None => gp,
                        Some(acc) => self.add(acc, gp),
                    });
                }
            }
        }
        self.recording.set(previous);

        Ok(inputs
            .iter()
            .map(|&i| match grads.get(i.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(i);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    /// Vector-Jacobian products for one node, built from graph operations.
    fn vjp(
        &self,
        out: Var,
        op: Op<T>,
        parents: [usize; 2],
        need: [bool; 2],
        g: Var,
    ) -> [Option<Var>; 2] {
        let a = Var(parents[0]);
        let b = Var(parents[1]);
        let mask = |f: &dyn Fn(T) -> T| {
            let t = self.value(a).map(f);
            self.constant(t)
        };
        let (ga, gb) = match op {
            Op::Leaf => (None, None),
            Op::Add => (Some(g), Some(g)),
            Op::Sub => (Some(g), need[1].then(|| self.neg(g))),
            Op::Mul => (
                need[0].then(|| self.mul(g, b)),
                need[1].then(|| self.mul(g, a)),
            ),
            Op::Div => (
                need[0].then(|| self.div(g, b)),
                need[1].then(|| self.neg(self.div(self.mul(g, out), b))),
            ),
            Op::Neg => (Some(self.neg(g)), None),
            Op::Scale(c) => (Some(self.scale(g, c)), None),
            Op::Shift(_) => (Some(g), None),
            Op::Square => (Some(self.mul(g, self.scale(a, T::of(2.0)))), None),
            Op::Abs => (Some(self.mul(g, mask(&scalar::sign0))), None),
            Op::SqrtP(_) => {
                let half_sign = mask(&|v| scalar::sign0(v) * T::of(0.5));
                (Some(self.div(self.mul(g, half_sign), out)), None)
            }
            Op::LnP(eps) => {
                let sign = mask(&scalar::sign0);
                (
                    Some(self.div(self.mul(g, sign), self.shift(self.abs(a), eps))),
                    None,
                )
            }
            Op::Aq => {
                let (r, c) = self.shape(b);
                let inv = self.aq(self.constant(Tensor::full(r, c, T::one())), b);
                (
                    need[0].then(|| self.mul(g, inv)),
                    need[1].then(|| {
                        let t = self.mul(self.mul(g, out), self.mul(b, self.square(inv)));
                        self.neg(t)
                    }),
                )
            }
            Op::Exp => (Some(self.mul(g, out)), None),
            Op::Ln => (Some(self.div(g, a)), None),
            Op::ClampMin(lo) => (
                Some(self.mul(g, mask(&|v| if v > lo { T::one() } else { T::zero() }))),
                None,
            ),
            Op::Softplus => (Some(self.mul(g, self.sigmoid(a))), None),
            Op::Sigmoid => {
                let one_minus = self.shift(self.neg(out), T::one());
                (Some(self.mul(g, self.mul(out, one_minus))), None)
            }
            Op::Relu => (
                Some(self.mul(
                    g,
                    mask(&|v| if v > T::zero() { T::one() } else { T::zero() }),
                )),
                None,
            ),
            Op::MatMul => (
                need[0].then(|| self.matmul_nt(g, b)),
                need[1].then(|| self.matmul_tn(a, g)),
            ),
            Op::MatMulNt => (
                need[0].then(|| self.matmul(g, b)),
                need[1].then(|| self.matmul_tn(g, a)),
            ),
            Op::MatMulTn => (
                need[0].then(|| self.matmul_nt(b, g)),
                need[1].then(|| self.matmul(a, g)),
            ),
            Op::Transpose => (Some(self.transpose(g)), None),
            Op::AddRow => (Some(g), need[1].then(|| self.sum_rows(g))),
            Op::SumRows => {
                let (r, _) = self.shape(a);
                (Some(self.repeat_rows(g, r)), None)
            }
            Op::RepeatRows => (Some(self.sum_rows(g)), None),
            Op::SumCols => {
                let (_, c) = self.shape(a);
                (Some(self.repeat_cols(g, c)), None)
            }
            Op::RepeatCols => (Some(self.sum_cols(g)), None),
            Op::Sum => {
                let (r, c) = self.shape(a);
                (Some(self.fill(g, r, c)), None)
            }
            Op::Fill => (Some(self.sum(g)), None),
            Op::ScaleBy => (
                need[0].then(|| self.sum(self.mul(g, b))),
                need[1].then(|| self.scale_by(a, g)),
            ),
            Op::Reshape => {
                let (r, c) = self.shape(a);
                (Some(self.reshape(g, r, c)), None)
            }
        };
        [ga.filter(|_| need[0]), gb.filter(|_| need[1])]
    }
}
