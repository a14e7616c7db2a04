use std::cell::{Ref, RefCell};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m×n] + [n]`, bias broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    LogSigmoid(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Conv2d(Var, Var, Var),
    MaxPool(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it.
/// A tape is meant to be built for one forward pass and then dropped.
#[derive(Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Gradients of a scalar w.r.t. every node that influenced it.
#[derive(Debug)]
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
    visits: usize,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    /// Number of nodes processed by the reverse sweep.
    pub fn visits(&self) -> usize {
        self.visits
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Records a leaf: a parameter, an input, or a constant.
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var(nodes.len() - 1))
    }

    fn unary(
        &self,
        name: &'static str,
        a: Var,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(&self.value(a), &self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a bias vector `[n]` to every row of `[m×n]`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(bias));
            let (_, n) = av.dims2("add_row")?;
            if bv.shape() != [n] {
                return Err(Error::dim(
                    "add_row",
                    format!("{:?} + {:?}", av.shape(), bv.shape()),
                ));
            }
            let mut data = av.data().to_vec();
            for row in data.chunks_mut(n) {
                for (x, &b) in row.iter_mut().zip(bv.data()) {
                    *x = *x + b;
                }
            }
            Tensor::new(av.shape().to_vec(), data)?
        };
        self.push("add_row", out, Op::AddRow(a, bias))
    }

    pub fn scale(&self, a: Var, c: S) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: S) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, S::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary("ln", a, S::ln, Op::Ln(a))
    }

    /// `max(0, x)`; the subgradient at 0 is taken as 0.
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn log_sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, kernels::log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let out = kernels::log_softmax_rows(&self.value(a))?;
        self.push("log_softmax", out, Op::LogSoftmax(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            Tensor::scalar(v.sum() / S::of(v.numel() as f64))
        };
        self.push("mean", out, Op::Mean(a))
    }

    /// Sums each row of `[m×n]`, giving `[m]`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let (m, n) = v.dims2("sum_rows")?;
            let data = v.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
            Tensor::new(vec![m], data)?
        };
        self.push("sum_rows", out, Op::SumRows(a))
    }

    /// Picks `a[i, idx[i]]` for every row, giving `[m]`.
    pub fn gather(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let (m, n) = v.dims2("gather")?;
            if idx.len() != m {
                return Err(Error::dim("gather", format!("{} indices for {m} rows", idx.len())));
            }
            if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
                return Err(Error::Contract(format!("index {bad} out of range for {n} columns")));
            }
            let data = idx.iter().enumerate().map(|(i, &j)| v.data()[i * n + j]).collect();
            Tensor::new(vec![m], data)?
        };
        self.push("gather", out, Op::Gather(a, idx.to_vec()))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a))
    }

    pub fn conv2d(&self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = kernels::conv2d(&self.value(x), &self.value(kernel), &self.value(bias))?;
        self.push("conv2d", out, Op::Conv2d(x, kernel, bias))
    }

    pub fn maxpool2d(&self, x: Var) -> Result<Var> {
        let (out, arg) = kernels::maxpool2d(&self.value(x))?;
        self.push("maxpool2d", out, Op::MaxPool(x, arg))
    }

    /// Reverse sweep from a scalar `loss`. Every node on the tape is visited
    /// exactly once; nodes that do not reach `loss` get no gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let Some(loss_node) = nodes.get(loss.0) else {
            return Err(Error::Contract(format!("{loss:?} is not on this tape")));
        };
        if !loss_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape().to_vec()));
        let mut visits = 0;
        for i in (0..nodes.len()).rev() {
            visits += 1;
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            for (parent, pg) in local_grads(&nodes, node, &g)? {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }
}

fn local_grads<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &Tensor<S>,
) -> Result<Vec<(Var, Tensor<S>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => vec![
            (*a, kernels::matmul_a_bt(g, val(*b))?),
            (*b, kernels::matmul_at_b(val(*a), g)?),
        ],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), "mul_grad", |x, y| x * y)?),
            (*b, g.zip_map(val(*a), "mul_grad", |x, y| x * y)?),
        ],
        Op::AddRow(a, bias) => {
            let n = val(*bias).numel();
            let mut db = vec![S::zero(); n];
            for row in g.data().chunks(n) {
                for (d, &x) in db.iter_mut().zip(row) {
                    *d = *d + x;
                }
            }
            vec![(*a, g.clone()), (*bias, Tensor::new(vec![n], db)?)]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Square(a) => vec![(*a, g.zip_map(val(*a), "square_grad", |x, y| S::of(2.0) * x * y)?)],
        Op::Exp(a) => vec![(*a, g.zip_map(out, "exp_grad", |x, y| x * y)?)],
        Op::Ln(a) => vec![(*a, g.zip_map(val(*a), "ln_grad", |x, y| x / y)?)],
        Op::Relu(a) => vec![(
            *a,
            g.zip_map(val(*a), "relu_grad", |x, y| if y > S::zero() { x } else { S::zero() })?,
        )],
        // d/dx ln σ(x) = σ(−x) = exp(ln σ(−x))
        Op::LogSigmoid(a) => vec![(
            *a,
            g.zip_map(val(*a), "log_sigmoid_grad", |x, y| x * kernels::log_sigmoid(-y).exp())?,
        )],
        Op::LogSoftmax(a) => {
            let k = *out.shape().last().unwrap_or(&1);
            let mut d = Vec::with_capacity(g.numel());
            for (grow, orow) in g.data().chunks(k).zip(out.data().chunks(k)) {
                let gs: S = grow.iter().copied().sum();
                d.extend(grow.iter().zip(orow).map(|(&gi, &li)| gi - li.exp() * gs));
            }
            vec![(*a, Tensor::new(out.shape().to_vec(), d)?)]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0]))],
        Op::Mean(a) => {
            let v = val(*a);
            let s = g.data()[0] / S::of(v.numel() as f64);
            vec![(*a, Tensor::full(v.shape().to_vec(), s))]
        }
        Op::SumRows(a) => {
            let v = val(*a);
            let n = v.shape()[1];
            let d = g.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
            vec![(*a, Tensor::new(v.shape().to_vec(), d)?)]
        }
        Op::Gather(a, idx) => {
            let v = val(*a);
            let n = v.shape()[1];
            let mut d = vec![S::zero(); v.numel()];
            for (i, (&j, &x)) in idx.iter().zip(g.data()).enumerate() {
                d[i * n + j] = x;
            }
            vec![(*a, Tensor::new(v.shape().to_vec(), d)?)]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
        Op::Conv2d(x, k, b) => {
            let (dx, dk, db) = kernels::conv2d_backward(val(*x), val(*k), g)?;
            vec![(*x, dx), (*k, dk), (*b, db)]
        }
        Op::MaxPool(x, arg) => {
            let v = val(*x);
            let mut d = vec![S::zero(); v.numel()];
            for (&src, &gv) in arg.iter().zip(g.data()) {
                d[src] = d[src] + gv;
            }
            vec![(*x, Tensor::new(v.shape().to_vec(), d)?)]
        }
    })
}
