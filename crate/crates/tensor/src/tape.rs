//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so replaying them backwards visits every
//! node after all of its consumers. The tape is consumed by
//! [`Tape::backward`]; a new one is built for every forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, ParamId, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the vector-Jacobian product.
pub trait CustomOp<S: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Gradients for each input, `None` where `needs[i]` is false.
    fn backward(&self, inputs: &[&[S]], output: &[S], out_grad: &[S], needs: &[bool]) -> Vec<Option<Vec<S>>>;
}

/// Elementwise and row-wise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax over the last dimension.
    Softmax,
}

enum Op<S: Scalar> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Act(Var, Activation),
    LogSoftmax(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
        f: usize,
    },
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Pick {
        input: Var,
        index: Vec<usize>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        input: Var,
        target: Vec<S>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<S>>,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    value: Arc<Vec<S>>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = numel(shape).checked_div(cols).unwrap_or(0);
    (rows, cols)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_node(shape, Arc::new(value), op, needs_grad)
    }

    fn push_node(&mut self, shape: Vec<usize>, value: Arc<Vec<S>>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Snapshot of a node as a standalone tensor (shares the buffer).
    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push_node(t.shape().to_vec(), t.shared_data(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(shape_err("constant", shape, &[data.len()]));
        }
        Ok(self.push_node(shape.to_vec(), Arc::new(data), Op::Leaf, false))
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        self.push_node(t.shape().to_vec(), t.shared_data(), Op::Leaf, true)
    }

    /// Registers a parameter. Repeated registration of the same tensor on
    /// one tape returns the same node, so unrolled graphs share weights.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        if !t.requires_grad() {
            return self.constant(t);
        }
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push_node(t.shape().to_vec(), t.shared_data(), Op::Param(t.id()), true);
        self.params.insert(t.id(), v);
        v
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), Arc::clone(&n.value));
        self.push_node(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), self.value(a), false, self.value(b), false, S::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[m x n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let (_, cols) = rows_cols(sx);
        if numel(sb) != cols {
            return Err(shape_err("add_row", sx, sb));
        }
        let b = self.value(bias);
        let out: Vec<S> = self
            .value(x)
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(shape, out, Op::AddRow(x, bias), &[x, bias]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((sa.to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let shape = self.shape(x).to_vec();
        let xs = self.value(x);
        let out = match kind {
            Activation::Relu => xs.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect(),
            Activation::Sigmoid => xs.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Tanh => xs.iter().map(|&v| v.tanh()).collect(),
            Activation::Softmax => softmax_rows(xs, rows_cols(&shape).1),
        };
        self.push(shape, out, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softmax)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = rows_cols(&shape).1;
        let out = self
            .value(x)
            .chunks(cols.max(1))
            .flat_map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(move |&v| S::from_f64(v.as_f64() - lse))
            })
            .collect();
        self.push(shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Valid, stride-1 convolution: `[B,C,H,W] * [K,C,kh,kw] + bias[K]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || numel(sb) != sk[0] {
            return Err(shape_err("conv2d", si, sk));
        }
        if sk[2] > si[2] || sk[3] > si[3] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("kernel {}x{} larger than input {}x{}", sk[2], sk[3], si[2], si[3]),
            });
        }
        let geom = ConvGeom {
            batch: si[0],
            channels: si[1],
            height: si[2],
            width: si[3],
            kernels: sk[0],
            kh: sk[2],
            kw: sk[3],
        };
        let out = kernels::conv2d_forward(&geom, self.value(input), self.value(kernel), self.value(bias));
        let shape = vec![geom.batch, geom.kernels, geom.out_h(), geom.out_w()];
        Ok(self.push(shape, out, Op::Conv2d { input, kernel, bias, geom }, &[input, kernel, bias]))
    }

    /// 2x2 max pooling over the trailing two axes.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || !s[s.len() - 1].is_multiple_of(2) || !s[s.len() - 2].is_multiple_of(2) {
            return Err(TensorError::Dimension {
                op: "maxpool2",
                msg: format!("spatial dims of {s:?} must be even"),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s) / (h * w).max(1);
        let (out, argmax) = kernels::maxpool2_forward(self.value(x), planes, h, w);
        let mut shape = s;
        let n = shape.len();
        shape[n - 2] = h / 2;
        shape[n - 1] = w / 2;
        Ok(self.push(shape, out, Op::MaxPool2 { input: x, argmax }, &[x]))
    }

    /// Mean over non-overlapping `f x f` blocks of the trailing two axes.
    pub fn avgpool(&mut self, x: Var, f: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if f == 0 || s.len() < 2 || !s[s.len() - 1].is_multiple_of(f) || !s[s.len() - 2].is_multiple_of(f) {
            return Err(TensorError::Dimension {
                op: "avgpool",
                msg: format!("spatial dims of {s:?} not divisible by {f}"),
            });
        }
        if f == 1 {
            return Ok(x);
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s) / (h * w).max(1);
        let out = kernels::avgpool_forward(self.value(x), planes, h, w, f);
        let mut shape = s;
        let n = shape.len();
        shape[n - 2] = h / f;
        shape[n - 1] = w / f;
        Ok(self.push(shape, out, Op::AvgPool { input: x, planes, h, w, f }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if numel(shape) != n.value.len() {
            return Err(shape_err("reshape", &n.shape, shape));
        }
        let (value, needs) = (Arc::clone(&n.value), n.needs_grad);
        Ok(self.push_node(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    /// `[B, ...] -> [B, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = *s.first().unwrap_or(&1);
        let rest = numel(s).checked_div(b).unwrap_or(0);
        self.reshape(x, &[b, rest])
    }

    /// Concatenates two matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let (rows, p, q) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&va[r * p..(r + 1) * p]);
            out.extend_from_slice(&vb[r * q..(r + 1) * q]);
        }
        Ok(self.push(vec![rows, p + q], out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {s:?}", start + len),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let out = (0..rows)
            .flat_map(|r| v[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        Ok(self.push(vec![rows, len], out, Op::SliceCols { input: x, start }, &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let v = self.value(logits);
        let mut total = 0.0f64;
        let mut probs = Vec::with_capacity(b * c);
        for (row, &label) in v.chunks(c).zip(labels) {
            let lse = log_sum_exp(row);
            total += lse - row[label].as_f64();
            probs.extend(row.iter().map(|&x| S::from_f64((x.as_f64() - lse).exp())));
        }
        let loss = if b == 0 { 0.0 } else { total / b as f64 };
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![S::from_f64(loss)], op, &[logits]))
    }

    /// `out[b] = x[b, index[b]]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != index.len() {
            return Err(shape_err("pick", s, &[index.len()]));
        }
        let c = s[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(TensorError::Index {
                op: "pick",
                index: bad,
                bound: c,
            });
        }
        let v = self.value(x);
        let out = index.iter().enumerate().map(|(r, &i)| v[r * c + i]).collect();
        Ok(self.push(
            vec![index.len()],
            out,
            Op::Pick {
                input: x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// `sum_i x_i * w_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[S]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(shape_err("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let acc: f64 = self.value(x).iter().zip(weights).map(|(&a, &w)| a.as_f64() * w.as_f64()).sum();
        let op = Op::WeightedSum {
            input: x,
            weights: weights.to_vec(),
        };
        Ok(self.push(vec![1], vec![S::from_f64(acc)], op, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let acc: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        self.push(vec![1], vec![S::from_f64(acc)], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let acc: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        self.push(vec![1], vec![S::from_f64(acc / n)], Op::Mean(x), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[S]) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(shape_err("mse", self.shape(x), &[target.len()]));
        }
        let n = target.len().max(1) as f64;
        let acc: f64 = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(&a, &t)| (a.as_f64() - t.as_f64()).powi(2))
            .sum();
        let op = Op::Mse {
            input: x,
            target: target.to_vec(),
        };
        Ok(self.push(vec![1], vec![S::from_f64(acc / n)], op, &[x]))
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], shape: &[usize], value: Vec<S>, op: Box<dyn CustomOp<S>>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(shape_err(op.name(), shape, &[value.len()]));
        }
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            op,
        };
        Ok(self.push(shape.to_vec(), value, op, inputs))
    }

    /// Reverse sweep from a scalar node. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        let mut leaves = HashMap::new();
        let mut params = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Param(id) => {
                    params.insert(*id, g);
                }
                op => self.propagate(op, node, &g, &mut grads),
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn val(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op<S>, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut send = |v: Var, contrib: Vec<S>| accumulate(grads, v, contrib);
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves are handled by the caller"),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), g, false, self.val(*b), true, S::zero(), &mut da);
                    send(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(k, m, n, S::one(), self.val(*a), true, g, false, S::zero(), &mut db);
                    send(*b, db);
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    send(*x, g.to_vec());
                }
                if self.wants(*bias) {
                    let cols = self.val(*bias).len();
                    let mut acc = vec![0.0f64; cols];
                    for row in g.chunks(cols.max(1)) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v.as_f64();
                        }
                    }
                    send(*bias, acc.into_iter().map(S::from_f64).collect());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    send(*a, g.to_vec());
                }
                if self.wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    send(*a, g.to_vec());
                }
                if self.wants(*b) {
                    send(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.iter().zip(self.val(*b)).map(|(&gv, &y)| gv * y).collect());
                }
                if self.wants(*b) {
                    send(*b, g.iter().zip(self.val(*a)).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Act(x, kind) => {
                let y = &node.value;
                let dx = match kind {
                    Activation::Relu => g
                        .iter()
                        .zip(self.val(*x))
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect(),
                    Activation::Sigmoid => g.iter().zip(y.iter()).map(|(&gv, &s)| gv * s * (S::one() - s)).collect(),
                    Activation::Tanh => g.iter().zip(y.iter()).map(|(&gv, &t)| gv * (S::one() - t * t)).collect(),
                    Activation::Softmax => {
                        let cols = rows_cols(&node.shape).1.max(1);
                        let mut dx = Vec::with_capacity(g.len());
                        for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                            let dot = S::from_f64(dot);
                            dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                        }
                        dx
                    }
                };
                send(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let cols = rows_cols(&node.shape).1.max(1);
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(node.value.chunks(cols)) {
                    let total: f64 = gr.iter().map(|v| v.as_f64()).sum();
                    dx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &ly)| S::from_f64(gv.as_f64() - ly.as_f64().exp() * total)),
                    );
                }
                send(*x, dx);
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let cg = kernels::conv2d_backward(geom, self.val(*input), self.val(*kernel), g, self.wants(*input));
                if let Some(di) = cg.input {
                    send(*input, di);
                }
                if self.wants(*kernel) {
                    send(*kernel, cg.kernel);
                }
                if self.wants(*bias) {
                    send(*bias, cg.bias);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![S::zero(); self.val(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                send(*input, dx);
            }
            Op::AvgPool { input, planes, h, w, f } => {
                send(*input, kernels::avgpool_backward(g, *planes, *h, *w, *f));
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.nodes[a.0].shape[1], self.nodes[b.0].shape[1]);
                let w = p + q;
                if self.wants(*a) {
                    send(*a, g.chunks(w.max(1)).flat_map(|r| r[..p].iter().copied()).collect());
                }
                if self.wants(*b) {
                    send(*b, g.chunks(w.max(1)).flat_map(|r| r[p..].iter().copied()).collect());
                }
            }
            Op::SliceCols { input, start } => {
                let cols = self.nodes[input.0].shape[1];
                let len = node.shape[1];
                let mut dx = vec![S::zero(); self.val(*input).len()];
                for (r, row) in g.chunks(len.max(1)).enumerate() {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(row);
                }
                send(*input, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.nodes[logits.0].shape[1];
                let scale = g[0] / S::from_f64(labels.len().max(1) as f64);
                let mut dx: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= scale;
                }
                send(*logits, dx);
            }
            Op::Pick { input, index } => {
                let c = self.nodes[input.0].shape[1];
                let mut dx = vec![S::zero(); self.val(*input).len()];
                for (r, (&i, &gv)) in index.iter().zip(g).enumerate() {
                    dx[r * c + i] = gv;
                }
                send(*input, dx);
            }
            Op::WeightedSum { input, weights } => send(*input, weights.iter().map(|&w| w * g[0]).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.val(*x).len()]),
            Op::Mean(x) => {
                let n = self.val(*x).len();
                send(*x, vec![g[0] / S::from_f64(n.max(1) as f64); n]);
            }
            Op::Mse { input, target } => {
                let n = S::from_f64(target.len().max(1) as f64);
                let two = S::from_f64(2.0);
                let dx = self
                    .val(*input)
                    .iter()
                    .zip(target)
                    .map(|(&x, &t)| two * (x - t) * g[0] / n)
                    .collect();
                send(*input, dx);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&[S]> = inputs.iter().map(|v| self.val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.wants(*v)).collect();
                for (v, dg) in inputs.iter().zip(op.backward(&ins, &node.value, g, &needs)) {
                    if let Some(dg) = dg {
                        send(*v, dg);
                    }
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with f64 accumulation.
pub fn softmax_rows<S: Scalar>(xs: &[S], cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(xs.len());
    for row in xs.chunks(cols.max(1)) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| S::from_f64(e / total)));
    }
    out
}

/// Per-row cross-entropy `-log softmax(row)[label]`, without recording.
pub fn cross_entropy_rows<S: Scalar>(logits: &[S], classes: usize, labels: &[usize]) -> Vec<f64> {
    logits
        .chunks(classes.max(1))
        .zip(labels)
        .map(|(row, &l)| log_sum_exp(row) - row[l].as_f64())
        .collect()
}

/// Gradients produced by one backward sweep.
pub struct Gradients<S: Scalar = f32> {
    leaves: HashMap<usize, Vec<S>>,
    params: HashMap<ParamId, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of an [`Tape::input`] node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn of(&self, t: &Tensor<S>) -> Option<&[S]> {
        self.params.get(&t.id()).map(Vec::as_slice)
    }

    /// Adds this sweep's gradient into `t.grad`, creating a zero buffer when
    /// the loss did not reach `t`.
    pub fn accumulate_into(&self, t: &mut Tensor<S>) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        match self.params.get(&t.id()) {
            Some(g) => t.accumulate_grad(g),
            None => {
                t.ensure_grad();
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn conv_identity_kernel_and_ones() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..9).map(f64::from).collect();
        let x = tape.constant(&t(&[1, 1, 3, 3], &data));
        let k = tape.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y), data.as_slice());

        let x = tape.constant(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let k = tape.constant(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(&Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.constant(&Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn maxpool_single_window_and_odd_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
        let odd = tape.constant(&Tensor::zeros(&[1, 1, 3, 2]));
        assert!(tape.maxpool2(odd).is_err());
    }

    #[test]
    fn maxpool_constant_routes_gradient_to_first_cell() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::full(&[1, 1, 4, 4], 0.5));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y), &[0.5; 4]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let gx = g.wrt(x).unwrap();
        let hot: Vec<usize> = gx.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn relu_and_uniform_softmax() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
        let z = tape.constant(&Tensor::zeros(&[1, 10]));
        let p = tape.softmax(z);
        assert!(tape.value(p).iter().all(|&v| (v - 0.1).abs() < 1e-7));
    }

    #[test]
    fn cross_entropy_limits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(&Tensor::zeros(&[3, 10]));
        let l = tape.cross_entropy(z, &[0, 4, 9]).unwrap();
        assert!((tape.scalar(l) - 10f64.ln()).abs() < 1e-12);

        let mut row = vec![0.0; 10];
        row[3] = 100.0;
        let z = tape.constant(&t(&[1, 10], &row));
        let l = tape.cross_entropy(z, &[3]).unwrap();
        assert!(tape.scalar(l) < 1e-6);
        assert!(matches!(tape.cross_entropy(z, &[10]), Err(TensorError::Index { .. })));
    }

    #[test]
    fn params_are_deduplicated_and_gradients_accumulate() {
        let mut w = Tensor::<f64>::from_vec(&[1, 1], vec![3.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 1], &[2.0]));
        let a = tape.param(&w);
        let b = tape.param(&w);
        assert_eq!(a, b);
        let y1 = tape.matmul(x, a).unwrap();
        let y2 = tape.matmul(y1, b).unwrap(); // 2 * w * w
        let loss = tape.sum(y2);
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(&mut w).unwrap();
        assert_eq!(w.grad().unwrap(), &[12.0]);
    }

    #[test]
    fn unreached_params_get_zero_grad_buffers() {
        let mut w = Tensor::<f32>::zeros(&[2]).with_grad();
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        g.accumulate_into(&mut w).unwrap();
        assert_eq!(w.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::State(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&t(&[1], &[2.0]));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0]);
    }
}
