//! Parameterised layers and the [`Module`] trait for walking parameters.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Anything that owns named parameters.
pub trait Module<S: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>));

    fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.len());
        n
    }

    /// Adds the gradients of one backward sweep into every parameter.
    fn collect_grads(&mut self, grads: &Gradients<S>) -> Result<()> {
        let mut res = Ok(());
        self.visit_params_mut("", &mut |_, t| {
            if res.is_ok() {
                res = grads.accumulate_into(t);
            }
        });
        res
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut("", &mut |_, t| t.zero_grad());
    }

    /// Overwrites parameters from `(name, shape, data)` records.
    fn load_named(&mut self, records: &[(String, Vec<usize>, Vec<S>)]) -> Result<()> {
        let mut res = Ok(());
        self.visit_params_mut("", &mut |name, t| {
            if res.is_err() {
                return;
            }
            match records.iter().find(|(n, _, _)| *n == name) {
                Some((_, shape, data)) if shape.as_slice() == t.shape() => t.data_mut().copy_from_slice(data),
                Some((_, shape, _)) => {
                    res = Err(TensorError::Shape {
                        op: "load_named",
                        lhs: t.shape().to_vec(),
                        rhs: shape.clone(),
                    })
                }
                None => res = Err(TensorError::State(format!("missing parameter {name}"))),
            }
        });
        res
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<S: Scalar = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::param(&[inputs, outputs], inputs, rng),
            bias: Tensor::param(&[outputs], inputs, rng),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[inputs, outputs]).with_grad(),
            bias: Tensor::zeros(&[outputs]).with_grad(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Valid, stride-1 convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d<S: Scalar = f32> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, size: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * size * size;
        Conv2d {
            kernel: Tensor::param(&[out_channels, in_channels, size, size], fan_in, rng),
            bias: Tensor::param(&[out_channels], fan_in, rng),
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, size: usize) -> Self {
        Conv2d {
            kernel: Tensor::zeros(&[out_channels, in_channels, size, size]).with_grad(),
            bias: Tensor::zeros(&[out_channels]).with_grad(),
        }
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let k = tape.param(&self.kernel);
        let b = tape.param(&self.bias);
        tape.conv2d(x, k, b)
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Standard LSTM cell. Gate blocks in the fused projections are ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell<S: Scalar = f32> {
    pub w_input: Tensor<S>,
    pub w_hidden: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LstmCell<S> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        LstmCell {
            w_input: Tensor::param(&[inputs, 4 * hidden], inputs, rng),
            w_hidden: Tensor::param(&[hidden, 4 * hidden], hidden, rng),
            bias: Tensor::param(&[4 * hidden], hidden, rng),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        LstmCell {
            w_input: Tensor::zeros(&[inputs, 4 * hidden]).with_grad(),
            w_hidden: Tensor::zeros(&[hidden, 4 * hidden]).with_grad(),
            bias: Tensor::zeros(&[4 * hidden]).with_grad(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    /// One step: `(x, h, c) -> (h', c')`.
    pub fn step(&self, tape: &mut Tape<S>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hidden = self.hidden();
        let (sx, sh, sc) = (tape.shape(x), tape.shape(h), tape.shape(c));
        if sx.len() != 2 || sx[1] != self.inputs() || sh != [sx[0], hidden] || sc != sh {
            return Err(TensorError::Shape {
                op: "lstm_step",
                lhs: sx.to_vec(),
                rhs: sh.to_vec(),
            });
        }
        let wx = tape.param(&self.w_input);
        let wh = tape.param(&self.w_hidden);
        let b = tape.param(&self.bias);
        let zx = tape.matmul(x, wx)?;
        let zh = tape.matmul(h, wh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_row(z, b)?;
        let i = tape.slice_cols(z, 0, hidden)?;
        let f = tape.slice_cols(z, hidden, hidden)?;
        let g = tape.slice_cols(z, 2 * hidden, hidden)?;
        let o = tape.slice_cols(z, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

impl<S: Scalar> Module<S> for LstmCell<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "w_input"), &self.w_input);
        f(join(prefix, "w_hidden"), &self.w_hidden);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "w_input"), &mut self.w_input);
        f(join(prefix, "w_hidden"), &mut self.w_hidden);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
