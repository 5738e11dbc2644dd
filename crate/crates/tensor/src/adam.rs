use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar = f32> {
    pub first_moment: Vec<S>,
    pub second_moment: Vec<S>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        AdamState {
            first_moment: vec![S::zero(); len],
            second_moment: vec![S::zero(); len],
            step_count: 0,
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }
}

/// One bias-corrected Adam update; the gradient buffer is zeroed afterwards.
pub fn adam_step<S: Scalar>(param: &mut Tensor<S>, state: &mut AdamState<S>) -> Result<()> {
    if state.first_moment.len() != param.len() {
        return Err(TensorError::State(format!(
            "adam state tracks {} values, parameter has {}",
            state.first_moment.len(),
            param.len()
        )));
    }
    let grad = match param.grad() {
        Some(g) => g.to_vec(),
        None => return Err(TensorError::State("adam_step on a parameter without gradient".into())),
    };
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;
    let data = param.data_mut();
    for (((p, &g), m), v) in data
        .iter_mut()
        .zip(&grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let g = g.as_f64();
        let m1 = b1 * m.as_f64() + (1.0 - b1) * g;
        let v1 = b2 * v.as_f64() + (1.0 - b2) * g * g;
        *m = S::from_f64(m1);
        *v = S::from_f64(v1);
        let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + eps);
        *p = S::from_f64(p.as_f64() - update);
    }
    param.zero_grad();
    Ok(())
}

/// Adam over every parameter of a module, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<S: Scalar = f32> {
    config: AdamConfig,
    states: HashMap<String, AdamState<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: HashMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<S>> {
        self.states.get(name)
    }

    pub fn step<M: Module<S> + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        let cfg = self.config;
        let states = &mut self.states;
        let mut res = Ok(());
        module.visit_params_mut("", &mut |name, t| {
            if res.is_err() || !t.requires_grad() {
                return;
            }
            let st = states.entry(name).or_insert_with(|| AdamState::new(t.len(), cfg));
            res = adam_step(t, st);
        });
        res
    }
}
