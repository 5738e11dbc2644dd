//! Classifier, policy and critic networks.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sstn_tensor::nn::join;
use sstn_tensor::{cross_entropy_rows, softmax_rows, Conv2d, Linear, LstmCell, Module, Scalar, Tape, Tensor, Var};

use crate::dataset::NUM_CLASSES;
use crate::error::{Result, SstnError};
use crate::geometry::{Action, NUM_ACTIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Mlp,
    LeNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub input_side: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
}

impl ClassifierConfig {
    pub fn mlp() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Mlp,
            input_side: 80,
            num_classes: NUM_CLASSES,
            hidden: 256,
            conv1_channels: 32,
            conv2_channels: 64,
            kernel: 5,
        }
    }

    pub fn lenet() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::LeNet,
            ..Self::mlp()
        }
    }

    pub fn with_side(self, input_side: usize) -> Self {
        ClassifierConfig { input_side, ..self }
    }

    /// Side after conv -> pool -> conv -> pool, or an error if the input is
    /// too small or a pooled size is odd.
    fn lenet_side(&self) -> Result<usize> {
        lenet_side(self.input_side, self.kernel, self.kernel)
    }
}

fn lenet_side(input: usize, k1: usize, k2: usize) -> Result<usize> {
    let bad = || SstnError::Config(format!("input side {input} does not fit kernels {k1} and {k2} with 2x2 pooling"));
    let a = input.checked_sub(k1 - 1).ok_or_else(bad)?;
    if a % 2 != 0 {
        return Err(bad());
    }
    let b = (a / 2).checked_sub(k2 - 1).ok_or_else(bad)?;
    if b == 0 || b % 2 != 0 {
        return Err(bad());
    }
    Ok(b / 2)
}

#[derive(Clone, Debug)]
pub struct Classifier<S: Scalar = f32> {
    pub config: ClassifierConfig,
    pub conv: Option<(Conv2d<S>, Conv2d<S>)>,
    pub hidden: Linear<S>,
    pub out: Linear<S>,
}

impl<S: Scalar> Classifier<S> {
    pub fn new<R: RngCore>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    pub fn zeros(config: ClassifierConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ClassifierConfig, mut rng: Option<&mut dyn RngCore>) -> Result<Self> {
        let c = &config;
        let mut linear = |i, o| match rng.as_deref_mut() {
            Some(r) => Linear::new(i, o, r),
            None => Linear::zeros(i, o),
        };
        let (conv, flat) = match c.kind {
            ClassifierKind::Mlp => (None, c.input_side * c.input_side),
            ClassifierKind::LeNet => {
                let side = c.lenet_side()?;
                (Some(()), c.conv2_channels * side * side)
            }
        };
        let hidden = linear(flat, c.hidden);
        let out = linear(c.hidden, c.num_classes);
        let conv = conv.map(|_| match rng {
            Some(r) => (
                Conv2d::new(1, c.conv1_channels, c.kernel, r),
                Conv2d::new(c.conv1_channels, c.conv2_channels, c.kernel, r),
            ),
            None => (
                Conv2d::zeros(1, c.conv1_channels, c.kernel),
                Conv2d::zeros(c.conv1_channels, c.conv2_channels, c.kernel),
            ),
        });
        Ok(Classifier { config, conv, hidden, out })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_side;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(SstnError::Config(format!("classifier expects [B, 1, {s}, {s}], got {shape:?}")));
        }
        Ok(())
    }

    /// Logits `[B, classes]` for a `[B, 1, S, S]` batch.
    pub fn forward(&self, tape: &mut Tape<S>, images: Var) -> Result<Var> {
        self.check_input(tape.shape(images))?;
        let x = match &self.conv {
            None => tape.flatten(images)?,
            Some((c1, c2)) => {
                let x = c1.forward(tape, images)?;
                let x = tape.relu(x);
                let x = tape.maxpool2(x)?;
                let x = c2.forward(tape, x)?;
                let x = tape.relu(x);
                let x = tape.maxpool2(x)?;
                tape.flatten(x)?
            }
        };
        let x = self.hidden.forward(tape, x)?;
        let x = tape.relu(x);
        Ok(self.out.forward(tape, x)?)
    }

    /// Inference-only logits, evaluated in chunks to bound memory.
    pub fn logits(&self, images: &Tensor<S>) -> Result<Vec<S>> {
        self.check_input(images.shape())?;
        let b = images.shape()[0];
        let mut out = Vec::with_capacity(b * self.config.num_classes);
        let chunk = 256;
        for start in (0..b).step_by(chunk) {
            let rows: Vec<usize> = (start..(start + chunk).min(b)).collect();
            let part = if rows.len() == b {
                images.clone()
            } else {
                images.gather_rows(&rows)?
            };
            let mut tape = Tape::new();
            let x = tape.constant(&part);
            let y = self.forward(&mut tape, x)?;
            out.extend_from_slice(tape.value(y));
        }
        Ok(out)
    }

    /// Per-example cross-entropy and argmax prediction.
    pub fn assess(&self, images: &Tensor<S>, labels: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
        let logits = self.logits(images)?;
        let k = self.config.num_classes;
        if labels.len() * k != logits.len() {
            return Err(SstnError::Config(format!("{} labels for {} rows", labels.len(), logits.len() / k)));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(SstnError::Config(format!("label {l} out of range 0..{k}")));
        }
        Ok((cross_entropy_rows(&logits, k, labels), argmax_rows(&logits, k)))
    }
}

impl<S: Scalar> Module<S> for Classifier<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        if let Some((c1, c2)) = &self.conv {
            c1.visit_params(&join(prefix, "conv1"), f);
            c2.visit_params(&join(prefix, "conv2"), f);
        }
        self.hidden.visit_params(&join(prefix, "fc1"), f);
        self.out.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        if let Some((c1, c2)) = &mut self.conv {
            c1.visit_params_mut(&join(prefix, "conv1"), f);
            c2.visit_params_mut(&join(prefix, "conv2"), f);
        }
        self.hidden.visit_params_mut(&join(prefix, "fc1"), f);
        self.out.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

pub fn argmax_rows<S: Scalar>(xs: &[S], cols: usize) -> Vec<usize> {
    xs.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// LeNet feature extractor on an average-pooled view, optionally followed by
/// an LSTM fed with the features and the previous action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub use_lstm: bool,
    pub lstm_hidden: usize,
    pub num_actions: usize,
    pub input_side: usize,
    /// Average-pooling factor applied to the image before the convolutions.
    pub view_pool: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub features: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            use_lstm: true,
            lstm_hidden: 128,
            num_actions: NUM_ACTIONS,
            input_side: 80,
            view_pool: 4,
            conv1_channels: 32,
            conv1_kernel: 5,
            conv2_channels: 64,
            conv2_kernel: 3,
            features: 256,
        }
    }
}

impl PolicyConfig {
    pub fn without_lstm(self) -> Self {
        PolicyConfig { use_lstm: false, ..self }
    }

    fn view_side(&self) -> Result<usize> {
        if self.view_pool == 0 || !self.input_side.is_multiple_of(self.view_pool) {
            return Err(SstnError::Config(format!(
                "view pool {} must divide input side {}",
                self.view_pool, self.input_side
            )));
        }
        Ok(self.input_side / self.view_pool)
    }

    fn feature_len(&self) -> Result<usize> {
        let side = lenet_side(self.view_side()?, self.conv1_kernel, self.conv2_kernel)?;
        Ok(self.conv2_channels * side * side)
    }
}

/// LSTM carries on the episode tape.
#[derive(Clone, Copy, Debug)]
pub struct PolicyState {
    pub h: Var,
    pub c: Var,
}

/// Shared architecture of the actor (one logit per action) and the critic
/// (a single value).
#[derive(Clone, Debug)]
pub struct PolicyNet<S: Scalar = f32> {
    pub config: PolicyConfig,
    pub conv1: Conv2d<S>,
    pub conv2: Conv2d<S>,
    pub fc: Linear<S>,
    pub lstm: Option<LstmCell<S>>,
    pub head: Linear<S>,
}

impl<S: Scalar> PolicyNet<S> {
    pub fn actor<R: RngCore>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, config.num_actions, Some(rng))
    }

    pub fn critic<R: RngCore>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, 1, Some(rng))
    }

    pub fn zeros(config: PolicyConfig, outputs: usize) -> Result<Self> {
        Self::build(config, outputs, None)
    }

    fn build(config: PolicyConfig, outputs: usize, mut rng: Option<&mut dyn RngCore>) -> Result<Self> {
        let c = &config;
        let flat = c.feature_len()?;
        let mut linear = |i, o| match rng.as_deref_mut() {
            Some(r) => Linear::new(i, o, r),
            None => Linear::zeros(i, o),
        };
        let fc = linear(flat, c.features);
        let head_in = if c.use_lstm { c.lstm_hidden } else { c.features };
        let head = linear(head_in, outputs);
        let lstm_in = c.features + c.num_actions;
        let (conv1, conv2, lstm) = match rng {
            Some(r) => (
                Conv2d::new(1, c.conv1_channels, c.conv1_kernel, r),
                Conv2d::new(c.conv1_channels, c.conv2_channels, c.conv2_kernel, r),
                c.use_lstm.then(|| LstmCell::new(lstm_in, c.lstm_hidden, r)),
            ),
            None => (
                Conv2d::zeros(1, c.conv1_channels, c.conv1_kernel),
                Conv2d::zeros(c.conv1_channels, c.conv2_channels, c.conv2_kernel),
                c.use_lstm.then(|| LstmCell::zeros(lstm_in, c.lstm_hidden)),
            ),
        };
        Ok(PolicyNet {
            config,
            conv1,
            conv2,
            fc,
            lstm,
            head,
        })
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    /// Zero carries for a batch, or `None` without an LSTM.
    pub fn initial_state(&self, tape: &mut Tape<S>, batch: usize) -> Option<PolicyState> {
        self.lstm.as_ref().map(|l| {
            let z = Tensor::zeros(&[batch, l.hidden()]);
            PolicyState {
                h: tape.constant(&z),
                c: tape.constant(&z),
            }
        })
    }

    /// Raw outputs `[B, outputs]` for images `[B, 1, S, S]` and the previous
    /// one-hot actions `[B, actions]` (all zeros before the first step).
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        images: Var,
        prev_action: Var,
        state: Option<PolicyState>,
    ) -> Result<(Var, Option<PolicyState>)> {
        let c = &self.config;
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != c.input_side || s[3] != c.input_side {
            return Err(SstnError::Config(format!(
                "policy expects [B, 1, {0}, {0}], got {s:?}",
                c.input_side
            )));
        }
        let b = s[0];
        if tape.shape(prev_action) != [b, c.num_actions] {
            return Err(SstnError::Config(format!(
                "previous action must be [{b}, {}], got {:?}",
                c.num_actions,
                tape.shape(prev_action)
            )));
        }
        let mut x = images;
        if c.view_pool > 1 {
            x = tape.avgpool(x, c.view_pool)?;
        }
        let x = self.conv1.forward(tape, x)?;
        let x = tape.relu(x);
        let x = tape.maxpool2(x)?;
        let x = self.conv2.forward(tape, x)?;
        let x = tape.relu(x);
        let x = tape.maxpool2(x)?;
        let x = tape.flatten(x)?;
        let x = self.fc.forward(tape, x)?;
        let feat = tape.relu(x);
        match &self.lstm {
            None => Ok((self.head.forward(tape, feat)?, None)),
            Some(cell) => {
                let st = state.ok_or_else(|| SstnError::State("recurrent policy needs its LSTM state".into()))?;
                let merged = tape.concat_cols(feat, prev_action)?;
                let (h, cc) = cell.step(tape, merged, st.h, st.c)?;
                Ok((self.head.forward(tape, h)?, Some(PolicyState { h, c: cc })))
            }
        }
    }

    /// Actor convenience: action probabilities `[B, actions]`.
    pub fn probabilities(
        &self,
        tape: &mut Tape<S>,
        images: Var,
        prev_action: Var,
        state: Option<PolicyState>,
    ) -> Result<(Vec<S>, Option<PolicyState>)> {
        let (logits, st) = self.forward(tape, images, prev_action, state)?;
        Ok((softmax_rows(tape.value(logits), self.outputs()), st))
    }
}

impl<S: Scalar> Module<S> for PolicyNet<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.fc.visit_params(&join(prefix, "fc"), f);
        if let Some(l) = &self.lstm {
            l.visit_params(&join(prefix, "lstm"), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
        if let Some(l) = &mut self.lstm {
            l.visit_params_mut(&join(prefix, "lstm"), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

/// One-hot rows `[B, actions]`; `None` entries stay all-zero.
pub fn one_hot_batch<S: Scalar>(actions: &[Option<Action>]) -> Tensor<S> {
    let mut data = vec![S::zero(); actions.len() * NUM_ACTIONS];
    for (i, a) in actions.iter().enumerate() {
        if let Some(a) = a {
            data[i * NUM_ACTIONS + a.index()] = S::one();
        }
    }
    Tensor::from_vec(&[actions.len(), NUM_ACTIONS], data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Sample,
    Greedy,
}

/// Picks one index per probability row.
pub fn choose<S: Scalar, R: Rng + ?Sized>(probs: &[S], cols: usize, rng: &mut R, mode: SampleMode) -> Result<Vec<usize>> {
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < S::zero()) {
        return Err(SstnError::Numeric(format!("invalid action probability {p}")));
    }
    probs
        .chunks(cols)
        .map(|row| match mode {
            SampleMode::Greedy => Ok(argmax_rows(row, cols)[0]),
            SampleMode::Sample => {
                let dist = WeightedIndex::new(row.iter().map(|p| p.as_f64()))
                    .map_err(|e| SstnError::Numeric(format!("cannot sample from {row:?}: {e}")))?;
                Ok(dist.sample(rng))
            }
        })
        .collect()
}

/// Samples (or takes the argmax of) the policy given its logits and returns
/// the actions with their differentiable log-probabilities `[B]`.
pub fn sample_action<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    logits: Var,
    rng: &mut R,
    mode: SampleMode,
) -> Result<(Vec<Action>, Var)> {
    let cols = tape.shape(logits)[1];
    let probs = softmax_rows(tape.value(logits), cols);
    let idx = choose(&probs, cols, rng, mode)?;
    let logp = tape.log_softmax(logits);
    let picked = tape.pick(logp, &idx)?;
    let actions = idx.into_iter().map(Action::from_index).collect::<Result<Vec<_>>>()?;
    Ok((actions, picked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(b: usize, side: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[b, 1, side, side], 1.0, &mut rng)
    }

    #[test]
    fn zero_classifier_is_uniform() {
        for cfg in [ClassifierConfig::mlp(), ClassifierConfig::lenet().with_side(28)] {
            let clf = Classifier::<f32>::zeros(cfg).unwrap();
            let x = images(3, cfg.input_side, 1);
            let (loss, _) = clf.assess(&x, &[0, 4, 9]).unwrap();
            for l in loss {
                assert!((l - 10f64.ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn classifier_shapes_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clf = Classifier::<f32>::new(ClassifierConfig::mlp(), &mut rng).unwrap();
        assert_eq!(clf.logits(&images(5, 80, 3)).unwrap().len(), 50);
        assert!(matches!(clf.logits(&images(2, 28, 3)), Err(SstnError::Config(_))));
        let lenet = Classifier::<f32>::new(ClassifierConfig::lenet(), &mut rng).unwrap();
        assert_eq!(lenet.hidden.inputs(), 64 * 17 * 17);
        assert!(Classifier::<f32>::new(ClassifierConfig::lenet().with_side(10), &mut rng).is_err());
    }

    #[test]
    fn zero_policy_is_uniform_and_zero_critic_is_zero() {
        let cfg = PolicyConfig::default();
        let actor = PolicyNet::<f32>::zeros(cfg, NUM_ACTIONS).unwrap();
        let critic = PolicyNet::<f32>::zeros(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&images(4, 80, 4));
        let a = tape.constant(&one_hot_batch::<f32>(&[None; 4]));
        let st = actor.initial_state(&mut tape, 4);
        let (p, _) = actor.probabilities(&mut tape, x, a, st).unwrap();
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-7));
        let st = critic.initial_state(&mut tape, 4);
        let (v, _) = critic.forward(&mut tape, x, a, st).unwrap();
        assert_eq!(tape.shape(v), [4, 1]);
        assert!(tape.value(v).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_policy_needs_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = PolicyNet::<f32>::actor(PolicyConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&images(1, 80, 4));
        let a = tape.constant(&one_hot_batch::<f32>(&[None]));
        assert!(matches!(actor.forward(&mut tape, x, a, None), Err(SstnError::State(_))));
    }

    #[test]
    fn policy_rows_sum_to_one_and_remember_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let actor = PolicyNet::<f32>::actor(PolicyConfig::default(), &mut rng).unwrap();
        let img = images(1, 80, 7);
        let run = |history: &[Action]| {
            let mut tape = Tape::new();
            let x = tape.constant(&img);
            let mut st = actor.initial_state(&mut tape, 1);
            let mut prev = tape.constant(&one_hot_batch::<f32>(&[None]));
            let mut probs = Vec::new();
            for &h in history.iter().chain([Action::Identity].iter()) {
                let (p, s) = actor.probabilities(&mut tape, x, prev, st).unwrap();
                st = s;
                probs = p;
                prev = tape.constant(&one_hot_batch::<f32>(&[Some(h)]));
            }
            probs
        };
        let p1 = run(&[Action::TranslateXPos, Action::ScaleXY]);
        let p2 = run(&[Action::RotateNeg, Action::TranslateYNeg]);
        assert!((p1.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p1.iter().zip(&p2).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn sampling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut row = vec![0.0f32; 10];
        row[3] = 1.0;
        assert_eq!(choose(&row, 10, &mut rng, SampleMode::Sample).unwrap(), vec![3]);
        let greedy = [0.1f32, 0.7, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(choose(&greedy, 10, &mut rng, SampleMode::Greedy).unwrap(), vec![1]);
        let mut nan = vec![0.1f32; 10];
        nan[2] = f32::NAN;
        assert!(matches!(choose(&nan, 10, &mut rng, SampleMode::Sample), Err(SstnError::Numeric(_))));

        // a one-hot distribution as logits: log-prob of the drawn action is 0
        let mut tape = Tape::<f32>::new();
        let mut logits = vec![-1e4f32; 10];
        logits[6] = 0.0;
        let l = tape.constant(&Tensor::from_vec(&[1, 10], logits).unwrap());
        let (a, lp) = sample_action(&mut tape, l, &mut rng, SampleMode::Sample).unwrap();
        assert_eq!(a, vec![Action::ScaleXY]);
        assert_eq!(tape.value(lp), &[0.0]);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs = vec![0.1f64; 10];
        let mut counts = [0usize; 10];
        for _ in 0..100_000 {
            counts[choose(&probs, 10, &mut rng, SampleMode::Sample).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.1).abs() < 0.01);
        }
    }

    #[test]
    fn parameter_names_are_disjoint_between_actor_and_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let actor = PolicyNet::<f32>::actor(PolicyConfig::default(), &mut rng).unwrap();
        let critic = PolicyNet::<f32>::critic(PolicyConfig::default(), &mut rng).unwrap();
        let mut ids = Vec::new();
        actor.visit_params("", &mut |_, t| ids.push(t.id()));
        let mut shared = 0;
        critic.visit_params("", &mut |_, t| shared += ids.contains(&t.id()) as usize);
        assert_eq!(shared, 0);
        assert_eq!(actor.num_params() - critic.num_params(), 128 * 9 + 9);
    }
}
