//! Fixed-horizon episodes over image states, the three reward functions and
//! discounted returns.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sstn_tensor::{Tape, Tensor, Var};

use crate::error::{Result, SstnError};
use crate::geometry::{action_to_affine, compose, Action, ActionGrids, AffineMap, NUM_ACTIONS};
use crate::models::{one_hot_batch, sample_action, Classifier, PolicyNet, PolicyState, SampleMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    /// +1 when a wrong prediction becomes correct, -1 for the reverse.
    R1,
    /// Negated loss.
    R2,
    /// Loss decrease since the previous step.
    R3,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::R1 => "r1",
            RewardKind::R2 => "r2",
            RewardKind::R3 => "r3",
        }
    }
}

impl std::str::FromStr for RewardKind {
    type Err = SstnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r1" => Ok(RewardKind::R1),
            "r2" => Ok(RewardKind::R2),
            "r3" => Ok(RewardKind::R3),
            _ => Err(SstnError::Config(format!("unknown reward {s:?}, expected r1, r2 or r3"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnConvention {
    /// `G_t = sum_{k >= t} gamma^(k - t) r_k`.
    #[default]
    Standard,
    /// `G_t = sum_{k >= t} gamma^(T - 1 - k) r_k`: later rewards weigh more.
    AsPrinted,
}

impl std::str::FromStr for ReturnConvention {
    type Err = SstnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ReturnConvention::Standard),
            "as-printed" => Ok(ReturnConvention::AsPrinted),
            _ => Err(SstnError::Config(format!(
                "unknown return convention {s:?}, expected standard or as-printed"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub episode_length: usize,
    pub reward: RewardKind,
    pub gamma: f64,
    pub return_convention: ReturnConvention,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            episode_length: 40,
            reward: RewardKind::R3,
            gamma: 0.98,
            return_convention: ReturnConvention::Standard,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_length == 0 {
            return Err(SstnError::Config("episode length must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SstnError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

pub fn reward_r1(pred_prev: &[usize], pred_now: &[usize], labels: &[usize]) -> Vec<f64> {
    pred_prev
        .iter()
        .zip(pred_now)
        .zip(labels)
        .map(|((&p, &n), &l)| match (p == l, n == l) {
            (false, true) => 1.0,
            (true, false) => -1.0,
            _ => 0.0,
        })
        .collect()
}

pub fn reward_r2(loss_now: &[f64]) -> Vec<f64> {
    loss_now.iter().map(|l| -l).collect()
}

pub fn reward_r3(loss_prev: &[f64], loss_now: &[f64]) -> Vec<f64> {
    loss_prev.iter().zip(loss_now).map(|(p, n)| p - n).collect()
}

/// Returns for `rewards[t][b]`, same layout.
pub fn discounted_returns(rewards: &[Vec<f64>], gamma: f64, convention: ReturnConvention) -> Vec<Vec<f64>> {
    let t_len = rewards.len();
    let mut out = vec![Vec::new(); t_len];
    let Some(batch) = rewards.first().map(Vec::len) else {
        return out;
    };
    match convention {
        ReturnConvention::Standard => {
            let mut acc = vec![0.0; batch];
            for t in (0..t_len).rev() {
                for (a, r) in acc.iter_mut().zip(&rewards[t]) {
                    *a = r + gamma * *a;
                }
                out[t] = acc.clone();
            }
        }
        ReturnConvention::AsPrinted => {
            // weights depend only on k, so this is a weighted suffix sum
            let mut acc = vec![0.0; batch];
            for t in (0..t_len).rev() {
                let w = gamma.powi((t_len - 1 - t) as i32);
                for (a, r) in acc.iter_mut().zip(&rewards[t]) {
                    *a += w * r;
                }
                out[t] = acc.clone();
            }
        }
    }
    out
}

/// Outcome of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub rewards: Vec<f64>,
    pub losses: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// A batch of episodes in progress. Holds the classifier by shared
/// reference, so a rollout cannot modify it.
pub struct Environment<'a> {
    config: EnvConfig,
    grids: &'a ActionGrids<f32>,
    classifier: &'a Classifier<f32>,
    labels: Vec<usize>,
    images: Tensor<f32>,
    prev_actions: Vec<Option<Action>>,
    composed: Vec<AffineMap>,
    t: usize,
    baseline_loss: Vec<f64>,
    baseline_pred: Vec<usize>,
    loss_prev: Vec<f64>,
    pred_prev: Vec<usize>,
}

impl<'a> Environment<'a> {
    pub fn reset(
        config: EnvConfig,
        grids: &'a ActionGrids<f32>,
        classifier: &'a Classifier<f32>,
        images: Tensor<f32>,
        labels: &[usize],
    ) -> Result<Self> {
        config.validate()?;
        let b = labels.len();
        if b == 0 {
            return Err(SstnError::Config("empty batch".into()));
        }
        let s = images.shape();
        if s.len() != 4 || s[0] != b {
            return Err(SstnError::Config(format!("{b} labels for images of shape {s:?}")));
        }
        let (baseline_loss, baseline_pred) = classifier.assess(&images, labels)?;
        Ok(Environment {
            config,
            grids,
            classifier,
            labels: labels.to_vec(),
            images,
            prev_actions: vec![None; b],
            composed: vec![AffineMap::IDENTITY; b],
            t: 0,
            loss_prev: baseline_loss.clone(),
            pred_prev: baseline_pred.clone(),
            baseline_loss,
            baseline_pred,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= self.config.episode_length
    }

    pub fn batch(&self) -> usize {
        self.labels.len()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn prev_actions(&self) -> &[Option<Action>] {
        &self.prev_actions
    }

    pub fn baseline_loss(&self) -> &[f64] {
        &self.baseline_loss
    }

    pub fn baseline_pred(&self) -> &[usize] {
        &self.baseline_pred
    }

    /// Accumulated map per element (diagnostics only; images are resampled
    /// every step).
    pub fn composed(&self) -> &[AffineMap] {
        &self.composed
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Warps every image by its action, classifies the result and scores it.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepRecord> {
        if self.done() {
            return Err(SstnError::State(format!(
                "episode of length {} already finished",
                self.config.episode_length
            )));
        }
        if actions.len() != self.batch() {
            return Err(SstnError::Config(format!(
                "{} actions for a batch of {}",
                actions.len(),
                self.batch()
            )));
        }
        self.images = self.grids.apply(&self.images, actions)?;
        let size = self.grids.size();
        for (m, &a) in self.composed.iter_mut().zip(actions) {
            *m = compose(m, &action_to_affine(a, size));
        }
        let (losses, predictions) = self.classifier.assess(&self.images, &self.labels)?;
        let rewards = match self.config.reward {
            RewardKind::R1 => reward_r1(&self.pred_prev, &predictions, &self.labels),
            RewardKind::R2 => reward_r2(&losses),
            RewardKind::R3 => reward_r3(&self.loss_prev, &losses),
        };
        self.loss_prev.clone_from(&losses);
        self.pred_prev.clone_from(&predictions);
        for (p, &a) in self.prev_actions.iter_mut().zip(actions) {
            *p = Some(a);
        }
        self.t += 1;
        Ok(StepRecord {
            rewards,
            losses,
            predictions,
        })
    }
}

/// Chooses actions for a batch, optionally recording log-probabilities on
/// the episode tape.
pub trait Agent {
    fn begin(&mut self, tape: &mut Tape<f32>, batch: usize) -> Result<()>;

    /// Actions for the current images, with `[B]` log-probabilities when the
    /// agent is differentiable.
    fn act(&mut self, tape: &mut Tape<f32>, images: Var, prev: Var) -> Result<(Vec<Action>, Option<StepOutput>)>;
}

/// Tape nodes produced by a learned agent at one step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub log_prob: Var,
    pub logits: Var,
}

/// Learned actor that samples from (or maximises) its softmax.
pub struct PolicyAgent<'a, R: Rng> {
    pub net: &'a PolicyNet<f32>,
    pub rng: &'a mut R,
    pub mode: SampleMode,
    state: Option<PolicyState>,
}

impl<'a, R: Rng> PolicyAgent<'a, R> {
    pub fn new(net: &'a PolicyNet<f32>, rng: &'a mut R, mode: SampleMode) -> Self {
        PolicyAgent {
            net,
            rng,
            mode,
            state: None,
        }
    }
}

impl<R: Rng> Agent for PolicyAgent<'_, R> {
    fn begin(&mut self, tape: &mut Tape<f32>, batch: usize) -> Result<()> {
        self.state = self.net.initial_state(tape, batch);
        Ok(())
    }

    fn act(&mut self, tape: &mut Tape<f32>, images: Var, prev: Var) -> Result<(Vec<Action>, Option<StepOutput>)> {
        let (logits, st) = self.net.forward(tape, images, prev, self.state)?;
        self.state = st;
        let (actions, log_prob) = sample_action(tape, logits, self.rng, self.mode)?;
        Ok((actions, Some(StepOutput { log_prob, logits })))
    }
}

/// Uniformly random actions.
pub struct RandomAgent<R: Rng> {
    pub rng: R,
    batch: usize,
}

impl<R: Rng> RandomAgent<R> {
    pub fn new(rng: R) -> Self {
        RandomAgent { rng, batch: 0 }
    }
}

impl<R: Rng> Agent for RandomAgent<R> {
    fn begin(&mut self, _tape: &mut Tape<f32>, batch: usize) -> Result<()> {
        self.batch = batch;
        Ok(())
    }

    fn act(&mut self, _tape: &mut Tape<f32>, _images: Var, _prev: Var) -> Result<(Vec<Action>, Option<StepOutput>)> {
        let actions = (0..self.batch)
            .map(|_| Action::ALL[self.rng.random_range(0..NUM_ACTIONS)])
            .collect();
        Ok((actions, None))
    }
}

/// The same action at every step for every image.
pub struct FixedAgent {
    pub action: Action,
    batch: usize,
}

impl FixedAgent {
    pub fn new(action: Action) -> Self {
        FixedAgent { action, batch: 0 }
    }
}

impl Agent for FixedAgent {
    fn begin(&mut self, _tape: &mut Tape<f32>, batch: usize) -> Result<()> {
        self.batch = batch;
        Ok(())
    }

    fn act(&mut self, _tape: &mut Tape<f32>, _images: Var, _prev: Var) -> Result<(Vec<Action>, Option<StepOutput>)> {
        Ok((vec![self.action; self.batch], None))
    }
}

/// Plays a fixed sequence, then Identity.
pub struct SequenceAgent {
    pub sequence: Vec<Action>,
    step: usize,
    batch: usize,
}

impl SequenceAgent {
    pub fn new(sequence: Vec<Action>) -> Self {
        SequenceAgent {
            sequence,
            step: 0,
            batch: 0,
        }
    }
}

impl Agent for SequenceAgent {
    fn begin(&mut self, _tape: &mut Tape<f32>, batch: usize) -> Result<()> {
        self.step = 0;
        self.batch = batch;
        Ok(())
    }

    fn act(&mut self, _tape: &mut Tape<f32>, _images: Var, _prev: Var) -> Result<(Vec<Action>, Option<StepOutput>)> {
        let a = self.sequence.get(self.step).copied().unwrap_or(Action::Identity);
        self.step += 1;
        Ok((vec![a; self.batch], None))
    }
}

/// Everything recorded while rolling out one batch of episodes. Tape nodes
/// refer to the tape passed to [`rollout`].
#[derive(Clone, Debug)]
pub struct EpisodeTrace {
    pub steps: Vec<StepOutput>,
    pub values: Option<Vec<Var>>,
    pub actions: Vec<Vec<Action>>,
    pub rewards: Vec<Vec<f64>>,
    pub losses: Vec<Vec<f64>>,
    pub predictions: Vec<Vec<usize>>,
    pub baseline_loss: Vec<f64>,
    pub baseline_pred: Vec<usize>,
    pub labels: Vec<usize>,
    pub final_images: Tensor<f32>,
    /// Images after each step when requested (`frames[t]` follows action t).
    pub frames: Vec<Tensor<f32>>,
    pub composed: Vec<AffineMap>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.labels.len()
    }

    pub fn final_predictions(&self) -> &[usize] {
        self.predictions.last().map_or(&self.baseline_pred, Vec::as_slice)
    }

    pub fn final_losses(&self) -> &[f64] {
        self.losses.last().map_or(&self.baseline_loss, Vec::as_slice)
    }

    pub fn final_correct(&self) -> usize {
        self.final_predictions().iter().zip(&self.labels).filter(|(p, l)| p == l).count()
    }

    /// Undiscounted reward per episode, averaged over the batch.
    pub fn mean_total_reward(&self) -> f64 {
        let total: f64 = self.rewards.iter().flatten().sum();
        total / self.batch().max(1) as f64
    }
}

/// Runs a full episode for a batch. The critic, when given, is evaluated on
/// the same states and its values are kept on the tape.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    tape: &mut Tape<f32>,
    agent: &mut dyn Agent,
    critic: Option<&PolicyNet<f32>>,
    config: EnvConfig,
    grids: &ActionGrids<f32>,
    classifier: &Classifier<f32>,
    images: Tensor<f32>,
    labels: &[usize],
    keep_frames: bool,
) -> Result<EpisodeTrace> {
    let mut env = Environment::reset(config, grids, classifier, images, labels)?;
    let b = env.batch();
    agent.begin(tape, b)?;
    let mut critic_state = critic.and_then(|c| c.initial_state(tape, b));
    let mut trace = EpisodeTrace {
        steps: Vec::new(),
        values: critic.map(|_| Vec::new()),
        actions: Vec::new(),
        rewards: Vec::new(),
        losses: Vec::new(),
        predictions: Vec::new(),
        baseline_loss: env.baseline_loss().to_vec(),
        baseline_pred: env.baseline_pred().to_vec(),
        labels: labels.to_vec(),
        final_images: env.images().clone(),
        frames: Vec::new(),
        composed: Vec::new(),
    };
    while !env.done() {
        let x = tape.constant(env.images());
        let prev = tape.constant(&one_hot_batch::<f32>(env.prev_actions()));
        let (actions, out) = agent.act(tape, x, prev)?;
        if let (Some(c), Some(values)) = (critic, trace.values.as_mut()) {
            let (v, st) = c.forward(tape, x, prev, critic_state)?;
            critic_state = st;
            values.push(v);
        }
        let rec = env.step(&actions)?;
        if let Some(o) = out {
            trace.steps.push(o);
        }
        if keep_frames {
            trace.frames.push(env.images().clone());
        }
        trace.actions.push(actions);
        trace.rewards.push(rec.rewards);
        trace.losses.push(rec.losses);
        trace.predictions.push(rec.predictions);
    }
    trace.final_images = env.images().clone();
    trace.composed = env.composed().to_vec();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r1_truth_table() {
        let labels = [3, 3, 3, 3];
        let prev = [1, 3, 3, 1];
        let now = [3, 1, 3, 2];
        assert_eq!(reward_r1(&prev, &now, &labels), vec![1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn r2_and_r3_arithmetic() {
        assert_eq!(reward_r2(&[2.5, 0.0]), vec![-2.5, -0.0]);
        assert_eq!(reward_r3(&[2.0, 1.0], &[1.5, 1.0]), vec![0.5, 0.0]);
    }

    #[test]
    fn standard_returns_example() {
        let g = discounted_returns(&[vec![0.0], vec![0.0], vec![1.0]], 0.98, ReturnConvention::Standard);
        let flat: Vec<f64> = g.into_iter().flatten().collect();
        for (a, b) in flat.iter().zip([0.9604, 0.98, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let suffix = discounted_returns(&[vec![1.0], vec![2.0], vec![3.0]], 1.0, ReturnConvention::Standard);
        assert_eq!(suffix, vec![vec![6.0], vec![5.0], vec![3.0]]);
    }

    #[test]
    fn as_printed_weights_late_rewards_more() {
        let g = discounted_returns(&[vec![1.0], vec![0.0], vec![0.0]], 0.5, ReturnConvention::AsPrinted);
        assert_eq!(g, vec![vec![0.25], vec![0.0], vec![0.0]]);
        let g = discounted_returns(&[vec![0.0], vec![0.0], vec![1.0]], 0.5, ReturnConvention::AsPrinted);
        assert_eq!(g, vec![vec![1.0], vec![1.0], vec![1.0]]);
    }

    #[test]
    fn config_validation() {
        assert!(EnvConfig {
            episode_length: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EnvConfig {
            gamma: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EnvConfig {
            gamma: 1.0,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert_eq!("as-printed".parse::<ReturnConvention>().unwrap(), ReturnConvention::AsPrinted);
        assert!("r4".parse::<RewardKind>().is_err());
    }
}
