//! REINFORCE and actor-critic updates, the classifier step, the joint
//! training loop and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sstn_tensor::{softmax_rows, Adam, AdamConfig, Module, Tape, Tensor, Var};

use crate::dataset::{DatasetBundle, NUM_CLASSES};
use crate::environment::{discounted_returns, rollout, Agent, EnvConfig, EpisodeTrace, FixedAgent, PolicyAgent, ReturnConvention};
use crate::error::{Result, SstnError};
use crate::geometry::{Action, ActionGrids};
use crate::models::{Classifier, ClassifierConfig, PolicyConfig, PolicyNet, SampleMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pg,
    Ac,
}

impl std::str::FromStr for Algorithm {
    type Err = SstnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pg" => Ok(Algorithm::Pg),
            "ac" => Ok(Algorithm::Ac),
            _ => Err(SstnError::Config(format!("unknown algorithm {s:?}, expected pg or ac"))),
        }
    }
}

/// How returns become per-step weights for the policy loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub gamma: f64,
    pub return_convention: ReturnConvention,
    /// Rescale advantages to zero mean and unit variance per batch.
    pub normalize_advantage: bool,
    pub entropy_coef: f64,
}

impl UpdateConfig {
    pub fn from_env(env: &EnvConfig) -> Self {
        UpdateConfig {
            gamma: env.gamma,
            return_convention: env.return_convention,
            normalize_advantage: false,
            entropy_coef: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
}

fn check_trace(trace: &EpisodeTrace) -> Result<()> {
    if trace.is_empty() || trace.steps.len() != trace.len() {
        return Err(SstnError::State(format!(
            "trace has {} steps with {} log-probabilities",
            trace.len(),
            trace.steps.len()
        )));
    }
    Ok(())
}

fn normalize(weights: &mut [Vec<f64>]) {
    let n = weights.iter().map(Vec::len).sum::<usize>() as f64;
    let mean = weights.iter().flatten().sum::<f64>() / n;
    let var = weights.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for a in weights.iter_mut().flatten() {
        *a = (*a - mean) / sd;
    }
}

/// `-mean_{t,b} logp[t][b] * weight[t][b]`, minus the entropy bonus.
fn policy_objective(tape: &mut Tape<f32>, trace: &EpisodeTrace, weights: &[Vec<f64>], entropy_coef: f64) -> Result<Var> {
    let scale = -1.0 / (trace.len() * trace.batch()) as f64;
    let mut total: Option<Var> = None;
    for (step, w) in trace.steps.iter().zip(weights) {
        let coef: Vec<f32> = w.iter().map(|a| (a * scale) as f32).collect();
        let mut term = tape.weighted_sum(step.log_prob, &coef)?;
        if entropy_coef != 0.0 {
            // sum_b sum_a p log p = -sum_b H_b, scaled so the bonus is a mean
            let p = tape.softmax(step.logits);
            let lp = tape.log_softmax(step.logits);
            let plp = tape.mul(p, lp)?;
            let s = tape.sum(plp);
            let s = tape.scale(s, (entropy_coef / (trace.len() * trace.batch()) as f64) as f32);
            term = tape.add(term, s)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| SstnError::State("empty trace".into()))
}

fn returns_of(trace: &EpisodeTrace, cfg: &UpdateConfig) -> Vec<Vec<f64>> {
    discounted_returns(&trace.rewards, cfg.gamma, cfg.return_convention)
}

/// One REINFORCE step: loss `-mean(logp * G)`. Consumes the episode tape.
pub fn pg_update(
    tape: Tape<f32>,
    trace: &EpisodeTrace,
    actor: &mut PolicyNet<f32>,
    opt: &mut Adam<f32>,
    cfg: &UpdateConfig,
) -> Result<UpdateStats> {
    let mut tape = tape;
    check_trace(trace)?;
    let mut weights = returns_of(trace, cfg);
    if cfg.normalize_advantage {
        normalize(&mut weights);
    }
    let loss = policy_objective(&mut tape, trace, &weights, cfg.entropy_coef)?;
    let policy_loss = tape.scalar(loss) as f64;
    let grads = tape.backward(loss)?;
    actor.collect_grads(&grads)?;
    opt.step(actor)?;
    Ok(UpdateStats {
        policy_loss,
        value_loss: 0.0,
    })
}

/// One actor-critic step. The actor weights log-probabilities by
/// `G - v` with `v` treated as a constant; the critic regresses `v` onto
/// `G` with a mean squared error. Both losses share a single backward pass
/// but the parameter sets are disjoint and stepped by separate optimisers.
pub fn ac_update(
    tape: Tape<f32>,
    trace: &EpisodeTrace,
    actor: &mut PolicyNet<f32>,
    critic: &mut PolicyNet<f32>,
    actor_opt: &mut Adam<f32>,
    critic_opt: &mut Adam<f32>,
    cfg: &UpdateConfig,
) -> Result<UpdateStats> {
    let mut tape = tape;
    check_trace(trace)?;
    let values = trace
        .values
        .as_ref()
        .filter(|v| v.len() == trace.len())
        .ok_or_else(|| SstnError::State("actor-critic update needs critic values for every step".into()))?;
    let returns = returns_of(trace, cfg);
    let mut adv: Vec<Vec<f64>> = returns
        .iter()
        .zip(values)
        .map(|(g, &v)| g.iter().zip(tape.value(v)).map(|(g, &v)| g - v as f64).collect())
        .collect();
    if cfg.normalize_advantage {
        normalize(&mut adv);
    }
    let actor_loss = policy_objective(&mut tape, trace, &adv, cfg.entropy_coef)?;
    let mut critic_loss: Option<Var> = None;
    for (g, &v) in returns.iter().zip(values) {
        let target: Vec<f32> = g.iter().map(|&x| x as f32).collect();
        let term = tape.mse(v, &target)?;
        critic_loss = Some(match critic_loss {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let critic_loss = tape.scale(critic_loss.expect("trace is non-empty"), 1.0 / trace.len() as f32);
    let stats = UpdateStats {
        policy_loss: tape.scalar(actor_loss) as f64,
        value_loss: tape.scalar(critic_loss) as f64,
    };
    let total = tape.add(actor_loss, critic_loss)?;
    let grads = tape.backward(total)?;
    actor.collect_grads(&grads)?;
    critic.collect_grads(&grads)?;
    actor_opt.step(actor)?;
    critic_opt.step(critic)?;
    Ok(stats)
}

/// One cross-entropy Adam step; returns the loss before the step.
pub fn classifier_update(classifier: &mut Classifier<f32>, opt: &mut Adam<f32>, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let logits = classifier.forward(&mut tape, x)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let value = tape.scalar(loss) as f64;
    let grads = tape.backward(loss)?;
    classifier.collect_grads(&grads)?;
    opt.step(classifier)?;
    Ok(value)
}

/// Stacks `frames` (each `[B, 1, S, S]`) along the batch axis.
fn stack(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = frames[0].shape().to_vec();
    shape[0] = frames.iter().map(|f| f.shape()[0]).sum();
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub classifier: ClassifierConfig,
    pub policy: PolicyConfig,
    pub env: EnvConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub critic_lr: Option<f64>,
    pub classifier_lr: Option<f64>,
    pub eval_mode: SampleMode,
    pub seed: u64,
    /// Train the classifier on every intermediate image instead of only the
    /// final one.
    pub classifier_on_all_steps: bool,
    pub normalize_advantage: bool,
    pub entropy_coef: f64,
    /// Supervised epochs on untransformed images before joint training.
    pub pretrain_classifier: usize,
    /// Replace the learned policy by a constant action (no policy updates).
    pub frozen_action: Option<Action>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Ac,
            classifier: ClassifierConfig::mlp(),
            policy: PolicyConfig::default(),
            env: EnvConfig::default(),
            batch_size: 64,
            epochs: 10,
            lr: 1e-4,
            critic_lr: None,
            classifier_lr: None,
            eval_mode: SampleMode::Greedy,
            seed: 0,
            classifier_on_all_steps: false,
            normalize_advantage: false,
            entropy_coef: 0.0,
            pretrain_classifier: 0,
            frozen_action: None,
            eval_batch: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(SstnError::Config("batch sizes must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr", Some(self.lr)),
            ("critic lr", self.critic_lr),
            ("classifier lr", self.classifier_lr),
        ] {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(SstnError::Config(format!("{name} must be positive, got {lr}")));
                }
            }
        }
        if self.critic_lr.is_some() && self.algorithm == Algorithm::Pg {
            return Err(SstnError::Config("critic learning rate given for policy-gradient training".into()));
        }
        if self.classifier.input_side != self.policy.input_side {
            return Err(SstnError::Config("classifier and policy disagree on the image side".into()));
        }
        Ok(())
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            normalize_advantage: self.normalize_advantage,
            entropy_coef: self.entropy_coef,
            ..UpdateConfig::from_env(&self.env)
        }
    }
}

/// Independent random streams derived from the run seed.
pub mod streams {
    pub const CLASSIFIER_INIT: u64 = 0;
    pub const ACTOR_INIT: u64 = 1;
    pub const CRITIC_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const ACTIONS: u64 = 4;
    pub const EVAL: u64 = 5;
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trainable state of a run.
#[derive(Clone, Debug)]
pub struct Models {
    pub classifier: Classifier<f32>,
    pub actor: Option<PolicyNet<f32>>,
    pub critic: Option<PolicyNet<f32>>,
}

impl Models {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let classifier = Classifier::new(cfg.classifier, &mut stream(cfg.seed, streams::CLASSIFIER_INIT))?;
        let learned = cfg.frozen_action.is_none();
        let actor = learned
            .then(|| PolicyNet::actor(cfg.policy, &mut stream(cfg.seed, streams::ACTOR_INIT)))
            .transpose()?;
        let critic = (learned && cfg.algorithm == Algorithm::Ac)
            .then(|| PolicyNet::critic(cfg.policy, &mut stream(cfg.seed, streams::CRITIC_INIT)))
            .transpose()?;
        Ok(Models { classifier, actor, critic })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub classifier_loss: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,accuracy,mean_reward,policy_loss,value_loss,classifier_loss,wall_seconds";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch,
            self.split,
            self.accuracy,
            self.mean_reward,
            self.policy_loss,
            self.value_loss,
            self.classifier_loss,
            self.wall_seconds
        )
    }

    /// Everything except the wall clock, for reproducibility checks.
    pub fn deterministic_part(&self) -> String {
        let full = self.csv();
        full[..full.rfind(',').expect("csv has columns")].to_string()
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy on the untransformed images.
    pub baseline_accuracy: f64,
    pub mean_reward: f64,
    pub mean_final_loss: f64,
    pub per_class: Vec<f64>,
    pub count: usize,
}

/// Rolls out the agent on every image and classifies the final images.
pub fn evaluate(
    classifier: &Classifier<f32>,
    agent: &mut dyn Agent,
    env: EnvConfig,
    data: &DatasetBundle,
    batch: usize,
) -> Result<Evaluation> {
    let side = data.side();
    let grids = ActionGrids::new((side, side));
    let n = data.len();
    let (mut correct, mut base_correct) = (0usize, 0usize);
    let (mut reward, mut loss) = (0.0, 0.0);
    let mut hits = [0usize; NUM_CLASSES];
    let mut totals = [0usize; NUM_CLASSES];
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let trace = rollout(&mut tape, agent, None, env, &grids, classifier, images, &labels, false)?;
        correct += trace.final_correct();
        base_correct += trace.baseline_pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        reward += trace.rewards.iter().flatten().sum::<f64>();
        for l in trace.final_losses() {
            loss += l;
        }
        for (p, &l) in trace.final_predictions().iter().zip(&labels) {
            totals[l] += 1;
            hits[l] += (*p == l) as usize;
        }
    }
    let nf = n.max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / nf,
        baseline_accuracy: base_correct as f64 / nf,
        mean_reward: reward / nf,
        mean_final_loss: loss / nf,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        count: n,
    })
}

/// Evaluates whichever policy the models carry (or the frozen action).
pub fn evaluate_models(models: &Models, cfg: &TrainConfig, data: &DatasetBundle, mode: SampleMode) -> Result<Evaluation> {
    match (&models.actor, cfg.frozen_action) {
        (Some(actor), None) => {
            let mut rng = stream(cfg.seed, streams::EVAL);
            let mut agent = PolicyAgent::new(actor, &mut rng, mode);
            evaluate(&models.classifier, &mut agent, cfg.env, data, cfg.eval_batch)
        }
        (_, action) => {
            let mut agent = FixedAgent::new(action.unwrap_or(Action::Identity));
            evaluate(&models.classifier, &mut agent, cfg.env, data, cfg.eval_batch)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: Models,
    pub metrics: Vec<MetricsRow>,
}

/// Called after every epoch with the epoch index, the models and the rows
/// just produced.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &Models, &[MetricsRow]) -> Result<()>;

fn finite_or_abort(epoch: usize, batch: usize, stats: &UpdateStats, closs: f64) -> Result<()> {
    if stats.policy_loss.is_finite() && stats.value_loss.is_finite() && closs.is_finite() {
        return Ok(());
    }
    Err(SstnError::Numeric(format!(
        "non-finite loss at epoch {epoch}, batch {batch}: policy {}, value {}, classifier {}",
        stats.policy_loss, stats.value_loss, closs
    )))
}

#[derive(Default)]
struct EpochTotals {
    correct: usize,
    seen: usize,
    reward: f64,
    policy: f64,
    value: f64,
    classifier: f64,
    batches: usize,
}

impl EpochTotals {
    fn row(&self, epoch: usize, start: Instant) -> MetricsRow {
        let nb = self.batches.max(1) as f64;
        MetricsRow {
            epoch,
            split: "train".into(),
            accuracy: self.correct as f64 / self.seen.max(1) as f64,
            mean_reward: self.reward / self.seen.max(1) as f64,
            policy_loss: self.policy / nb,
            value_loss: self.value / nb,
            classifier_loss: self.classifier / nb,
            wall_seconds: start.elapsed().as_secs_f64(),
        }
    }
}

fn test_row(epoch: usize, eval: &Evaluation, start: Instant) -> MetricsRow {
    MetricsRow {
        epoch,
        split: "test".into(),
        accuracy: eval.accuracy,
        mean_reward: eval.mean_reward,
        policy_loss: 0.0,
        value_loss: 0.0,
        classifier_loss: eval.mean_final_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}

fn classifier_opt(cfg: &TrainConfig) -> Adam<f32> {
    Adam::new(AdamConfig::with_lr(cfg.classifier_lr.unwrap_or(cfg.lr)))
}

/// Supervised epochs on untransformed images, shared by pretraining and the
/// plain baseline. Returns `(correct, seen, summed loss, batches)`.
fn supervised_epoch(
    classifier: &mut Classifier<f32>,
    opt: &mut Adam<f32>,
    data: &DatasetBundle,
    order: &[usize],
    batch: usize,
) -> Result<(usize, usize, f64, usize)> {
    let (mut correct, mut seen, mut loss, mut batches) = (0, 0, 0.0, 0);
    for chunk in order.chunks(batch) {
        let (images, labels) = data.batch(chunk)?;
        let (_, preds) = classifier.assess(&images, &labels)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        seen += labels.len();
        let l = classifier_update(classifier, opt, &images, &labels)?;
        if !l.is_finite() {
            return Err(SstnError::Numeric(format!("non-finite classifier loss at batch {batches}: {l}")));
        }
        loss += l;
        batches += 1;
    }
    Ok((correct, seen, loss, batches))
}

/// Joint training of policy, critic and classifier.
pub fn train(cfg: &TrainConfig, train_set: &DatasetBundle, test_set: &DatasetBundle, mut hook: Option<EpochHook>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(SstnError::Config("empty training set".into()));
    }
    let side = train_set.side();
    let grids = ActionGrids::new((side, side));
    let mut models = Models::init(cfg)?;
    let mut shuffle = stream(cfg.seed, streams::SHUFFLE);
    let mut action_rng = stream(cfg.seed, streams::ACTIONS);
    let mut clf_opt = classifier_opt(cfg);
    let mut actor_opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut critic_opt = Adam::new(AdamConfig::with_lr(cfg.critic_lr.unwrap_or(cfg.lr)));
    let ucfg = cfg.update_config();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for _ in 0..cfg.pretrain_classifier {
        order.shuffle(&mut shuffle);
        supervised_epoch(&mut models.classifier, &mut clf_opt, train_set, &order, cfg.batch_size)?;
    }

    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut tot = EpochTotals::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = train_set.batch(chunk)?;
            let mut tape = Tape::new();
            let keep_frames = cfg.classifier_on_all_steps;
            let (trace, stats) = match (&mut models.actor, cfg.frozen_action) {
                (Some(actor), None) => {
                    let trace = {
                        let mut agent = PolicyAgent::new(actor, &mut action_rng, SampleMode::Sample);
                        rollout(
                            &mut tape,
                            &mut agent,
                            models.critic.as_ref(),
                            cfg.env,
                            &grids,
                            &models.classifier,
                            images,
                            &labels,
                            keep_frames,
                        )?
                    };
                    let stats = match (cfg.algorithm, &mut models.critic) {
                        (Algorithm::Ac, Some(critic)) => ac_update(tape, &trace, actor, critic, &mut actor_opt, &mut critic_opt, &ucfg)?,
                        _ => pg_update(tape, &trace, actor, &mut actor_opt, &ucfg)?,
                    };
                    (trace, stats)
                }
                (_, action) => {
                    let mut agent = FixedAgent::new(action.unwrap_or(Action::Identity));
                    let trace = rollout(
                        &mut tape,
                        &mut agent,
                        None,
                        cfg.env,
                        &grids,
                        &models.classifier,
                        images,
                        &labels,
                        keep_frames,
                    )?;
                    (trace, UpdateStats::default())
                }
            };
            let closs = if cfg.classifier_on_all_steps {
                let all = stack(&trace.frames)?;
                let all_labels: Vec<usize> = (0..trace.len()).flat_map(|_| labels.iter().copied()).collect();
                classifier_update(&mut models.classifier, &mut clf_opt, &all, &all_labels)?
            } else {
                classifier_update(&mut models.classifier, &mut clf_opt, &trace.final_images, &labels)?
            };
            finite_or_abort(epoch, bi, &stats, closs)?;
            tot.correct += trace.final_correct();
            tot.seen += labels.len();
            tot.reward += trace.rewards.iter().flatten().sum::<f64>();
            tot.policy += stats.policy_loss;
            tot.value += stats.value_loss;
            tot.classifier += closs;
            tot.batches += 1;
        }
        let train_row = tot.row(epoch, start);
        let eval = evaluate_models(&models, cfg, test_set, cfg.eval_mode)?;
        let rows = [train_row, test_row(epoch, &eval, start)];
        if let Some(h) = hook.as_mut() {
            h(epoch, &models, &rows)?;
        }
        metrics.extend(rows);
    }
    Ok(TrainOutcome { models, metrics })
}

/// Plain supervised classifier training with the same random streams and
/// budget as [`train`]; the no-transform baseline.
pub fn train_supervised(
    cfg: &TrainConfig,
    train_set: &DatasetBundle,
    test_set: &DatasetBundle,
    mut hook: Option<EpochHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classifier = Classifier::new(cfg.classifier, &mut stream(cfg.seed, streams::CLASSIFIER_INIT))?;
    let mut models = Models {
        classifier,
        actor: None,
        critic: None,
    };
    let mut shuffle = stream(cfg.seed, streams::SHUFFLE);
    let mut opt = classifier_opt(cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..cfg.pretrain_classifier {
        order.shuffle(&mut shuffle);
        supervised_epoch(&mut models.classifier, &mut opt, train_set, &order, cfg.batch_size)?;
    }
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let (correct, seen, loss, batches) = supervised_epoch(&mut models.classifier, &mut opt, train_set, &order, cfg.batch_size)?;
        let (test_loss, preds) = assess_all(&models.classifier, test_set, cfg.eval_batch)?;
        let test_correct = preds.iter().zip(&test_set.labels).filter(|(p, l)| **p == **l as usize).count();
        let n = test_set.len().max(1) as f64;
        let rows = [
            MetricsRow {
                epoch,
                split: "train".into(),
                accuracy: correct as f64 / seen.max(1) as f64,
                mean_reward: 0.0,
                policy_loss: 0.0,
                value_loss: 0.0,
                classifier_loss: loss / batches.max(1) as f64,
                wall_seconds: start.elapsed().as_secs_f64(),
            },
            MetricsRow {
                epoch,
                split: "test".into(),
                accuracy: test_correct as f64 / n,
                mean_reward: 0.0,
                policy_loss: 0.0,
                value_loss: 0.0,
                classifier_loss: test_loss.iter().sum::<f64>() / n,
                wall_seconds: start.elapsed().as_secs_f64(),
            },
        ];
        if let Some(h) = hook.as_mut() {
            h(epoch, &models, &rows)?;
        }
        metrics.extend(rows);
    }
    Ok(TrainOutcome { models, metrics })
}

/// Per-example loss and prediction on untransformed images.
pub fn assess_all(classifier: &Classifier<f32>, data: &DatasetBundle, batch: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let (mut losses, mut preds) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let (l, p) = classifier.assess(&images, &labels)?;
        losses.extend(l);
        preds.extend(p);
    }
    Ok((losses, preds))
}

/// Probability of each action under the actor for one state, for
/// diagnostics.
pub fn action_probabilities(actor: &PolicyNet<f32>, images: &Tensor<f32>) -> Result<Vec<f32>> {
    let b = images.shape()[0];
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let prev = tape.constant(&crate::models::one_hot_batch::<f32>(&vec![None; b]));
    let st = actor.initial_state(&mut tape, b);
    let (logits, _) = actor.forward(&mut tape, x, prev, st)?;
    Ok(softmax_rows(tape.value(logits), actor.outputs()))
}
