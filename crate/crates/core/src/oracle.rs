//! Exhaustive search over short action sequences, used as ground truth for
//! what the policy could have achieved.

use serde::{Deserialize, Serialize};
use sstn_tensor::{Tape, Tensor};

use crate::environment::{rollout, Agent, EnvConfig, RewardKind};
use crate::error::{Result, SstnError};
use crate::geometry::{Action, ActionGrids};
use crate::models::Classifier;

pub const MAX_EVALUATIONS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_sequence: Vec<Action>,
    pub best_loss: f64,
    pub num_evaluated: usize,
}

fn budget(actions: usize, depth: usize) -> Result<usize> {
    let mut n: usize = 1;
    for _ in 0..depth {
        n = n.checked_mul(actions).filter(|&n| n <= MAX_EVALUATIONS).ok_or_else(|| {
            SstnError::Config(format!(
                "{actions}^{depth} sequences exceed the budget of {MAX_EVALUATIONS}; use a smaller depth or action subset"
            ))
        })?;
    }
    Ok(n)
}

/// Losses of every sequence in lexicographic order of action index, so the
/// sequence with rank `r` has digits `r` in base `|subset|`.
pub fn enumerate_losses(
    image: &Tensor<f32>,
    label: usize,
    classifier: &Classifier<f32>,
    depth: usize,
    subset: &[Action],
) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(SstnError::Config(format!("oracle expects one image [1, 1, H, W], got {s:?}")));
    }
    let mut subset = subset.to_vec();
    subset.sort();
    subset.dedup();
    if subset.is_empty() && depth > 0 {
        return Err(SstnError::Config("empty action subset".into()));
    }
    let total = budget(subset.len(), depth)?;
    let grids = ActionGrids::new((s[2], s[3]));
    let mut out = Vec::with_capacity(total);
    if depth == 0 {
        let (loss, _) = classifier.assess(image, &[label])?;
        out.push(loss[0]);
        return Ok(out);
    }
    expand(image, label, classifier, &grids, &subset, depth, &mut out)?;
    Ok(out)
}

fn expand(
    image: &Tensor<f32>,
    label: usize,
    classifier: &Classifier<f32>,
    grids: &ActionGrids<f32>,
    subset: &[Action],
    remaining: usize,
    out: &mut Vec<f64>,
) -> Result<()> {
    if remaining == 1 {
        // classify all children at once
        let batch: Vec<usize> = vec![0; subset.len()];
        let copies = image.gather_rows(&batch)?;
        let children = grids.apply(&copies, subset)?;
        let (loss, _) = classifier.assess(&children, &vec![label; subset.len()])?;
        out.extend(loss);
        return Ok(());
    }
    for &a in subset {
        let child = grids.apply(image, &[a])?;
        expand(&child, label, classifier, grids, subset, remaining - 1, out)?;
    }
    Ok(())
}

fn decode(rank: usize, subset: &[Action], depth: usize) -> Vec<Action> {
    let mut seq = vec![Action::Identity; depth];
    let mut r = rank;
    for slot in seq.iter_mut().rev() {
        *slot = subset[r % subset.len()];
        r /= subset.len();
    }
    seq
}

fn encode(seq: &[Action], subset: &[Action]) -> Option<usize> {
    seq.iter()
        .try_fold(0usize, |acc, a| subset.iter().position(|s| s == a).map(|p| acc * subset.len() + p))
}

/// Minimal-loss sequence of exactly `depth` actions from `subset`, ties going
/// to the lexicographically smallest sequence of action indices.
pub fn exhaustive_search(
    image: &Tensor<f32>,
    label: usize,
    classifier: &Classifier<f32>,
    depth: usize,
    subset: &[Action],
) -> Result<SearchResult> {
    let losses = enumerate_losses(image, label, classifier, depth, subset)?;
    let mut sorted = subset.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(SearchResult {
        best_sequence: if depth == 0 { Vec::new() } else { decode(best, &sorted, depth) },
        best_loss: losses[best],
        num_evaluated: losses.len(),
    })
}

/// Approximate search keeping the `width` lowest-loss prefixes at every
/// depth. Equals [`exhaustive_search`] when `width >= |subset|^(depth-1)`.
pub fn beam_search(
    image: &Tensor<f32>,
    label: usize,
    classifier: &Classifier<f32>,
    depth: usize,
    subset: &[Action],
    width: usize,
) -> Result<SearchResult> {
    if width == 0 {
        return Err(SstnError::Config("beam width must be at least 1".into()));
    }
    let mut subset = subset.to_vec();
    subset.sort();
    subset.dedup();
    if depth == 0 {
        return exhaustive_search(image, label, classifier, 0, &subset);
    }
    if subset.is_empty() {
        return Err(SstnError::Config("empty action subset".into()));
    }
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(SstnError::Config(format!("oracle expects one image [1, 1, H, W], got {s:?}")));
    }
    let grids = ActionGrids::new((s[2], s[3]));
    let mut beams: Vec<(Vec<Action>, Tensor<f32>, f64)> = vec![(Vec::new(), image.clone(), f64::NAN)];
    let mut evaluated = 0;
    for _ in 0..depth {
        let mut children = Vec::with_capacity(beams.len() * subset.len());
        for (seq, img, _) in &beams {
            let copies = img.gather_rows(&vec![0; subset.len()])?;
            let warped = grids.apply(&copies, &subset)?;
            let (loss, _) = classifier.assess(&warped, &vec![label; subset.len()])?;
            evaluated += subset.len();
            for (k, &a) in subset.iter().enumerate() {
                let mut next = seq.clone();
                next.push(a);
                children.push((next, warped.gather_rows(&[k])?, loss[k]));
            }
        }
        // children are generated in lexicographic order, so a stable sort keeps ties ordered
        children.sort_by(|a, b| a.2.total_cmp(&b.2));
        children.truncate(width);
        beams = children;
    }
    let (best_sequence, _, best_loss) = beams.swap_remove(0);
    Ok(SearchResult {
        best_sequence,
        best_loss,
        num_evaluated: evaluated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub mean: f64,
    pub std_error: f64,
    pub gaps: Vec<f64>,
}

impl GapReport {
    fn from_gaps(gaps: Vec<f64>) -> Self {
        let n = gaps.len().max(1) as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = if gaps.len() > 1 {
            gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        GapReport {
            mean,
            std_error: (var / n).sqrt(),
            gaps,
        }
    }
}

/// Mean over images of (loss after the agent's `depth` actions minus the
/// oracle's best loss over all ten actions). The agent's loss is read from
/// the oracle's own table, so every gap is non-negative.
pub fn policy_gap(
    agent: &mut dyn Agent,
    classifier: &Classifier<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    depth: usize,
) -> Result<GapReport> {
    let env = EnvConfig {
        episode_length: depth.max(1),
        reward: RewardKind::R3,
        ..Default::default()
    };
    let s = images.shape().to_vec();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(SstnError::Config(format!("{} labels for images {s:?}", labels.len())));
    }
    let grids = ActionGrids::new((s[2], s[3]));
    let mut tape = Tape::new();
    let sequences: Vec<Vec<Action>> = if depth == 0 {
        vec![Vec::new(); labels.len()]
    } else {
        let trace = rollout(&mut tape, agent, None, env, &grids, classifier, images.clone(), labels, false)?;
        (0..labels.len())
            .map(|b| trace.actions.iter().map(|step| step[b]).collect())
            .collect()
    };
    let mut gaps = Vec::with_capacity(labels.len());
    for (b, seq) in sequences.iter().enumerate() {
        let img = images.gather_rows(&[b])?;
        let losses = enumerate_losses(&img, labels[b], classifier, depth, &Action::ALL)?;
        let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let mine = losses[encode(seq, &Action::ALL).expect("agent actions come from the full set")];
        gaps.push(mine - best);
    }
    Ok(GapReport::from_gaps(gaps))
}
