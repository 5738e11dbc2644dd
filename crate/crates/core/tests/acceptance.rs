//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 train the full desk-scale model (10K/2K cluttered MNIST,
//! about half an hour on one core), so run this target in release-like
//! settings: `cargo test --test acceptance`. Setting `SSTN_ACCEPTANCE_QUICK=1`
//! skips them (printed as SKIP) for fast iteration.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sstn::dataset::{make_cluttered, ClutterConfig, DatasetBundle, SourceSet, Split};
use sstn::environment::*;
use sstn::geometry::*;
use sstn::models::{one_hot_batch, sample_action, Classifier, ClassifierConfig, PolicyConfig, PolicyNet, SampleMode};
use sstn::oracle::policy_gap;
use sstn::tensor::gradcheck::{max_rel_error, numeric_grad};
use sstn::tensor::{Activation, Adam, AdamConfig, LstmCell, Module, Tape, Tensor, Var};
use sstn::training::*;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn source() -> SourceSet {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    SourceSet::load(dir.join("mnist10k-images-idx3-ubyte.gz"), dir.join("mnist10k-labels-idx1-ubyte.gz")).expect("MNIST files in data/")
}

fn params(m: &impl Module<f32>) -> Vec<Vec<f32>> {
    m.named_params().into_iter().map(|(_, t)| t.data().to_vec()).collect()
}

// ---- 1 -------------------------------------------------------------------

fn naive_sample(plane: &[f64], h: usize, w: usize, grid: &SampleGrid<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..grid.height {
        for j in 0..grid.width {
            let (xs, ys) = grid.at(i, j);
            let x = (xs + 1.0) * (w - 1) as f64 / 2.0;
            let y = (ys + 1.0) * (h - 1) as f64 / 2.0;
            let mut v = 0.0;
            for n in 0..h {
                for m in 0..w {
                    v += plane[n * w + m] * (1.0 - (x - m as f64).abs()).max(0.0) * (1.0 - (y - n as f64).abs()).max(0.0);
                }
            }
            out.push(v);
        }
    }
    out
}

fn sampler_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(4..20), rng.random_range(4..20));
        let plane: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let m = compose(
            &AffineMap::rotation(rng.random_range(-0.8..0.8)),
            &AffineMap::scale(rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)),
        );
        let theta = AffineMap {
            a12: m.a12 + rng.random_range(-0.3..0.3),
            tx: rng.random_range(-0.6..0.6),
            ty: rng.random_range(-0.6..0.6),
            ..m
        };
        let grid = grid_generate::<f64>(&theta, (h, w));
        let fast = sample_plane(&plane, h, w, &grid);
        for (a, b) in fast.iter().zip(naive_sample(&plane, h, w, &grid)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1e-6, "max abs diff {worst:e} > 1e-6");
    Ok(format!("100 pairs, max abs diff {worst:.1e}"))
}

// ---- 2 -------------------------------------------------------------------

/// Max relative error of d(sum(w * op))/d(input) over all inputs.
fn op_error(shapes: &[Vec<usize>], values: &[Vec<f64>], rng: &mut ChaCha8Rng, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let out_w: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |vals: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| tape.input(&Tensor::from_vec(s, v.clone()).unwrap()))
            .collect();
        let out = op(&mut tape, &vars);
        let n = tape.value(out).len();
        let loss = tape.weighted_sum(out, &out_w[..n]).unwrap();
        let l = tape.scalar(loss);
        let g = tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(v, val)| g.wrt(*v).map_or(vec![0.0; val.len()], <[f64]>::to_vec))
            .collect();
        (l, grads)
    };
    let (_, analytic) = eval(values);
    (0..values.len())
        .map(|k| {
            let numeric = numeric_grad(&values[k], 1e-5, |x| {
                let mut vals = values.to_vec();
                vals[k] = x.to_vec();
                eval(&vals).0
            });
            max_rel_error(&analytic[k], &numeric)
        })
        .fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Magnitudes in [0.05, 1) so no step crosses a relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// Grid coordinates whose pixel position is at least 1e-3 from an integer.
fn off_kink_coords(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    while v.len() < n {
        let x: f64 = rng.random_range(-1.1..1.1);
        let size = if v.len() % 2 == 0 { w } else { h };
        let p = (x + 1.0) * (size - 1) as f64 / 2.0;
        if (p - p.round()).abs() > 1e-3 {
            v.push(x);
        }
    }
    v
}

fn lstm_error(rng: &mut ChaCha8Rng) -> f64 {
    let cell = LstmCell::<f64>::new(3, 4, rng);
    let flat: Vec<f64> = cell.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let (x, h, c) = (uniform(rng, 6), uniform(rng, 8), uniform(rng, 8));
    let (wh, wc) = (uniform(rng, 8), uniform(rng, 8));
    let run = |p: &[f64]| -> (f64, Vec<f64>) {
        let mut cell = LstmCell::<f64>::zeros(3, 4);
        let mut off = 0;
        cell.visit_params_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&p[off..off + n]);
            off += n;
        });
        let mut tape = Tape::new();
        let xv = tape.constant(&Tensor::from_vec(&[2, 3], x.clone()).unwrap());
        let hv = tape.constant(&Tensor::from_vec(&[2, 4], h.clone()).unwrap());
        let cv = tape.constant(&Tensor::from_vec(&[2, 4], c.clone()).unwrap());
        let (h2, c2) = cell.step(&mut tape, xv, hv, cv).unwrap();
        let a = tape.weighted_sum(h2, &wh).unwrap();
        let b = tape.weighted_sum(c2, &wc).unwrap();
        let loss = tape.add(a, b).unwrap();
        let l = tape.scalar(loss);
        let g = tape.backward(loss).unwrap();
        cell.collect_grads(&g).unwrap();
        let mut gp = Vec::new();
        cell.visit_params("", &mut |_, t| gp.extend_from_slice(t.grad().unwrap()));
        (l, gp)
    };
    let params_err = max_rel_error(&run(&flat).1, &numeric_grad(&flat, 1e-5, |p| run(p).0));
    let inputs_err = op_error(
        &[vec![2, 3], vec![2, 4], vec![2, 4]],
        &[x.clone(), h.clone(), c.clone()],
        rng,
        |t, v| {
            let (h2, c2) = cell.step(t, v[0], v[1], v[2]).unwrap();
            let both = t.concat_cols(h2, c2).unwrap();
            t.tanh(both)
        },
    );
    params_err.max(inputs_err)
}

fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let r = &mut rng;
    let mut errors: Vec<(&str, f64)> = Vec::new();
    let (a, b) = (uniform(r, 12), uniform(r, 8));
    errors.push((
        "matmul",
        op_error(&[vec![3, 4], vec![4, 2]], &[a, b], r, |t, v| t.matmul(v[0], v[1]).unwrap()),
    ));
    let (x, k, bias) = (uniform(r, 2 * 2 * 7 * 7), uniform(r, 3 * 2 * 3 * 3), uniform(r, 3));
    errors.push((
        "conv",
        op_error(&[vec![2, 2, 7, 7], vec![3, 2, 3, 3], vec![3]], &[x, k, bias], r, |t, v| {
            t.conv2d(v[0], v[1], v[2]).unwrap()
        }),
    ));
    let mut distinct: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
    for i in (1..distinct.len()).rev() {
        distinct.swap(i, r.random_range(0..=i));
    }
    errors.push((
        "maxpool",
        op_error(&[vec![2, 1, 4, 4]], &[distinct], r, |t, v| t.maxpool2(v[0]).unwrap()),
    ));
    let x = uniform(r, 2 * 8 * 8);
    errors.push((
        "avgpool",
        op_error(&[vec![2, 1, 8, 8]], &[x], r, |t, v| t.avgpool(v[0], 4).unwrap()),
    ));
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
        ("softmax", Activation::Softmax),
    ] {
        let x = away_from_zero(r, 15);
        errors.push((name, op_error(&[vec![3, 5]], &[x], r, |t, v| t.activation(v[0], kind))));
    }
    let x: Vec<f64> = (0..40).map(|_| r.random_range(-3.0..3.0)).collect();
    errors.push((
        "cross-entropy",
        op_error(&[vec![4, 10]], &[x], r, |t, v| t.cross_entropy(v[0], &[1, 9, 0, 4]).unwrap()),
    ));
    errors.push(("lstm step", lstm_error(r)));
    let (bs, c, h, w) = (2, 2, 6, 7);
    let img: Vec<f64> = (0..bs * c * h * w).map(|_| r.random()).collect();
    let coords = off_kink_coords(r, bs * h * w * 2, h, w);
    errors.push((
        "bilinear sampler",
        op_error(&[vec![bs, c, h, w], vec![bs, h, w, 2]], &[img, coords], r, |t, v| {
            bilinear_sample_on_tape(t, v[0], v[1]).unwrap()
        }),
    ));
    let (worst_name, worst) = errors.iter().copied().fold(("", 0.0), |acc, e| if e.1 > acc.1 { e } else { acc });
    ensure!(errors.iter().all(|(_, e)| *e < 1e-4), "{errors:?}");
    Ok(format!("{} ops, worst {worst_name} rel err {worst:.1e}", errors.len()))
}

// ---- 3 -------------------------------------------------------------------

fn return_arithmetic() -> Check {
    let g = discounted_returns(&[vec![0.0], vec![0.0], vec![1.0]], 0.98, ReturnConvention::Standard);
    for (got, want) in g.iter().map(|r| r[0]).zip([0.9604, 0.98, 1.0]) {
        ensure!((got - want).abs() < 1e-12, "returns {g:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0f64;
    for _ in 0..200 {
        let t_len = rng.random_range(1..50);
        let gamma = rng.random_range(0.5..=1.0);
        let rewards: Vec<Vec<f64>> = (0..t_len).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let fast = discounted_returns(&rewards, gamma, ReturnConvention::Standard);
        for (t, row) in fast.iter().enumerate() {
            for (b, got) in row.iter().enumerate() {
                let slow: f64 = (t..t_len).map(|k| gamma.powi((k - t) as i32) * rewards[k][b]).sum();
                worst = worst.max((got - slow).abs());
            }
        }
    }
    ensure!(worst <= 1e-7, "max diff {worst:e}");
    Ok(format!("[0.9604, 0.98, 1.0] exact; 200 random sequences max diff {worst:.1e}"))
}

// ---- 4 -------------------------------------------------------------------

fn reward_semantics() -> Check {
    // (prev correct, now correct) -> reward
    for (prev_ok, now_ok, want) in [(false, false, 0.0), (false, true, 1.0), (true, false, -1.0), (true, true, 0.0)] {
        let label = 3;
        let pred = |ok: bool| if ok { label } else { 7 };
        let r = reward_r1(&[pred(prev_ok)], &[pred(now_ok)], &[label]);
        ensure!(r == vec![want], "r1({prev_ok}, {now_ok}) = {r:?}, want {want}");
    }
    ensure!(
        reward_r1(&[1], &[2], &[3]) == vec![0.0],
        "wrong to a different wrong class must be 0"
    );

    let mut worst = 0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clf = Classifier::<f32>::new(ClassifierConfig::mlp().with_side(16), &mut rng).unwrap();
        let img: Tensor<f32> = Tensor::uniform(&[4, 1, 16, 16], 1.0, &mut rng);
        let img = Tensor::from_vec(img.shape(), img.data().iter().map(|v| v.abs()).collect()).unwrap();
        let labels: Vec<usize> = (0..4).map(|i| (i * 3 + seed as usize) % 10).collect();
        let grids = ActionGrids::new((16, 16));
        let env = EnvConfig {
            episode_length: 1 + seed as usize % 12,
            reward: RewardKind::R3,
            ..EnvConfig::default()
        };
        let mut tape = Tape::new();
        let mut agent = RandomAgent::new(ChaCha8Rng::seed_from_u64(seed + 1000));
        let trace = rollout(&mut tape, &mut agent, None, env, &grids, &clf, img, &labels, false).unwrap();
        for b in 0..4 {
            let total: f64 = trace.rewards.iter().map(|r| r[b]).sum();
            worst = worst.max((total - (trace.baseline_loss[b] - trace.final_losses()[b])).abs());
        }
    }
    ensure!(worst <= 1e-5, "r3 telescoping error {worst:e}");
    Ok(format!(
        "r1 truth table exact; r3 telescoping max error {worst:.1e} over 80 rollouts"
    ))
}

// ---- 5 -------------------------------------------------------------------

const R0: [f64; 2] = [0.0, 0.5];
const R1: [[f64; 2]; 2] = [[1.0, 0.0], [0.2, 0.8]];

fn softmax2(l: &[f64]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

/// Gradient of the expected return of the three-state MDP, by enumeration.
fn exact_gradient(theta: &[f64]) -> Vec<f64> {
    let pi: Vec<[f64; 2]> = (0..3).map(|s| softmax2(&theta[2 * s..2 * s + 2])).collect();
    let mut grad = vec![0.0; 6];
    for a0 in 0..2 {
        for a1 in 0..2 {
            let s1 = 1 + a0;
            let p = pi[0][a0] * pi[s1][a1];
            let ret = R0[a0] + R1[a0][a1];
            for (s, a) in [(0, a0), (s1, a1)] {
                for k in 0..2 {
                    grad[2 * s + k] += p * ret * ((k == a) as i32 as f64 - pi[s][k]);
                }
            }
        }
    }
    grad
}

fn mdp_estimate_error() -> f64 {
    let theta_v = [0.3, -0.2, 0.5, -0.4, -0.1, 0.6];
    let theta = Tensor::<f64>::from_vec(&[3, 2], theta_v.to_vec()).unwrap().with_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (batch, rounds) = (1000, 100);
    let mut sum = [0.0; 6];
    for _ in 0..rounds {
        let mut tape = Tape::<f64>::new();
        let th = tape.param(&theta);
        let s0 = tape.constant(&Tensor::from_vec(&[batch, 3], [1.0, 0.0, 0.0].repeat(batch)).unwrap());
        let l0 = tape.matmul(s0, th).unwrap();
        let (a0, lp0) = sample_action(&mut tape, l0, &mut rng, SampleMode::Sample).unwrap();
        let mut onehot = vec![0.0; batch * 3];
        for (b, a) in a0.iter().enumerate() {
            onehot[b * 3 + 1 + a.index()] = 1.0;
        }
        let s1 = tape.constant(&Tensor::from_vec(&[batch, 3], onehot).unwrap());
        let l1 = tape.matmul(s1, th).unwrap();
        let (a1, lp1) = sample_action(&mut tape, l1, &mut rng, SampleMode::Sample).unwrap();
        let rewards = vec![
            a0.iter().map(|a| R0[a.index()]).collect::<Vec<_>>(),
            a0.iter().zip(&a1).map(|(x, y)| R1[x.index()][y.index()]).collect(),
        ];
        let g = discounted_returns(&rewards, 1.0, ReturnConvention::Standard);
        let t0 = tape.weighted_sum(lp0, &g[0]).unwrap();
        let t1 = tape.weighted_sum(lp1, &g[1]).unwrap();
        let total = tape.add(t0, t1).unwrap();
        let grads = tape.backward(total).unwrap();
        for (s, v) in sum.iter_mut().zip(grads.of(&theta).unwrap()) {
            *s += v;
        }
    }
    let n = (batch * rounds) as f64;
    let exact = exact_gradient(&theta_v);
    let diff: f64 = sum.iter().zip(&exact).map(|(s, e)| (s / n - e).powi(2)).sum::<f64>().sqrt();
    diff / exact.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn bandit_probability() -> f32 {
    let cfg = PolicyConfig {
        input_side: 48,
        num_actions: 2,
        ..PolicyConfig::default()
    }
    .without_lstm();
    let mut net = PolicyNet::<f32>::actor(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = 16;
    let images = Tensor::<f32>::full(&[batch, 1, 48, 48], 0.5);
    let ucfg = UpdateConfig::from_env(&EnvConfig::default());
    for _ in 0..2000 / batch {
        let mut tape = Tape::new();
        let x = tape.constant(&images);
        let prev = tape.constant(&Tensor::zeros(&[batch, 2]));
        let (logits, _) = net.forward(&mut tape, x, prev, None).unwrap();
        let (actions, log_prob) = sample_action(&mut tape, logits, &mut rng, SampleMode::Sample).unwrap();
        let rewards = vec![actions.iter().map(|a| if a.index() == 0 { 1.0 } else { 0.0 }).collect()];
        let trace = trace_of(vec![StepOutput { log_prob, logits }], None, rewards);
        pg_update(tape, &trace, &mut net, &mut opt, &ucfg).unwrap();
    }
    let mut tape = Tape::new();
    let x = tape.constant(&images.gather_rows(&[0]).unwrap());
    let prev = tape.constant(&Tensor::zeros(&[1, 2]));
    net.probabilities(&mut tape, x, prev, None).unwrap().0[0]
}

fn trace_of(steps: Vec<StepOutput>, values: Option<Vec<Var>>, rewards: Vec<Vec<f64>>) -> EpisodeTrace {
    let b = rewards[0].len();
    EpisodeTrace {
        actions: vec![vec![Action::Identity; b]; rewards.len()],
        losses: vec![vec![0.0; b]; rewards.len()],
        predictions: vec![vec![0; b]; rewards.len()],
        steps,
        values,
        rewards,
        baseline_loss: vec![0.0; b],
        baseline_pred: vec![0; b],
        labels: vec![0; b],
        final_images: Tensor::zeros(&[b, 1, 1, 1]),
        frames: Vec::new(),
        composed: Vec::new(),
    }
}

fn pg_correctness() -> Check {
    let err = mdp_estimate_error();
    ensure!(err < 0.05, "estimator relative error {err:.4} >= 0.05");
    let p = bandit_probability();
    ensure!(p > 0.95, "P(best arm) after 2000 episodes = {p:.4}");
    Ok(format!(
        "MDP gradient rel err {err:.4} over 1e5 episodes; bandit P(best) {p:.4} after 2000 episodes"
    ))
}

// ---- 6 -------------------------------------------------------------------

fn ac_correctness() -> Check {
    let side = 48;
    let cfg = PolicyConfig {
        input_side: side,
        ..PolicyConfig::default()
    };
    let mut actor = PolicyNet::<f32>::zeros(cfg, 10).unwrap();
    actor.visit_params_mut("", &mut |name, t| {
        if name == "head.bias" {
            t.data_mut()[Action::Identity.index()] = 50.0;
        }
    });
    let mut critic = PolicyNet::<f32>::critic(cfg, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let clf = Classifier::<f32>::zeros(ClassifierConfig::mlp().with_side(side)).unwrap();
    let grids = ActionGrids::new((side, side));
    let env = EnvConfig {
        episode_length: 3,
        ..EnvConfig::default()
    };
    let images = Tensor::<f32>::full(&[4, 1, side, side], 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (mut oa, mut oc) = (Adam::new(AdamConfig::with_lr(1e-4)), Adam::new(AdamConfig::with_lr(1e-3)));
    let ucfg = UpdateConfig::from_env(&env);
    let mut values = Vec::new();
    for _ in 0..400 {
        let mut tape = Tape::new();
        let mut trace = {
            let mut agent = PolicyAgent::new(&actor, &mut rng, SampleMode::Sample);
            rollout(
                &mut tape,
                &mut agent,
                Some(&critic),
                env,
                &grids,
                &clf,
                images.clone(),
                &[0; 4],
                false,
            )
            .unwrap()
        };
        trace.rewards = vec![vec![1.0; 4]; 3];
        values = trace.values.as_ref().unwrap().iter().map(|&v| tape.value(v)[0] as f64).collect();
        ac_update(tape, &trace, &mut actor, &mut critic, &mut oa, &mut oc, &ucfg).unwrap();
    }
    let g = env.gamma;
    let expected = [1.0 + g + g * g, 1.0 + g, 1.0];
    let worst = values.iter().zip(expected).map(|(v, e)| (v - e).abs()).fold(0.0, f64::max);
    ensure!(worst < 0.05, "critic {values:?} vs {expected:?}");

    // zero advantage: constant critic equal to the reward
    let actor = PolicyNet::<f32>::actor(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut critic = PolicyNet::<f32>::zeros(cfg, 1).unwrap();
    critic.visit_params_mut("", &mut |name, t| {
        if name == "head.bias" {
            t.data_mut()[0] = 0.75;
        }
    });
    let (mut a, mut c) = (actor.clone(), critic.clone());
    let images = Tensor::<f32>::full(&[3, 1, side, side], 0.4);
    let mut tape = Tape::new();
    let x = tape.constant(&images);
    let prev = tape.constant(&one_hot_batch::<f32>(&[None; 3]));
    let st = a.initial_state(&mut tape, 3);
    let (logits, _) = a.forward(&mut tape, x, prev, st).unwrap();
    let (_, log_prob) = sample_action(&mut tape, logits, &mut rng, SampleMode::Sample).unwrap();
    let st = c.initial_state(&mut tape, 3);
    let (v, _) = c.forward(&mut tape, x, prev, st).unwrap();
    let trace = trace_of(vec![StepOutput { log_prob, logits }], Some(vec![v]), vec![vec![0.75; 3]]);
    let (mut oa, mut oc) = (Adam::new(AdamConfig::with_lr(1e-3)), Adam::new(AdamConfig::with_lr(1e-3)));
    ac_update(tape, &trace, &mut a, &mut c, &mut oa, &mut oc, &ucfg).unwrap();
    ensure!(params(&a) == params(&actor), "actor moved under zero advantage");
    Ok(format!(
        "critic {values:.4?} vs {expected:.4?} (max err {worst:.4}); zero advantage leaves actor bitwise unchanged"
    ))
}

// ---- 7 -------------------------------------------------------------------

fn reduction(src: &SourceSet) -> Check {
    let train_set = make_cluttered(&src.slice(0, 8000), 96, &ClutterConfig::default(), 1, Split::Train).unwrap();
    let test_set = make_cluttered(&src.slice(8000, 10_000), 40, &ClutterConfig::default(), 2, Split::Test).unwrap();
    let cfg = TrainConfig {
        env: EnvConfig {
            episode_length: 4,
            ..EnvConfig::default()
        },
        batch_size: 32,
        epochs: 2,
        seed: 42,
        eval_batch: 50,
        frozen_action: Some(Action::Identity),
        ..TrainConfig::default()
    };
    let a = train(&cfg, &train_set, &test_set, None).map_err(|e| e.to_string())?;
    let b = train_supervised(&cfg, &train_set, &test_set, None).map_err(|e| e.to_string())?;
    ensure!(
        params(&a.models.classifier) == params(&b.models.classifier),
        "classifier parameters differ"
    );
    let rows = |m: &[MetricsRow]| m.iter().map(MetricsRow::deterministic_part).collect::<Vec<_>>();
    ensure!(rows(&a.metrics) == rows(&b.metrics), "metrics differ");
    Ok(format!(
        "{} classifier tensors and {} metrics rows bit-identical",
        params(&a.models.classifier).len(),
        a.metrics.len()
    ))
}

// ---- 8, 9 ----------------------------------------------------------------

struct DeskRun {
    cfg: TrainConfig,
    outcome: TrainOutcome,
    test_set: DatasetBundle,
    baseline: f64,
}

fn desk_sets(src: &SourceSet, n_train: usize) -> (DatasetBundle, DatasetBundle) {
    let clutter = ClutterConfig::default();
    (
        make_cluttered(&src.slice(0, 8000), n_train, &clutter, 1, Split::Train).unwrap(),
        make_cluttered(&src.slice(8000, 10_000), 2000, &clutter, 2, Split::Test).unwrap(),
    )
}

fn last_test(m: &[MetricsRow]) -> f64 {
    m.iter().rev().find(|r| r.split == "test").map_or(0.0, |r| r.accuracy)
}

fn desk_run(src: &SourceSet) -> Result<DeskRun, String> {
    let (train_set, test_set) = desk_sets(src, 10_000);
    let cfg = TrainConfig {
        epochs: 20,
        env: EnvConfig {
            episode_length: 10,
            ..EnvConfig::default()
        },
        ..TrainConfig::default()
    };
    let clock = Instant::now();
    let base = train_supervised(&cfg, &train_set, &test_set, None).map_err(|e| e.to_string())?;
    let outcome = train(&cfg, &train_set, &test_set, None).map_err(|e| e.to_string())?;
    eprintln!("desk run finished in {:.0}s", clock.elapsed().as_secs_f64());
    Ok(DeskRun {
        baseline: last_test(&base.metrics),
        cfg,
        outcome,
        test_set,
    })
}

fn desk_improvement(run: &DeskRun) -> Check {
    let sstn = last_test(&run.outcome.metrics);
    let gain = 100.0 * (sstn - run.baseline);
    ensure!(
        gain >= 10.0,
        "SSTN {:.2}% vs baseline {:.2}%: +{gain:.2} points < 10",
        100.0 * sstn,
        100.0 * run.baseline
    );
    Ok(format!(
        "SSTN {:.2}% vs plain MLP {:.2}%: +{gain:.2} points",
        100.0 * sstn,
        100.0 * run.baseline
    ))
}

fn oracle_gap(run: &DeskRun) -> Check {
    let idx: Vec<usize> = (0..100).collect();
    let (images, labels) = run.test_set.batch(&idx).unwrap();
    let clf = &run.outcome.models.classifier;
    let actor = run.outcome.models.actor.as_ref().ok_or("no actor")?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let mut greedy = PolicyAgent::new(actor, &mut rng, SampleMode::Greedy);
    let trained = policy_gap(&mut greedy, clf, &images, &labels, 2).map_err(|e| e.to_string())?;
    let mut random = RandomAgent::new(ChaCha8Rng::seed_from_u64(909));
    let uniform = policy_gap(&mut random, clf, &images, &labels, 2).map_err(|e| e.to_string())?;
    let msg = format!(
        "depth-2 gap: trained greedy {:.4} (se {:.4}) vs uniform random {:.4} (se {:.4})",
        trained.mean, trained.std_error, uniform.mean, uniform.std_error
    );
    ensure!(trained.mean < uniform.mean, "{msg}");
    Ok(msg)
}

/// Short reduced-budget ablation over the reward kinds; reported, not gated.
fn reward_ablation(src: &SourceSet) -> String {
    let (train_set, test_set) = desk_sets(src, 2000);
    let mut parts = Vec::new();
    for reward in [RewardKind::R1, RewardKind::R2, RewardKind::R3] {
        let cfg = TrainConfig {
            epochs: 5,
            env: EnvConfig {
                episode_length: 10,
                reward,
                ..EnvConfig::default()
            },
            ..TrainConfig::default()
        };
        match train(&cfg, &train_set, &test_set, None) {
            Ok(o) => parts.push(format!("{} {:.2}%", reward.as_str(), 100.0 * last_test(&o.metrics))),
            Err(e) => parts.push(format!("{} error: {e}", reward.as_str())),
        }
    }
    parts.join(", ")
}

fn report(id: usize, name: &str, check: impl FnOnce() -> Check) -> bool {
    let clock = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = clock.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS {id} {name}: {detail} [{secs:.1}s]"),
        Err(detail) => println!("FAIL {id} {name}: {detail} [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() {
    let src = source();
    let mut ok = true;
    ok &= report(1, "sampler oracle equivalence", sampler_equivalence);
    ok &= report(2, "gradient suite", gradient_suite);
    ok &= report(3, "return arithmetic", return_arithmetic);
    ok &= report(4, "reward semantics", reward_semantics);
    ok &= report(5, "policy-gradient estimator", pg_correctness);
    ok &= report(6, "actor-critic", ac_correctness);
    ok &= report(7, "identity reduction", || reduction(&src));
    if std::env::var_os("SSTN_ACCEPTANCE_QUICK").is_some() {
        println!("SKIP 8 desk-scale end-to-end: SSTN_ACCEPTANCE_QUICK set");
        println!("SKIP 9 oracle gap: SSTN_ACCEPTANCE_QUICK set");
        std::process::exit(if ok { 0 } else { 1 });
    }
    let run = catch_unwind(AssertUnwindSafe(|| desk_run(&src))).unwrap_or_else(|_| Err("desk run panicked".into()));
    match &run {
        Ok(run) => {
            ok &= report(8, "desk-scale end-to-end", || desk_improvement(run));
            ok &= report(9, "oracle gap", || oracle_gap(run));
        }
        Err(e) => {
            println!("FAIL 8 desk-scale end-to-end: {e}");
            println!("FAIL 9 oracle gap: no trained model");
            ok = false;
        }
    }
    println!("INFO reward ablation (2K train, 5 epochs, T=10): {}", reward_ablation(&src));
    if !ok {
        std::process::exit(1);
    }
}
