//! REINFORCE on a two-armed bandit whose observation is a fixed image: the
//! policy network learns to prefer the paying arm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sstn::environment::{EnvConfig, EpisodeTrace, StepOutput};
use sstn::geometry::Action;
use sstn::models::{sample_action, PolicyConfig, PolicyNet, SampleMode};
use sstn::tensor::{Adam, AdamConfig, Tape, Tensor};
use sstn::training::{pg_update, UpdateConfig};

fn main() -> sstn::Result<()> {
    let cfg = PolicyConfig {
        input_side: 48,
        num_actions: 2,
        ..PolicyConfig::default()
    }
    .without_lstm();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = PolicyNet::<f32>::actor(cfg, &mut rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
    let batch = 16;
    let image = Tensor::<f32>::full(&[batch, 1, 48, 48], 0.5);
    let ucfg = UpdateConfig::from_env(&EnvConfig::default());

    for round in 0..125 {
        let mut tape = Tape::new();
        let x = tape.constant(&image);
        let prev = tape.constant(&Tensor::zeros(&[batch, 2]));
        let (logits, _) = net.forward(&mut tape, x, prev, None)?;
        let probs = tape.value(logits).to_vec();
        let (actions, log_prob) = sample_action(&mut tape, logits, &mut rng, SampleMode::Sample)?;
        let rewards: Vec<f64> = actions.iter().map(|a| if a.index() == 0 { 1.0 } else { 0.0 }).collect();
        if round % 25 == 0 {
            let p = sstn::tensor::softmax_rows(&probs[..2], 2);
            println!("episodes {:>4}: P(arm 0) = {:.3}", round * batch, p[0]);
        }
        let trace = EpisodeTrace {
            steps: vec![StepOutput { log_prob, logits }],
            values: None,
            actions: vec![actions],
            rewards: vec![rewards],
            losses: vec![vec![0.0; batch]],
            predictions: vec![vec![0; batch]],
            baseline_loss: vec![0.0; batch],
            baseline_pred: vec![0; batch],
            labels: vec![0; batch],
            final_images: image.clone(),
            frames: Vec::new(),
            composed: Vec::new(),
        };
        pg_update(tape, &trace, &mut net, &mut opt, &ucfg)?;
    }
    let mut tape = Tape::new();
    let x = tape.constant(&image.gather_rows(&[0])?);
    let prev = tape.constant(&Tensor::zeros(&[1, 2]));
    let (p, _) = net.probabilities(&mut tape, x, prev, None)?;
    println!("after 2000 episodes: P({}) = {:.3}", Action::from_index(0)?.name(), p[0]);
    Ok(())
}
