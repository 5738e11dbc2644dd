//! Trains the recurrent critic on a three-step chain with reward 1 per step
//! and compares its values with the closed-form discounted returns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sstn::environment::{rollout, EnvConfig, PolicyAgent};
use sstn::geometry::{Action, ActionGrids};
use sstn::models::{Classifier, ClassifierConfig, PolicyConfig, PolicyNet, SampleMode};
use sstn::tensor::{Adam, AdamConfig, Module, Tape, Tensor};
use sstn::training::{ac_update, UpdateConfig};

fn main() -> sstn::Result<()> {
    let side = 48;
    let cfg = PolicyConfig {
        input_side: side,
        ..PolicyConfig::default()
    };
    let mut actor = PolicyNet::<f32>::zeros(cfg, 10)?;
    actor.visit_params_mut("", &mut |name, t| {
        if name == "head.bias" {
            t.data_mut()[Action::Identity.index()] = 50.0;
        }
    });
    let mut critic = PolicyNet::<f32>::critic(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    let clf = Classifier::<f32>::zeros(ClassifierConfig::mlp().with_side(side))?;
    let grids = ActionGrids::new((side, side));
    let env = EnvConfig {
        episode_length: 3,
        ..EnvConfig::default()
    };
    let gamma = env.gamma;
    let expected: Vec<f64> = (0..3).map(|t| (0..3 - t).map(|k| gamma.powi(k)).sum()).collect();
    let images = Tensor::<f32>::full(&[4, 1, side, side], 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut oa, mut oc) = (Adam::new(AdamConfig::with_lr(1e-4)), Adam::new(AdamConfig::with_lr(1e-3)));
    let ucfg = UpdateConfig::from_env(&env);
    for it in 0..=400 {
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
            )?
        };
        trace.rewards = vec![vec![1.0; 4]; 3];
        if it % 100 == 0 {
            let v: Vec<String> = trace
                .values
                .as_ref()
                .unwrap()
                .iter()
                .map(|&v| format!("{:.3}", tape.value(v)[0]))
                .collect();
            println!("iteration {it:>3}: values [{}]  target {expected:.3?}", v.join(", "));
        }
        ac_update(tape, &trace, &mut actor, &mut critic, &mut oa, &mut oc, &ucfg)?;
    }
    Ok(())
}
