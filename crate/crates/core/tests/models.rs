use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sstn::dataset::{make_cluttered, ClutterConfig, SourceSet, Split};
use sstn::models::*;
use sstn::tensor::{Adam, AdamConfig, Module, Tape};
use sstn::training::classifier_update;

fn fifty_canvases() -> sstn::dataset::DatasetBundle {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let src = SourceSet::load(dir.join("mnist10k-images-idx3-ubyte.gz"), dir.join("mnist10k-labels-idx1-ubyte.gz")).unwrap();
    make_cluttered(&src.slice(0, 2000), 50, &ClutterConfig::default(), 11, Split::Train).unwrap()
}

fn overfits(cfg: ClassifierConfig, lr: f64) -> usize {
    let data = fifty_canvases();
    let idx: Vec<usize> = (0..50).collect();
    let (x, y) = data.batch(&idx).unwrap();
    let mut clf = Classifier::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    for step in 1..=500 {
        classifier_update(&mut clf, &mut opt, &x, &y).unwrap();
        let (_, preds) = clf.assess(&x, &y).unwrap();
        if preds == y {
            return step;
        }
    }
    panic!("{cfg:?} did not fit 50 images in 500 steps");
}

#[test]
fn mlp_memorises_fifty_cluttered_images() {
    let steps = overfits(ClassifierConfig::mlp(), 1e-3);
    assert!(steps <= 500);
}

#[test]
fn lenet_memorises_fifty_cluttered_images() {
    let steps = overfits(ClassifierConfig::lenet(), 1e-3);
    assert!(steps <= 500);
}

#[test]
fn policy_loss_reaches_the_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut actor = PolicyNet::<f32>::actor(PolicyConfig::default(), &mut rng).unwrap();
    let data = fifty_canvases();
    let (x, _) = data.batch(&[0, 1, 2, 3]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let prev = tape.constant(&one_hot_batch::<f32>(&[None; 4]));
    let st = actor.initial_state(&mut tape, 4);
    let (logits, _) = actor.forward(&mut tape, xv, prev, st).unwrap();
    let (_, logp) = sample_action(&mut tape, logits, &mut rng, SampleMode::Sample).unwrap();
    let loss = tape.weighted_sum(logp, &[-1.0, 0.5, 2.0, -0.25]).unwrap();
    let grads = tape.backward(loss).unwrap();
    actor.collect_grads(&grads).unwrap();
    for layer in [&actor.conv1, &actor.conv2] {
        let mut norm = 0.0;
        layer.visit_params("", &mut |_, t| {
            norm += t.grad().unwrap().iter().map(|g| (g * g) as f64).sum::<f64>()
        });
        assert!(norm > 0.0);
    }
}
