//! Trains a classifier on centred digits, displaces a digit and lets the
//! exhaustive and beam oracles find the moves that bring it back.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sstn::dataset::SourceSet;
use sstn::geometry::Action;
use sstn::models::{Classifier, ClassifierConfig};
use sstn::oracle::{beam_search, exhaustive_search};
use sstn::tensor::{Adam, AdamConfig, Tensor};
use sstn::training::classifier_update;

const SIDE: usize = 48;

fn placed(src: &SourceSet, idx: &[usize], dx: isize) -> (Tensor<f32>, Vec<usize>) {
    let off = (SIDE - 28) / 2;
    let mut data = vec![0f32; idx.len() * SIDE * SIDE];
    for (b, &i) in idx.iter().enumerate() {
        for r in 0..28 {
            for c in 0..28 {
                let col = (off as isize + dx + c as isize) as usize;
                data[b * SIDE * SIDE + (off + r) * SIDE + col] = src.image(i)[r * 28 + c] as f32 / 255.0;
            }
        }
    }
    (
        Tensor::from_vec(&[idx.len(), 1, SIDE, SIDE], data).unwrap(),
        idx.iter().map(|&i| src.labels[i] as usize).collect(),
    )
}

fn main() -> sstn::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let src = SourceSet::load(
        data.join("mnist10k-images-idx3-ubyte.gz"),
        data.join("mnist10k-labels-idx1-ubyte.gz"),
    )?;
    let mut clf = Classifier::new(ClassifierConfig::mlp().with_side(SIDE), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
    let idx: Vec<usize> = (0..3000).collect();
    for _ in 0..4 {
        for chunk in idx.chunks(64) {
            let (x, y) = placed(&src, chunk, 0);
            classifier_update(&mut clf, &mut opt, &x, &y)?;
        }
    }
    for i in [9000, 9001, 9002] {
        let (x, y) = placed(&src, &[i], 8);
        let (base, _) = clf.assess(&x, &y)?;
        let exact = exhaustive_search(&x, y[0], &clf, 3, &Action::ALL)?;
        let beam = beam_search(&x, y[0], &clf, 3, &Action::ALL, 5)?;
        let names = |s: &[Action]| s.iter().map(|a| a.name()).collect::<Vec<_>>().join(" ");
        println!("digit {} shifted 8 px right: loss {:.3}", y[0], base[0]);
        println!(
            "  exhaustive ({} sequences): {} -> {:.3}",
            exact.num_evaluated,
            names(&exact.best_sequence),
            exact.best_loss
        );
        println!(
            "  beam width 5 ({} evaluations): {} -> {:.3}",
            beam.num_evaluated,
            names(&beam.best_sequence),
            beam.best_loss
        );
    }
    Ok(())
}
