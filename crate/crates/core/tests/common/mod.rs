#![allow(dead_code)]

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sstn::dataset::SourceSet;
use sstn::models::{Classifier, ClassifierConfig};
use sstn::tensor::{Adam, AdamConfig, Tensor};
use sstn::training::classifier_update;

pub const SIDE: usize = 48;

pub fn mnist() -> SourceSet {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    SourceSet::load(dir.join("mnist10k-images-idx3-ubyte.gz"), dir.join("mnist10k-labels-idx1-ubyte.gz")).unwrap()
}

/// Digits pasted on a clean `side x side` canvas, centred and then shifted
/// right by `dx` pixels.
pub fn placed(source: &SourceSet, indices: &[usize], side: usize, dx: isize) -> (Tensor<f32>, Vec<usize>) {
    let s = source.side;
    let top = (side - s) / 2;
    let left = ((side - s) / 2) as isize + dx;
    assert!(left >= 0 && left as usize + s <= side, "digit would be clipped");
    let mut data = vec![0f32; indices.len() * side * side];
    for (b, &i) in indices.iter().enumerate() {
        let img = source.image(i);
        for r in 0..s {
            for c in 0..s {
                data[b * side * side + (top + r) * side + left as usize + c] = img[r * s + c] as f32 / 255.0;
            }
        }
    }
    let labels = indices.iter().map(|&i| source.labels[i] as usize).collect();
    (Tensor::from_vec(&[indices.len(), 1, side, side], data).unwrap(), labels)
}

/// MLP trained only on centred digits, so any displacement hurts it.
pub fn centered_classifier(source: &SourceSet) -> Classifier<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut clf = Classifier::new(ClassifierConfig::mlp().with_side(SIDE), &mut rng).unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
    let idx: Vec<usize> = (0..3000).collect();
    for _ in 0..4 {
        for chunk in idx.chunks(64) {
            let (x, y) = placed(source, chunk, SIDE, 0);
            classifier_update(&mut clf, &mut opt, &x, &y).unwrap();
        }
    }
    clf
}
