//! Compares tape gradients of the bilinear sampler and a small convolution
//! against central finite differences in double precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sstn::geometry::bilinear_sample_on_tape;
use sstn::tensor::gradcheck::{max_rel_error, numeric_grad};
use sstn::tensor::{Conv2d, Tape, Tensor};

fn sampler_loss(image: &[f64], grid: &[f64], weights: &[f64]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::from_vec(&[1, 1, 6, 6], image.to_vec()).unwrap());
    let g = tape.constant(&Tensor::from_vec(&[1, 6, 6, 2], grid.to_vec()).unwrap());
    let y = bilinear_sample_on_tape(&mut tape, x, g).unwrap();
    let s = tape.weighted_sum(y, weights).unwrap();
    tape.scalar(s)
}

fn main() -> sstn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image: Tensor<f64> = Tensor::uniform(&[1, 1, 6, 6], 1.0, &mut rng);
    // keep sample points away from pixel boundaries, where the sampler has kinks
    let grid: Vec<f64> = (0..72).map(|i| -0.9 + 1.8 * ((i * 37 % 72) as f64 + 0.5) / 72.0 + 0.013).collect();
    let weights: Vec<f64> = Tensor::<f64>::uniform(&[36], 1.0, &mut rng).data().to_vec();

    let mut tape = Tape::<f64>::new();
    let x = tape.input(&image);
    let g = tape.input(&Tensor::from_vec(&[1, 6, 6, 2], grid.clone())?);
    let y = bilinear_sample_on_tape(&mut tape, x, g)?;
    let s = tape.weighted_sum(y, &weights)?;
    let grads = tape.backward(s)?;
    let (dx, dg) = (grads.wrt(x).unwrap().to_vec(), grads.wrt(g).unwrap().to_vec());
    let nx = numeric_grad(image.data(), 1e-6, |v| sampler_loss(v, &grid, &weights));
    let ng = numeric_grad(&grid, 1e-6, |v| sampler_loss(image.data(), v, &weights));
    println!(
        "sampler: image grad rel err {:.2e}, grid grad rel err {:.2e}",
        max_rel_error(&dx, &nx),
        max_rel_error(&dg, &ng)
    );

    let conv = Conv2d::<f64>::new(1, 3, 3, &mut rng);
    let input: Tensor<f64> = Tensor::uniform(&[2, 1, 7, 7], 1.0, &mut rng);
    let conv_loss = |v: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_vec(&[2, 1, 7, 7], v.to_vec()).unwrap());
        let y = conv.forward(&mut tape, x).unwrap();
        let y = tape.tanh(y);
        let s = tape.sum(y);
        tape.scalar(s)
    };
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&input);
    let y = conv.forward(&mut tape, x)?;
    let y = tape.tanh(y);
    let s = tape.sum(y);
    let dx = tape.backward(s)?.wrt(x).unwrap().to_vec();
    println!(
        "conv: input grad rel err {:.2e}",
        max_rel_error(&dx, &numeric_grad(input.data(), 1e-6, conv_loss))
    );
    Ok(())
}
