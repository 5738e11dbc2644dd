//! Applies every discrete action to one digit and writes the results as PGM
//! files, reporting how far the ink centroid moved.
//!
//! cargo run --release --example warp_digit -- [out_dir]

use std::path::{Path, PathBuf};

use sstn::cli::encode_pgm;
use sstn::dataset::SourceSet;
use sstn::geometry::{Action, ActionGrids};
use sstn::tensor::Tensor;

fn centroid(pixels: &[f32], side: usize) -> (f64, f64) {
    let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
    for (i, &v) in pixels.iter().enumerate() {
        let v = v as f64;
        m += v;
        r += v * (i / side) as f64;
        c += v * (i % side) as f64;
    }
    (r / m, c / m)
}

fn main() -> sstn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("sstn-warp"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| sstn::SstnError::io(&out, e))?;
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let src = SourceSet::load(
        data.join("mnist10k-images-idx3-ubyte.gz"),
        data.join("mnist10k-labels-idx1-ubyte.gz"),
    )?;

    let side = 80;
    let mut canvas = vec![0f32; side * side];
    for r in 0..28 {
        for c in 0..28 {
            canvas[(26 + r) * side + 26 + c] = src.image(0)[r * 28 + c] as f32 / 255.0;
        }
    }
    let image = Tensor::from_vec(&[1, 1, side, side], canvas)?;
    let grids = ActionGrids::new((side, side));
    let (r0, c0) = centroid(image.data(), side);
    println!("digit {} centroid at ({r0:.2}, {c0:.2})", src.labels[0]);
    for a in Action::ALL {
        let warped = grids.apply(&image, &[a])?;
        let (r, c) = centroid(warped.data(), side);
        let path = out.join(format!("{:02}_{}.pgm", a.index(), a.name()));
        std::fs::write(&path, encode_pgm(warped.data(), side, side)).map_err(|e| sstn::SstnError::io(&path, e))?;
        println!("{:>14}: centroid moved ({:+.2}, {:+.2}) px", a.name(), r - r0, c - c0);
    }
    println!("frames in {}", out.display());
    Ok(())
}
