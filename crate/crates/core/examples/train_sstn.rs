//! Desk-scale joint training on cluttered MNIST against the plain classifier.
//!
//! cargo run --release --example train_sstn -- [epochs] [train] [test] [episode_length]

use std::path::Path;
use std::time::Instant;

use sstn::dataset::{make_cluttered, ClutterConfig, SourceSet, Split};
use sstn::environment::EnvConfig;
use sstn::training::{train, train_supervised, TrainConfig};

fn main() -> sstn::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (epochs, n_train, n_test, t) = (arg(0, 20), arg(1, 10_000), arg(2, 2_000), arg(3, 10));

    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let src = SourceSet::load(
        data.join("mnist10k-images-idx3-ubyte.gz"),
        data.join("mnist10k-labels-idx1-ubyte.gz"),
    )?;
    let clutter = ClutterConfig::default();
    let train_set = make_cluttered(&src.slice(0, 8000), n_train, &clutter, 1, Split::Train)?;
    let test_set = make_cluttered(&src.slice(8000, 10_000), n_test, &clutter, 2, Split::Test)?;

    let cfg = TrainConfig {
        epochs,
        env: EnvConfig {
            episode_length: t,
            ..Default::default()
        },
        ..Default::default()
    };
    let clock = Instant::now();
    let base = train_supervised(
        &cfg,
        &train_set,
        &test_set,
        Some(&mut |e, _, rows| {
            println!("baseline epoch {e}: train {:.4} test {:.4}", rows[0].accuracy, rows[1].accuracy);
            Ok(())
        }),
    )?;
    println!("baseline done in {:.1}s", clock.elapsed().as_secs_f64());
    let clock = Instant::now();
    let run = train(
        &cfg,
        &train_set,
        &test_set,
        Some(&mut |e, _, rows| {
            let (tr, te) = (&rows[0], &rows[1]);
            println!(
                "sstn epoch {e}: train {:.4} test {:.4} reward {:.4} policy {:.4} value {:.4} clf {:.4} ({:.1}s)",
                tr.accuracy, te.accuracy, tr.mean_reward, tr.policy_loss, tr.value_loss, tr.classifier_loss, te.wall_seconds
            );
            Ok(())
        }),
    )?;
    println!("sstn done in {:.1}s", clock.elapsed().as_secs_f64());
    let last = |m: &[sstn::training::MetricsRow]| m.last().map_or(0.0, |r| r.accuracy);
    println!(
        "final test accuracy: baseline {:.4}, sstn {:.4}",
        last(&base.metrics),
        last(&run.metrics)
    );
    Ok(())
}
