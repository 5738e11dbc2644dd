//! Renders a few cluttered canvases, round-trips them through IDX files and
//! prints one as ASCII art.

use std::path::Path;

use sstn::dataset::{load_dataset, make_cluttered, write_dataset, ClutterConfig, SourceSet, Split};

fn main() -> sstn::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let src = SourceSet::load(
        data.join("mnist10k-images-idx3-ubyte.gz"),
        data.join("mnist10k-labels-idx1-ubyte.gz"),
    )?;
    println!("{} source digits of side {}", src.len(), src.side);

    let cfg = ClutterConfig::default();
    let bundle = make_cluttered(&src.slice(0, 8000), 16, &cfg, 7, Split::Train)?;
    let dir = std::env::temp_dir().join("sstn-generate");
    std::fs::create_dir_all(&dir).map_err(|e| sstn::SstnError::io(&dir, e))?;
    let prefix = dir.join("demo");
    write_dataset(&prefix, &bundle)?;
    let back = load_dataset(&prefix)?;
    assert_eq!(back, bundle);
    println!("wrote and reloaded {} canvases under {}", back.len(), prefix.display());

    let side = cfg.canvas;
    let ramp = [' ', '.', ':', '+', '#'];
    println!("label {}:", bundle.labels[0]);
    for r in (0..side).step_by(2) {
        let line: String = (0..side)
            .map(|c| {
                let v = bundle.images.data()[r * side + c].max(bundle.images.data()[(r + 1) * side + c]);
                ramp[((v * 4.0).round() as usize).min(4)]
            })
            .collect();
        println!("{line}");
    }
    Ok(())
}
