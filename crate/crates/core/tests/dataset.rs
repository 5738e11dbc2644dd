use std::path::Path;

use sstn::dataset::*;
use sstn::SstnError;

const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");

fn source() -> SourceSet {
    let d = Path::new(DATA);
    SourceSet::load(d.join("mnist10k-images-idx3-ubyte.gz"), d.join("mnist10k-labels-idx1-ubyte.gz")).unwrap()
}

#[test]
fn bundled_digits_parse() {
    let (n, h, w, px) = read_images(Path::new(DATA).join("mnist10k-images-idx3-ubyte.gz")).unwrap();
    assert_eq!((n, h, w), (10_000, 28, 28));
    assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
    let labels = read_labels(Path::new(DATA).join("mnist10k-labels-idx1-ubyte.gz")).unwrap();
    let mut counts = [0usize; 10];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    assert_eq!(counts, [1001, 1127, 991, 1032, 980, 863, 1014, 1070, 944, 978]);
}

#[test]
fn generation_is_deterministic_and_preserves_labels() {
    let src = source().slice(0, 500);
    let cfg = ClutterConfig::default();
    let a = make_cluttered(&src, 64, &cfg, 7, Split::Train).unwrap();
    let b = make_cluttered(&src, 64, &cfg, 7, Split::Train).unwrap();
    assert_eq!(a, b);
    let c = make_cluttered(&src, 64, &cfg, 8, Split::Train).unwrap();
    assert_ne!(a.images.data(), c.images.data());
    for i in 0..64 {
        let canvas = render_canvas(&src, &cfg, 7, i).unwrap();
        assert_eq!(a.labels[i], src.labels[canvas.source_index]);
        assert!(canvas.row + 28 <= 80 && canvas.col + 28 <= 80);
        let row = &a.images.data()[i * 6400..(i + 1) * 6400];
        assert!(row.iter().zip(&canvas.pixels).all(|(&v, &p)| v == p as f32 / 255.0));
    }
}

#[test]
fn write_load_round_trip_and_file_size() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("train");
    let bundle = make_cluttered(&source().slice(0, 200), 100, &ClutterConfig::default(), 3, Split::Train).unwrap();
    write_dataset(&prefix, &bundle).unwrap();
    assert_eq!(std::fs::metadata(images_path(&prefix)).unwrap().len(), 16 + 100 * 80 * 80);
    assert_eq!(std::fs::metadata(labels_path(&prefix)).unwrap().len(), 8 + 100);
    let back = load_dataset(&prefix).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(
        back.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        bundle.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn corrupted_magic_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("bad");
    let bundle = make_cluttered(&source().slice(0, 50), 4, &ClutterConfig::default(), 1, Split::Test).unwrap();
    write_dataset(&prefix, &bundle).unwrap();
    let p = images_path(&prefix);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[2] = 0x09;
    std::fs::write(&p, bytes).unwrap();
    match load_dataset(&prefix) {
        Err(SstnError::Parse { offset, path, .. }) => {
            assert_eq!(offset, 0);
            assert_eq!(path, p);
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_file_reports_its_path() {
    let err = read_idx("/nonexistent/file-idx1-ubyte").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/file-idx1-ubyte"));
}
