//! IDX reading/writing and cluttered-canvas synthesis.
//!
//! IDX layout: a big-endian magic `0x0000_08NN` where `NN` is the rank, one
//! big-endian u32 per dimension, then u8 payload in row-major order. Inputs
//! may be gzip-compressed; outputs are written uncompressed.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sstn_tensor::Tensor;

use crate::error::{Result, SstnError};

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX payload with its dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> SstnError {
    SstnError::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| SstnError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| SstnError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses IDX bytes; `path` is only used for error messages.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Idx> {
    let word = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| parse_err(path, off, "truncated header"))
    };
    let magic = word(0)?;
    if magic >> 8 != 0x08 {
        return Err(parse_err(path, 0, format!("bad magic {magic:#010x}, expected unsigned-byte IDX")));
    }
    let rank = (magic & 0xff) as usize;
    if rank == 0 {
        return Err(parse_err(path, 3, "rank 0"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut total: usize = 1;
    for k in 0..rank {
        let d = word(4 + 4 * k)? as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| parse_err(path, 4 + 4 * k, "dimension product overflows"))?;
        dims.push(d);
    }
    let start = 4 + 4 * rank;
    let have = bytes.len() - start;
    if have < total {
        return Err(parse_err(path, bytes.len(), format!("truncated payload: {have} of {total} bytes")));
    }
    if have > total {
        return Err(parse_err(path, start + total, format!("{} trailing bytes", have - total)));
    }
    Ok(Idx {
        dims,
        data: bytes[start..].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<Idx> {
    let path = path.as_ref();
    parse_idx(&read_file(path)?, path)
}

pub fn encode_idx(idx: &Idx) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * idx.dims.len() + idx.data.len());
    out.extend_from_slice(&(0x0800 | idx.dims.len() as u32).to_be_bytes());
    for &d in &idx.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&idx.data);
    out
}

pub fn write_idx(path: impl AsRef<Path>, idx: &Idx) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_idx(idx)).map_err(|e| SstnError::io(path, e))
}

/// Reads an image file into `(count, height, width, pixels in [0, 1])`.
pub fn read_images(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let idx = read_idx(path)?;
    if idx.dims.len() != 3 {
        return Err(parse_err(
            path,
            0,
            format!("expected magic {IMAGE_MAGIC:#010x} (rank 3), got rank {}", idx.dims.len()),
        ));
    }
    let pixels = idx.data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((idx.dims[0], idx.dims[1], idx.dims[2], pixels))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let idx = read_idx(path)?;
    if idx.dims.len() != 1 {
        return Err(parse_err(
            path,
            0,
            format!("expected magic {LABEL_MAGIC:#010x} (rank 1), got rank {}", idx.dims.len()),
        ));
    }
    Ok(idx.data)
}

/// Source digits kept as raw bytes so canvases are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSet {
    pub side: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl SourceSet {
    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let (ip, lp) = (images.as_ref(), labels.as_ref());
        let img = read_idx(ip)?;
        if img.dims.len() != 3 || img.dims[1] != img.dims[2] {
            return Err(parse_err(ip, 0, format!("expected square rank-3 images, got {:?}", img.dims)));
        }
        let labels = read_labels(lp)?;
        if labels.len() != img.dims[0] {
            return Err(SstnError::Config(format!("{} images but {} labels", img.dims[0], labels.len())));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(parse_err(lp, 8 + pos, format!("label {} out of range", labels[pos])));
        }
        Ok(SourceSet {
            side: img.dims[1],
            pixels: img.data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.side * self.side;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Copies the half-open index range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> SourceSet {
        let n = self.side * self.side;
        SourceSet {
            side: self.side,
            pixels: self.pixels[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClutterConfig {
    pub canvas: usize,
    pub patches: usize,
    pub patch_size: usize,
}

impl Default for ClutterConfig {
    fn default() -> Self {
        ClutterConfig {
            canvas: 80,
            patches: 8,
            patch_size: 8,
        }
    }
}

/// One rendered canvas and where its content came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub pixels: Vec<u8>,
    pub label: u8,
    pub source_index: usize,
    /// Top-left corner of the digit.
    pub row: usize,
    pub col: usize,
}

fn check_clutter(source: &SourceSet, cfg: &ClutterConfig) -> Result<()> {
    if source.is_empty() {
        return Err(SstnError::Config("source set is empty".into()));
    }
    if cfg.canvas < source.side {
        return Err(SstnError::Config(format!(
            "canvas {} smaller than source side {}",
            cfg.canvas, source.side
        )));
    }
    if cfg.patches > 0 && (cfg.patch_size == 0 || cfg.patch_size > source.side) {
        return Err(SstnError::Config(format!(
            "patch size {} must be in 1..={}",
            cfg.patch_size, source.side
        )));
    }
    Ok(())
}

fn max_blit(canvas: &mut [u8], cside: usize, src: &[u8], sside: usize, (sr, sc): (usize, usize), size: usize, (dr, dc): (usize, usize)) {
    for i in 0..size {
        let s = &src[(sr + i) * sside + sc..(sr + i) * sside + sc + size];
        let d = &mut canvas[(dr + i) * cside + dc..(dr + i) * cside + dc + size];
        for (o, &v) in d.iter_mut().zip(s) {
            *o = (*o).max(v);
        }
    }
}

/// Renders canvas `index` of a dataset. Each index draws from its own
/// ChaCha stream of `seed`, so canvases are independent of each other.
pub fn render_canvas(source: &SourceSet, cfg: &ClutterConfig, seed: u64, index: usize) -> Result<Canvas> {
    check_clutter(source, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (side, c) = (source.side, cfg.canvas);
    let src = rng.random_range(0..source.len());
    let row = rng.random_range(0..=c - side);
    let col = rng.random_range(0..=c - side);
    let mut pixels = vec![0u8; c * c];
    max_blit(&mut pixels, c, source.image(src), side, (0, 0), side, (row, col));
    for _ in 0..cfg.patches {
        let other = if source.len() > 1 {
            let o = rng.random_range(0..source.len() - 1);
            if o >= src {
                o + 1
            } else {
                o
            }
        } else {
            src
        };
        let p = cfg.patch_size;
        let at = (rng.random_range(0..=side - p), rng.random_range(0..=side - p));
        let to = (rng.random_range(0..=c - p), rng.random_range(0..=c - p));
        max_blit(&mut pixels, c, source.image(other), side, at, p, to);
    }
    Ok(Canvas {
        pixels,
        label: source.labels[src],
        source_index: src,
        row,
        col,
    })
}

/// Images `[N, 1, side, side]` in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub seed: u64,
}

/// Stored alongside the IDX pair so a bundle round-trips completely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    split: Split,
    seed: u64,
    count: usize,
    side: usize,
}

impl DatasetBundle {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, split: Split, seed: u64) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != s[3] {
            return Err(SstnError::Config(format!("images must be [N, 1, S, S], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(SstnError::Config(format!("{} images but {} labels", s[0], labels.len())));
        }
        if labels.iter().any(|&l| l as usize >= NUM_CLASSES) {
            return Err(SstnError::Config("label out of range".into()));
        }
        Ok(DatasetBundle {
            images,
            labels,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Images at `indices` as a `[B, 1, S, S]` batch and their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, start: usize, end: usize) -> Result<DatasetBundle> {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        let images = self.images.gather_rows(&idx)?;
        DatasetBundle::new(images, self.labels[start..end.min(self.len())].to_vec(), self.split, self.seed)
    }
}

pub fn make_cluttered(source: &SourceSet, count: usize, cfg: &ClutterConfig, seed: u64, split: Split) -> Result<DatasetBundle> {
    check_clutter(source, cfg)?;
    let c = cfg.canvas;
    let mut data = Vec::with_capacity(count * c * c);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let canvas = render_canvas(source, cfg, seed, i)?;
        data.extend(canvas.pixels.iter().map(|&b| b as f32 / 255.0));
        labels.push(canvas.label);
    }
    DatasetBundle::new(Tensor::from_vec(&[count, 1, c, c], data)?, labels, split, seed)
}

pub fn images_path(prefix: &Path) -> PathBuf {
    suffixed(prefix, "-images-idx3-ubyte")
}

pub fn labels_path(prefix: &Path) -> PathBuf {
    suffixed(prefix, "-labels-idx1-ubyte")
}

fn meta_path(prefix: &Path) -> PathBuf {
    suffixed(prefix, ".json")
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<prefix>-images-idx3-ubyte`, `<prefix>-labels-idx1-ubyte` and a
/// small JSON sidecar with the split and seed.
pub fn write_dataset(prefix: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
    let prefix = prefix.as_ref();
    let (n, side) = (bundle.len(), bundle.side());
    let mut bytes = Vec::with_capacity(bundle.images.len());
    for &v in bundle.images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(SstnError::Numeric(format!("pixel {v} outside [0, 1]")));
        }
        bytes.push((v * 255.0).round() as u8);
    }
    write_idx(
        images_path(prefix),
        &Idx {
            dims: vec![n, side, side],
            data: bytes,
        },
    )?;
    write_idx(
        labels_path(prefix),
        &Idx {
            dims: vec![n],
            data: bundle.labels.clone(),
        },
    )?;
    let meta = BundleMeta {
        split: bundle.split,
        seed: bundle.seed,
        count: n,
        side,
    };
    let mp = meta_path(prefix);
    fs::write(&mp, serde_json::to_string_pretty(&meta).expect("plain struct")).map_err(|e| SstnError::io(&mp, e))
}

pub fn load_dataset(prefix: impl AsRef<Path>) -> Result<DatasetBundle> {
    let prefix = prefix.as_ref();
    let (n, h, w, pixels) = read_images(images_path(prefix))?;
    let labels = read_labels(labels_path(prefix))?;
    let mp = meta_path(prefix);
    let meta: BundleMeta = match fs::read_to_string(&mp) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| parse_err(&mp, 0, e.to_string()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BundleMeta {
            split: Split::Test,
            seed: 0,
            count: n,
            side: h,
        },
        Err(e) => return Err(SstnError::io(&mp, e)),
    };
    if meta.count != n || meta.side != h {
        return Err(SstnError::Config(format!(
            "{} describes {} images of side {}, files hold {n} of side {h}",
            mp.display(),
            meta.count,
            meta.side
        )));
    }
    DatasetBundle::new(Tensor::from_vec(&[n, 1, h, w], pixels)?, labels, meta.split, meta.seed)
}
