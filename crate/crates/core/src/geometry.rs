//! Affine maps, the discrete action set, the grid generator and the
//! bilinear sampler.
//!
//! Coordinates are normalized so that `-1` and `+1` fall on the centers of
//! the first and last pixel along each axis. Warping is backward mapping:
//! output pixel `p` takes the input value at `theta * p`, so a scale below
//! one zooms in.

use sstn_tensor::{CustomOp, Scalar, Tape, Tensor, Var};

use crate::error::{Result, SstnError};

/// `[[a11, a12, tx], [a21, a22, ty]]` acting on homogeneous `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineMap {
    pub a11: f64,
    pub a12: f64,
    pub tx: f64,
    pub a21: f64,
    pub a22: f64,
    pub ty: f64,
}

impl Default for AffineMap {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        a11: 1.0,
        a12: 0.0,
        tx: 0.0,
        a21: 0.0,
        a22: 1.0,
        ty: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineMap { tx, ty, ..Self::IDENTITY }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        AffineMap {
            a11: sx,
            a22: sy,
            ..Self::IDENTITY
        }
    }

    pub fn rotation(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        AffineMap {
            a11: c,
            a12: -s,
            tx: 0.0,
            a21: s,
            a22: c,
            ty: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty)
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty]]
    }

    pub fn max_abs_diff(&self, other: &AffineMap) -> f64 {
        let (a, b) = (self.matrix(), other.matrix());
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// `outer * inner` in homogeneous coordinates: applies `inner` first.
pub fn compose(outer: &AffineMap, inner: &AffineMap) -> AffineMap {
    if outer.is_identity() {
        return *inner;
    }
    if inner.is_identity() {
        return *outer;
    }
    AffineMap {
        a11: outer.a11 * inner.a11 + outer.a12 * inner.a21,
        a12: outer.a11 * inner.a12 + outer.a12 * inner.a22,
        tx: outer.a11 * inner.tx + outer.a12 * inner.ty + outer.tx,
        a21: outer.a21 * inner.a11 + outer.a22 * inner.a21,
        a22: outer.a21 * inner.a12 + outer.a22 * inner.a22,
        ty: outer.a21 * inner.tx + outer.a22 * inner.ty + outer.ty,
    }
}

pub const NUM_ACTIONS: usize = 10;
pub const TRANSLATE_PIXELS: f64 = 4.0;
pub const SCALE_FACTOR: f64 = 0.8;
pub const ROTATE_DEGREES: f64 = 10.0;

/// The ten discrete transformations. The discriminant is the action index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Action {
    TranslateXPos = 0,
    TranslateXNeg = 1,
    TranslateYPos = 2,
    TranslateYNeg = 3,
    ScaleX = 4,
    ScaleY = 5,
    ScaleXY = 6,
    RotatePos = 7,
    RotateNeg = 8,
    Identity = 9,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::TranslateXPos,
        Action::TranslateXNeg,
        Action::TranslateYPos,
        Action::TranslateYNeg,
        Action::ScaleX,
        Action::ScaleY,
        Action::ScaleXY,
        Action::RotatePos,
        Action::RotateNeg,
        Action::Identity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| SstnError::Config(format!("action index {i} out of range 0..{NUM_ACTIONS}")))
    }

    pub fn one_hot(self) -> [f32; NUM_ACTIONS] {
        let mut v = [0.0; NUM_ACTIONS];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::TranslateXPos => "translate_x+4",
            Action::TranslateXNeg => "translate_x-4",
            Action::TranslateYPos => "translate_y+4",
            Action::TranslateYNeg => "translate_y-4",
            Action::ScaleX => "scale_x0.8",
            Action::ScaleY => "scale_y0.8",
            Action::ScaleXY => "scale_xy0.8",
            Action::RotatePos => "rotate+10",
            Action::RotateNeg => "rotate-10",
            Action::Identity => "identity",
        }
    }
}

/// Affine parameters of an action for an `height x width` image.
pub fn action_to_affine(action: Action, (height, width): (usize, usize)) -> AffineMap {
    let dx = 2.0 * TRANSLATE_PIXELS / width as f64;
    let dy = 2.0 * TRANSLATE_PIXELS / height as f64;
    let rot = ROTATE_DEGREES.to_radians();
    match action {
        Action::TranslateXPos => AffineMap::translation(dx, 0.0),
        Action::TranslateXNeg => AffineMap::translation(-dx, 0.0),
        Action::TranslateYPos => AffineMap::translation(0.0, dy),
        Action::TranslateYNeg => AffineMap::translation(0.0, -dy),
        Action::ScaleX => AffineMap::scale(SCALE_FACTOR, 1.0),
        Action::ScaleY => AffineMap::scale(1.0, SCALE_FACTOR),
        Action::ScaleXY => AffineMap::scale(SCALE_FACTOR, SCALE_FACTOR),
        Action::RotatePos => AffineMap::rotation(rot),
        Action::RotateNeg => AffineMap::rotation(-rot),
        Action::Identity => AffineMap::IDENTITY,
    }
}

/// Source locations for every output pixel, `height x width x 2`, as
/// normalized `(x, y)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid<S: Scalar = f32> {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<S>,
    identity: bool,
}

impl<S: Scalar> SampleGrid<S> {
    pub fn from_coords(height: usize, width: usize, coords: Vec<S>) -> Result<Self> {
        if coords.len() != height * width * 2 {
            return Err(SstnError::Config(format!(
                "grid of {height}x{width} needs {} coordinates, got {}",
                height * width * 2,
                coords.len()
            )));
        }
        Ok(SampleGrid {
            height,
            width,
            coords,
            identity: false,
        })
    }

    /// Whether the grid came from the identity map (sampling is then a copy).
    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn at(&self, i: usize, j: usize) -> (S, S) {
        let k = 2 * (i * self.width + j);
        (self.coords[k], self.coords[k + 1])
    }
}

pub fn normalized(index: usize, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * index as f64 / (size - 1) as f64
    }
}

fn to_pixel(coord: f64, size: usize) -> f64 {
    (coord + 1.0) * (size.max(1) - 1) as f64 / 2.0
}

pub fn grid_generate<S: Scalar>(theta: &AffineMap, (height, width): (usize, usize)) -> SampleGrid<S> {
    let mut coords = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        let yt = normalized(i, height);
        for j in 0..width {
            let xt = normalized(j, width);
            let (xs, ys) = theta.apply(xt, yt);
            coords.push(S::from_f64(xs));
            coords.push(S::from_f64(ys));
        }
    }
    SampleGrid {
        height,
        width,
        coords,
        identity: theta.is_identity(),
    }
}

/// Bilinear weight `max(0, 1 - |a - b|)`.
#[inline]
fn kernel(a: f64, b: f64) -> f64 {
    (1.0 - (a - b).abs()).max(0.0)
}

/// Samples one `height x width` plane. Out-of-range neighbours contribute 0.
pub fn sample_plane<S: Scalar>(plane: &[S], height: usize, width: usize, grid: &SampleGrid<S>) -> Vec<S> {
    if grid.identity && grid.height == height && grid.width == width {
        return plane.to_vec();
    }
    let mut out = Vec::with_capacity(grid.height * grid.width);
    for k in 0..grid.height * grid.width {
        let px = to_pixel(grid.coords[2 * k].as_f64(), width);
        let py = to_pixel(grid.coords[2 * k + 1].as_f64(), height);
        let (x0, y0) = (px.floor(), py.floor());
        let mut acc = 0.0;
        for n in [y0, y0 + 1.0] {
            let wy = kernel(py, n);
            if wy == 0.0 || n < 0.0 || n >= height as f64 {
                continue;
            }
            for m in [x0, x0 + 1.0] {
                let wx = kernel(px, m);
                if wx == 0.0 || m < 0.0 || m >= width as f64 {
                    continue;
                }
                acc += plane[n as usize * width + m as usize].as_f64() * wx * wy;
            }
        }
        out.push(S::from_f64(acc));
    }
    out
}

/// Slope of `max(0, 1 - |x - m|)` in `x`: zero when `|m - x| >= 1`,
/// otherwise `+1` if `m >= x` (equality included) and `-1` below.
#[inline]
fn kernel_slope(x: f64, m: f64) -> f64 {
    if (m - x).abs() >= 1.0 {
        0.0
    } else if m >= x {
        1.0
    } else {
        -1.0
    }
}

/// Gradients of one sampled plane with respect to the plane and the grid.
pub fn sample_plane_backward<S: Scalar>(
    plane: &[S],
    height: usize,
    width: usize,
    grid: &SampleGrid<S>,
    out_grad: &[S],
) -> (Vec<S>, Vec<S>) {
    let mut d_plane = vec![0.0f64; height * width];
    let mut d_grid = vec![S::zero(); grid.coords.len()];
    let sx = (width.max(1) - 1) as f64 / 2.0;
    let sy = (height.max(1) - 1) as f64 / 2.0;
    for k in 0..grid.height * grid.width {
        let g = out_grad[k].as_f64();
        let px = to_pixel(grid.coords[2 * k].as_f64(), width);
        let py = to_pixel(grid.coords[2 * k + 1].as_f64(), height);
        let (x0, y0) = (px.floor(), py.floor());
        let (mut gx, mut gy) = (0.0, 0.0);
        for n in [y0, y0 + 1.0] {
            if n < 0.0 || n >= height as f64 {
                continue;
            }
            for m in [x0, x0 + 1.0] {
                if m < 0.0 || m >= width as f64 {
                    continue;
                }
                let idx = n as usize * width + m as usize;
                let (wx, wy) = (kernel(px, m), kernel(py, n));
                d_plane[idx] += g * wx * wy;
                let u = plane[idx].as_f64();
                gx += u * wy * kernel_slope(px, m);
                gy += u * wx * kernel_slope(py, n);
            }
        }
        d_grid[2 * k] = S::from_f64(g * gx * sx);
        d_grid[2 * k + 1] = S::from_f64(g * gy * sy);
    }
    (d_plane.into_iter().map(S::from_f64).collect(), d_grid)
}

fn check_batch<S: Scalar>(input: &Tensor<S>, grids: &[SampleGrid<S>]) -> Result<(usize, usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(SstnError::Config(format!("sampler expects [B, C, H, W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if grids.len() != 1 && grids.len() != b {
        return Err(SstnError::Config(format!("{} grids for a batch of {b}", grids.len())));
    }
    if let Some(g) = grids.iter().find(|g| g.height != h || g.width != w) {
        return Err(SstnError::Config(format!(
            "grid {}x{} does not match image {h}x{w}",
            g.height, g.width
        )));
    }
    Ok((b, c, h, w))
}

/// Warps a `[B, C, H, W]` batch. `grids` holds one grid shared by the whole
/// batch or one grid per element.
pub fn bilinear_sample<S: Scalar>(input: &Tensor<S>, grids: &[SampleGrid<S>]) -> Result<Tensor<S>> {
    let (b, c, h, w) = check_batch(input, grids)?;
    let mut out = Vec::with_capacity(input.len());
    for (bi, item) in input.data().chunks(c * h * w).enumerate() {
        let grid = &grids[if grids.len() == 1 { 0 } else { bi }];
        for plane in item.chunks(h * w) {
            out.extend(sample_plane(plane, h, w, grid));
        }
    }
    Ok(Tensor::from_vec(&[b, c, h, w], out)?)
}

/// Input gradient (same shape as the input) and per-grid coordinate gradients.
pub fn bilinear_sample_backward<S: Scalar>(input: &Tensor<S>, grids: &[SampleGrid<S>], out_grad: &[S]) -> Result<(Tensor<S>, Vec<Vec<S>>)> {
    let (b, c, h, w) = check_batch(input, grids)?;
    if out_grad.len() != input.len() {
        return Err(SstnError::Config("output gradient size mismatch".into()));
    }
    let mut d_input = Vec::with_capacity(input.len());
    let mut d_grids: Vec<Vec<S>> = grids.iter().map(|g| vec![S::zero(); g.coords.len()]).collect();
    for bi in 0..b {
        let gi = if grids.len() == 1 { 0 } else { bi };
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let (dp, dg) = sample_plane_backward(&input.data()[off..off + h * w], h, w, &grids[gi], &out_grad[off..off + h * w]);
            d_input.extend(dp);
            for (acc, v) in d_grids[gi].iter_mut().zip(dg) {
                *acc += v;
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, h, w], d_input)?, d_grids))
}

struct BilinearOp {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl<S: Scalar> CustomOp<S> for BilinearOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&[S]], _output: &[S], out_grad: &[S], needs: &[bool]) -> Vec<Option<Vec<S>>> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let grid_len = h * w * 2;
        let mut d_img = vec![S::zero(); inputs[0].len()];
        let mut d_grid = vec![S::zero(); inputs[1].len()];
        for bi in 0..self.batch {
            let grid = SampleGrid {
                height: h,
                width: w,
                coords: inputs[1][bi * grid_len..(bi + 1) * grid_len].to_vec(),
                identity: false,
            };
            for ci in 0..c {
                let off = (bi * c + ci) * h * w;
                let (dp, dg) = sample_plane_backward(&inputs[0][off..off + h * w], h, w, &grid, &out_grad[off..off + h * w]);
                d_img[off..off + h * w].copy_from_slice(&dp);
                for (acc, v) in d_grid[bi * grid_len..(bi + 1) * grid_len].iter_mut().zip(dg) {
                    *acc += v;
                }
            }
        }
        vec![needs[0].then_some(d_img), needs[1].then_some(d_grid)]
    }
}

/// Records bilinear sampling on a tape so gradients reach both the image
/// `[B, C, H, W]` and the grid `[B, H, W, 2]`.
pub fn bilinear_sample_on_tape<S: Scalar>(tape: &mut Tape<S>, image: Var, grid: Var) -> Result<Var> {
    let (si, sg) = (tape.shape(image).to_vec(), tape.shape(grid).to_vec());
    if si.len() != 4 || sg != [si[0], si[2], si[3], 2] {
        return Err(SstnError::Config(format!("sampler shapes {si:?} and {sg:?} disagree")));
    }
    let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
    let mut out = Vec::with_capacity(b * c * h * w);
    {
        let (img, coords) = (tape.value(image), tape.value(grid));
        for bi in 0..b {
            let g = SampleGrid {
                height: h,
                width: w,
                coords: coords[bi * h * w * 2..(bi + 1) * h * w * 2].to_vec(),
                identity: false,
            };
            for ci in 0..c {
                let off = (bi * c + ci) * h * w;
                out.extend(sample_plane(&img[off..off + h * w], h, w, &g));
            }
        }
    }
    let op = BilinearOp {
        batch: b,
        channels: c,
        height: h,
        width: w,
    };
    Ok(tape.custom(&[image, grid], &si, out, Box::new(op))?)
}

/// Precomputed sampling grids for every action at one image size.
#[derive(Clone, Debug)]
pub struct ActionGrids<S: Scalar = f32> {
    grids: Vec<SampleGrid<S>>,
    size: (usize, usize),
}

impl<S: Scalar> ActionGrids<S> {
    pub fn new(size: (usize, usize)) -> Self {
        let grids = Action::ALL
            .iter()
            .map(|&a| grid_generate(&action_to_affine(a, size), size))
            .collect();
        ActionGrids { grids, size }
    }

    pub fn size(&self) -> (usize, usize) {
        self.size
    }

    pub fn grid(&self, action: Action) -> &SampleGrid<S> {
        &self.grids[action.index()]
    }

    /// Applies `actions[b]` to element `b` of a `[B, C, H, W]` batch.
    pub fn apply(&self, images: &Tensor<S>, actions: &[Action]) -> Result<Tensor<S>> {
        let s = images.shape();
        if s.len() != 4 || s[0] != actions.len() || (s[2], s[3]) != self.size {
            return Err(SstnError::Config(format!(
                "cannot apply {} actions to images of shape {s:?}",
                actions.len()
            )));
        }
        let (h, w) = self.size;
        let per = s[1] * h * w;
        let mut out = Vec::with_capacity(images.len());
        for (item, &a) in images.data().chunks(per).zip(actions) {
            for plane in item.chunks(h * w) {
                out.extend(sample_plane(plane, h, w, self.grid(a)));
            }
        }
        Ok(Tensor::from_vec(s, out)?)
    }
}

/// Warps a single plane by an arbitrary map.
pub fn warp_plane<S: Scalar>(plane: &[S], height: usize, width: usize, theta: &AffineMap) -> Vec<S> {
    sample_plane(plane, height, width, &grid_generate(theta, (height, width)))
}
