//! Slice-level compute kernels shared by the tape ops.
//!
//! Layouts are NCHW, row-major. Convolutions are valid (no padding) with
//! stride 1 and go through im2col + GEMM, processing the batch in chunks so
//! the column buffer stays bounded.

use crate::scalar::Scalar;

/// Upper bound on the number of elements in one im2col buffer.
const MAX_COLS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn chunk(&self) -> usize {
        let per_image = self.patch() * self.out_plane();
        (MAX_COLS / per_image.max(1)).clamp(1, self.batch.max(1))
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, input: &[S], b0: usize, nb: usize, cols: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let row_len = nb * oh * ow;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * row_len..(row + 1) * row_len];
                for bi in 0..nb {
                    let src = &input[((b0 + bi) * g.channels + c) * plane..][..plane];
                    for oy in 0..oh {
                        let s = &src[(oy + ki) * g.width + kj..][..ow];
                        dst[(bi * oh + oy) * ow..][..ow].copy_from_slice(s);
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, cols: &[S], b0: usize, nb: usize, dinput: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let row_len = nb * oh * ow;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * row_len..(row + 1) * row_len];
                for bi in 0..nb {
                    let dst = &mut dinput[((b0 + bi) * g.channels + c) * plane..][..plane];
                    for oy in 0..oh {
                        let d = &mut dst[(oy + ki) * g.width + kj..][..ow];
                        for (x, &v) in d.iter_mut().zip(&src[(bi * oh + oy) * ow..][..ow]) {
                            *x += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, input: &[S], kernel: &[S], bias: &[S]) -> Vec<S> {
    let ohw = g.out_plane();
    let patch = g.patch();
    let mut out = vec![S::zero(); g.batch * g.kernels * ohw];
    let chunk = g.chunk();
    let mut cols = vec![S::zero(); patch * chunk * ohw];
    let mut res = vec![S::zero(); g.kernels * chunk * ohw];
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = chunk.min(g.batch - b0);
        let n = nb * ohw;
        im2col(g, input, b0, nb, &mut cols[..patch * n]);
        S::gemm(
            g.kernels,
            patch,
            n,
            S::one(),
            kernel,
            false,
            &cols[..patch * n],
            false,
            S::zero(),
            &mut res[..g.kernels * n],
        );
        for bi in 0..nb {
            for k in 0..g.kernels {
                let dst = &mut out[((b0 + bi) * g.kernels + k) * ohw..][..ohw];
                let src = &res[k * n + bi * ohw..][..ohw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[k];
                }
            }
        }
        b0 += nb;
    }
    out
}

pub struct ConvGrads<S> {
    pub input: Option<Vec<S>>,
    pub kernel: Vec<S>,
    pub bias: Vec<S>,
}

pub fn conv2d_backward<S: Scalar>(g: &ConvGeom, input: &[S], kernel: &[S], dout: &[S], need_input: bool) -> ConvGrads<S> {
    let ohw = g.out_plane();
    let patch = g.patch();
    let chunk = g.chunk();
    let mut dkernel = vec![S::zero(); g.kernels * patch];
    let mut dbias_acc = vec![0.0f64; g.kernels];
    let mut dinput = need_input.then(|| vec![S::zero(); input.len()]);
    let mut cols = vec![S::zero(); patch * chunk * ohw];
    let mut dres = vec![S::zero(); g.kernels * chunk * ohw];
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = chunk.min(g.batch - b0);
        let n = nb * ohw;
        for bi in 0..nb {
            for k in 0..g.kernels {
                let src = &dout[((b0 + bi) * g.kernels + k) * ohw..][..ohw];
                dres[k * n + bi * ohw..][..ohw].copy_from_slice(src);
                dbias_acc[k] += src.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        im2col(g, input, b0, nb, &mut cols[..patch * n]);
        S::gemm(
            g.kernels,
            n,
            patch,
            S::one(),
            &dres[..g.kernels * n],
            false,
            &cols[..patch * n],
            true,
            S::one(),
            &mut dkernel,
        );
        if let Some(di) = dinput.as_mut() {
            S::gemm(
                patch,
                g.kernels,
                n,
                S::one(),
                kernel,
                true,
                &dres[..g.kernels * n],
                false,
                S::zero(),
                &mut cols[..patch * n],
            );
            col2im_add(g, &cols[..patch * n], b0, nb, di);
        }
        b0 += nb;
    }
    ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias: dbias_acc.into_iter().map(S::from_f64).collect(),
    }
}

/// 2x2 non-overlapping max pooling. Returns the pooled values and, per output
/// cell, the flat input index of the winning cell (first occurrence on ties).
pub fn maxpool2_forward<S: Scalar>(input: &[S], planes: usize, h: usize, w: usize) -> (Vec<S>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Mean over non-overlapping `f x f` blocks.
pub fn avgpool_forward<S: Scalar>(input: &[S], planes: usize, h: usize, w: usize, f: usize) -> Vec<S> {
    let (oh, ow) = (h / f, w / f);
    let scale = 1.0 / (f * f) as f64;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += src[(oy * f + dy) * w + ox * f + dx].as_f64();
                    }
                }
                out.push(S::from_f64(acc * scale));
            }
        }
    }
    out
}

pub fn avgpool_backward<S: Scalar>(dout: &[S], planes: usize, h: usize, w: usize, f: usize) -> Vec<S> {
    let (oh, ow) = (h / f, w / f);
    let scale = S::from_f64(1.0 / (f * f) as f64);
    let mut din = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh * f {
            for x in 0..ow * f {
                din[p * h * w + y * w + x] = dout[p * oh * ow + (y / f) * ow + x / f] * scale;
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.kernels * oh * ow];
        for b in 0..g.batch {
            for k in 0..g.kernels {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[k];
                        for c in 0..g.channels {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    acc += input[((b * g.channels + c) * g.height + y + i) * g.width + x + j]
                                        * kernel[((k * g.channels + c) * g.kh + i) * g.kw + j];
                                }
                            }
                        }
                        out[((b * g.kernels + k) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            batch: 3,
            channels: 2,
            height: 7,
            width: 6,
            kernels: 4,
            kh: 3,
            kw: 2,
        };
        let input: Vec<f64> = (0..3 * 2 * 7 * 6).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let kernel: Vec<f64> = (0..4 * 2 * 3 * 2).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect();
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let fast = conv2d_forward(&g, &input, &kernel, &bias);
        let slow = naive_conv(&g, &input, &kernel, &bias);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_ties_pick_first_cell() {
        let input = [1.0f32; 16];
        let (out, arg) = maxpool2_forward(&input, 1, 4, 4);
        assert_eq!(out, vec![1.0; 4]);
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn avgpool_averages_blocks() {
        let input: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = avgpool_forward(&input, 1, 4, 4, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
        let back = avgpool_backward(&[4.0f32; 4], 1, 4, 4, 2);
        assert!(back.iter().all(|&v| v == 1.0));
    }
}
