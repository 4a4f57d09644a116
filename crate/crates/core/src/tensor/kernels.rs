//! Raw numeric kernels shared by the autodiff graph and the data pipeline.
//!
//! Image tensors are `[C, H, W]` (single scene) or `[N, C, H, W]` (batch).
//! Sampling geometry for an integer resolution ratio `r`: low-resolution
//! pixel `i` sits at high-resolution coordinate `i * r + r / 2`. Decimation
//! and upsampling both use that phase, so a decimated image upsampled again
//! is registered with the original.

use super::Tensor;
use crate::error::{Error, Result};

/// High-resolution coordinate of low-resolution sample 0.
pub const fn sampling_phase(ratio: usize) -> usize {
    ratio / 2
}

/// Geometry of a stride-1, zero-padded 2D convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn from_dims(input: &[usize], weight: &[usize], pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim("conv2d", "input [N, C, H, W]", input));
        }
        if weight.len() != 4 || weight[2] != weight[3] || weight[1] != input[1] {
            return Err(Error::dim(
                "conv2d",
                format!("weight [Cout, {}, K, K]", input[1]),
                weight,
            ));
        }
        let s = ConvShape {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel: weight[2],
            pad,
        };
        if s.height + 2 * pad < s.kernel || s.width + 2 * pad < s.kernel {
            return Err(Error::dim(
                "conv2d",
                format!("spatial dims >= {} after padding", s.kernel),
                input,
            ));
        }
        Ok(s)
    }

    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_channels,
            self.out_height(),
            self.out_width(),
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// `c = a · b + beta · c` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    (rsc, csc): (usize, usize),
    beta: f32,
) {
    assert!(m > 0 && k > 0 && n > 0);
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every offset sgemm touches within the
    // borrowed slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Blocked transpose of a row-major `rows x cols` matrix. Strided packing
/// inside sgemm is several times slower than this copy.
fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    const T: usize = 32;
    for r0 in (0..rows).step_by(T) {
        for c0 in (0..cols).step_by(T) {
            for r in r0..(r0 + T).min(rows) {
                for c in c0..(c0 + T).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Unfold one `[C, H, W]` sample into a `[C*K*K, Ho*Wo]` patch matrix.
fn im2col(x: &[f32], s: &ConvShape, cols: &mut [f32]) {
    let (ho, wo) = (s.out_height(), s.out_width());
    let plane = ho * wo;
    for ci in 0..s.in_channels {
        let chan = &x[ci * s.height * s.width..(ci + 1) * s.height * s.width];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (ci * s.kernel + ky) * s.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let x_lo = s.pad.saturating_sub(kx);
                let x_hi = wo.min((s.width + s.pad).saturating_sub(kx));
                for oy in 0..ho {
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = oy + ky;
                    if iy < s.pad || iy - s.pad >= s.height || x_lo >= x_hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &chan[(iy - s.pad) * s.width..(iy - s.pad + 1) * s.width];
                    out_row[..x_lo].fill(0.0);
                    out_row[x_hi..].fill(0.0);
                    let ix_lo = x_lo + kx - s.pad;
                    out_row[x_lo..x_hi].copy_from_slice(&src[ix_lo..ix_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Fold a patch-gradient matrix back onto `[C, H, W]`, accumulating.
fn col2im(cols: &[f32], s: &ConvShape, gx: &mut [f32]) {
    let (ho, wo) = (s.out_height(), s.out_width());
    let plane = ho * wo;
    for ci in 0..s.in_channels {
        let chan = &mut gx[ci * s.height * s.width..(ci + 1) * s.height * s.width];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (ci * s.kernel + ky) * s.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let x_lo = s.pad.saturating_sub(kx);
                let x_hi = wo.min((s.width + s.pad).saturating_sub(kx));
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < s.pad || iy - s.pad >= s.height {
                        continue;
                    }
                    let ix_lo = x_lo + kx - s.pad;
                    let dst = &mut chan[(iy - s.pad) * s.width + ix_lo
                        ..(iy - s.pad) * s.width + ix_lo + (x_hi - x_lo)];
                    for (d, &g) in dst.iter_mut().zip(&src[oy * wo + x_lo..oy * wo + x_hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, s: &ConvShape) -> Vec<f32> {
    let plane = s.out_plane();
    let patch = s.patch_len();
    let in_len = s.in_channels * s.height * s.width;
    let out_len = s.out_channels * plane;
    let mut cols = vec![0.0f32; patch * plane];
    let mut out = vec![0.0f32; s.batch * out_len];
    for n in 0..s.batch {
        im2col(&x[n * in_len..(n + 1) * in_len], s, &mut cols);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = b {
            for (co, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        gemm(
            s.out_channels,
            patch,
            plane,
            w,
            (patch, 1),
            &cols,
            (plane, 1),
            y,
            (plane, 1),
            if b.is_some() { 1.0 } else { 0.0 },
        );
    }
    out
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    s: &ConvShape,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let plane = s.out_plane();
    let patch = s.patch_len();
    let in_len = s.in_channels * s.height * s.width;
    let out_len = s.out_channels * plane;
    let mut cols = vec![0.0f32; patch * plane];
    let mut gcols = vec![0.0f32; patch * plane];
    let mut cols_t = if want_weight { vec![0.0f32; patch * plane] } else { Vec::new() };
    let mut gx = want_input.then(|| vec![0.0f32; s.batch * in_len]);
    let mut gw = want_weight.then(|| vec![0.0f32; s.out_channels * patch]);
    let mut gb = want_bias.then(|| vec![0.0f32; s.out_channels]);

    for n in 0..s.batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in go.chunks(plane).enumerate() {
                gb[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(gw) = gw.as_mut() {
            im2col(&x[n * in_len..(n + 1) * in_len], s, &mut cols);
            transpose(&cols, patch, plane, &mut cols_t);
            // gw[co, p] += sum_j go[co, j] * cols_t[j, p]
            gemm(
                s.out_channels,
                plane,
                patch,
                go,
                (plane, 1),
                &cols_t,
                (patch, 1),
                gw,
                (patch, 1),
                1.0,
            );
        }
        if let Some(gx) = gx.as_mut() {
            // gcols[p, j] = sum_co w[co, p] * go[co, j]
            gemm(
                patch,
                s.out_channels,
                plane,
                w,
                (1, patch),
                go,
                (plane, 1),
                &mut gcols,
                (plane, 1),
                0.0,
            );
            col2im(&gcols, s, &mut gx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Four clamped source taps and weights for each output position.
fn cubic_taps(src_len: usize, ratio: usize) -> Vec<([usize; 4], [f64; 4])> {
    let phase = sampling_phase(ratio) as f64;
    (0..src_len * ratio)
        .map(|o| {
            let pos = (o as f64 - phase) / ratio as f64;
            let base = pos.floor();
            let frac = pos - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0f64; 4];
            for k in 0..4 {
                let i = base as i64 - 1 + k as i64;
                idx[k] = i.clamp(0, src_len as i64 - 1) as usize;
                wts[k] = cubic(frac - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic upsampling of `[C, h, w]` by an integer ratio.
pub fn upsample_bicubic(t: &Tensor, ratio: usize) -> Result<Tensor> {
    if t.rank() != 3 || ratio == 0 {
        return Err(Error::dim("upsample_bicubic", "[C, h, w] and ratio >= 1", t.dims()));
    }
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let (hh, ww) = (h * ratio, w * ratio);
    let xt = cubic_taps(w, ratio);
    let yt = cubic_taps(h, ratio);
    let mut out = vec![0.0f32; c * hh * ww];
    let mut rows = vec![0.0f64; h * ww];
    for ch in 0..c {
        let src = t.channel(ch);
        for y in 0..h {
            for (x, (idx, wts)) in xt.iter().enumerate() {
                rows[y * ww + x] = (0..4).map(|k| wts[k] * src[y * w + idx[k]] as f64).sum();
            }
        }
        let dst = &mut out[ch * hh * ww..(ch + 1) * hh * ww];
        for (y, (idx, wts)) in yt.iter().enumerate() {
            for x in 0..ww {
                let v: f64 = (0..4).map(|k| wts[k] * rows[idx[k] * ww + x]).sum();
                dst[y * ww + x] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, hh, ww], out)
}

/// Normalized 1D Gaussian taps, truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of every channel of `[C, H, W]`, replicating edges.
pub fn gaussian_blur(t: &Tensor, sigma: f64) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::dim("gaussian_blur", "[C, H, W]", t.dims()));
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as i64;
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let mut tmp = vec![0.0f64; h * w];
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let src = t.channel(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &tw)| {
                        let sx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                        tw * src[y * w + sx] as f64
                    })
                    .sum();
            }
        }
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &tw)| {
                        let sy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                        tw * tmp[sy * w + x]
                    })
                    .sum();
                dst[y * w + x] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Keep every `ratio`-th pixel of `[C, H, W]`, starting at the sampling phase.
pub fn decimate(t: &Tensor, ratio: usize) -> Result<Tensor> {
    if t.rank() != 3 || ratio == 0 || t.dims()[1] % ratio != 0 || t.dims()[2] % ratio != 0 {
        return Err(Error::dim(
            "decimate",
            format!("[C, H, W] with H, W divisible by {ratio}"),
            t.dims(),
        ));
    }
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let (lh, lw) = (h / ratio, w / ratio);
    let p = sampling_phase(ratio);
    let mut out = Vec::with_capacity(c * lh * lw);
    for ch in 0..c {
        let src = t.channel(ch);
        for y in 0..lh {
            for x in 0..lw {
                out.push(src[(y * ratio + p) * w + x * ratio + p]);
            }
        }
    }
    Tensor::new(vec![c, lh, lw], out)
}

/// Non-overlapping average pooling of `[C, H, W]` by `factor`.
pub fn avg_pool(t: &Tensor, factor: usize) -> Result<Tensor> {
    if t.rank() != 3 || factor == 0 || t.dims()[1] % factor != 0 || t.dims()[2] % factor != 0 {
        return Err(Error::dim(
            "avg_pool",
            format!("[C, H, W] with H, W divisible by {factor}"),
            t.dims(),
        ));
    }
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let (ph, pw) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let src = t.channel(ch);
        for y in 0..ph {
            for x in 0..pw {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(y * factor + dy) * w + x * factor + dx] as f64;
                    }
                }
                out.push((acc / norm) as f32);
            }
        }
    }
    Tensor::new(vec![c, ph, pw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], w: &[f32], b: &[f32], s: &ConvShape) -> Vec<f32> {
        let (ho, wo) = (s.out_height(), s.out_width());
        let mut out = vec![0.0f32; s.batch * s.out_channels * ho * wo];
        for n in 0..s.batch {
            for co in 0..s.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co] as f64;
                        for ci in 0..s.in_channels {
                            for ky in 0..s.kernel {
                                for kx in 0..s.kernel {
                                    let iy = oy as i64 + ky as i64 - s.pad as i64;
                                    let ix = ox as i64 + kx as i64 - s.pad as i64;
                                    if iy < 0 || ix < 0 || iy >= s.height as i64 || ix >= s.width as i64 {
                                        continue;
                                    }
                                    let xv = x[((n * s.in_channels + ci) * s.height + iy as usize) * s.width + ix as usize];
                                    let wv = w[((co * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((n * s.out_channels + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_center_is_nine() {
        let s = ConvShape::from_dims(&[1, 1, 5, 5], &[1, 1, 3, 3], 1).unwrap();
        let y = conv2d_forward(&[1.0; 25], &[1.0; 9], None, &s);
        assert_eq!(y[2 * 5 + 2], 9.0);
        assert_eq!(y[0], 4.0);
        assert_eq!(y[2], 6.0);
    }

    #[test]
    fn matches_direct_convolution() {
        let s = ConvShape::from_dims(&[2, 3, 6, 7], &[4, 3, 3, 3], 1).unwrap();
        let x: Vec<f32> = (0..2 * 3 * 42).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let w: Vec<f32> = (0..4 * 27).map(|i| ((i * 53 % 89) as f32 / 44.0) - 1.0).collect();
        let b = [0.1, -0.2, 0.3, 0.0];
        let got = conv2d_forward(&x, &w, Some(&b), &s);
        let want = naive_conv(&x, &w, &b, &s);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-4, "{g} vs {e}");
        }
    }

    #[test]
    fn unpadded_and_wide_kernels() {
        for (k, pad) in [(3, 0), (5, 2), (1, 0)] {
            let s = ConvShape::from_dims(&[1, 2, 6, 6], &[3, 2, k, k], pad).unwrap();
            let x: Vec<f32> = (0..72).map(|i| (i % 7) as f32 - 3.0).collect();
            let w: Vec<f32> = (0..3 * 2 * k * k).map(|i| (i % 5) as f32 * 0.1).collect();
            let got = conv2d_forward(&x, &w, None, &s);
            let want = naive_conv(&x, &w, &[0.0; 3], &s);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        assert!(ConvShape::from_dims(&[1, 2, 5, 5], &[1, 3, 3, 3], 1).is_err());
        assert!(ConvShape::from_dims(&[2, 5, 5], &[1, 2, 3, 3], 1).is_err());
    }

    #[test]
    fn gaussian_taps_are_normalized() {
        for sigma in [0.3, 1.0, 1.7, 2.5] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len() as f64, 2.0 * (3.0 * sigma).ceil().max(1.0) + 1.0);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let t = Tensor::full(&[2, 16, 16], 0.375);
        let up = upsample_bicubic(&decimate(&gaussian_blur(&t, 1.3).unwrap(), 4).unwrap(), 4).unwrap();
        assert_eq!(up.dims(), &[2, 16, 16]);
        assert!(up.data().iter().all(|&v| (v - 0.375).abs() < 1e-6));
        let p = avg_pool(&t, 4).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn upsample_hits_samples_at_phase() {
        let t = Tensor::from_fn(&[1, 4, 4], |i| (i as f32 * 0.37).sin());
        let up = upsample_bicubic(&t, 4).unwrap();
        let back = decimate(&up, 4).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
