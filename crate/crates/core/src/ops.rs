//! Layer primitives over [`Tensor`]: convolution, batch norm, SiLU, pooling
//! and the channel plumbing used by the neck and the ShuffleNetV2 blocks.
//!
//! Every primitive validates its shapes up front and rejects non-finite
//! results. Work is split into fixed-size chunks independent of the thread
//! count, so results are bit-identical however many workers rayon uses.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Output positions handled per GEMM call.
const COL_CHUNK: usize = 4096;

/// `floor((size + 2*pad - k) / stride) + 1`, or `None` when the window does
/// not fit.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if k == 0 || stride == 0 {
        return None;
    }
    let padded = size + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dParams {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dParams {
            stride,
            pad,
            groups,
        }
    }
}

/// Output shape of a convolution, validating channel/group divisibility.
pub fn conv2d_shape(input: Shape, weight: Shape, p: Conv2dParams) -> Result<Shape> {
    let op = "conv2d";
    if p.groups == 0 || p.stride == 0 {
        return Err(Error::shape(op, "stride and groups must be >= 1"));
    }
    if weight.h != weight.w {
        return Err(Error::shape(op, format!("non-square kernel {weight}")));
    }
    if !input.c.is_multiple_of(p.groups) || !weight.n.is_multiple_of(p.groups) {
        return Err(Error::shape(
            op,
            format!(
                "channels in={} out={} not divisible by groups={}",
                input.c, weight.n, p.groups
            ),
        ));
    }
    if weight.c * p.groups != input.c {
        return Err(Error::shape(
            op,
            format!(
                "weight {weight} expects {} input channels, input has {}",
                weight.c * p.groups,
                input.c
            ),
        ));
    }
    let k = weight.h;
    let h = conv_out_size(input.h, k, p.stride, p.pad)
        .ok_or_else(|| Error::shape(op, format!("kernel {k} larger than padded input {input}")))?;
    let w = conv_out_size(input.w, k, p.stride, p.pad)
        .ok_or_else(|| Error::shape(op, format!("kernel {k} larger than padded input {input}")))?;
    Ok(Shape::new(input.n, weight.n, h, w))
}

/// Cross-correlation with zero padding. `weight` is `[cout, cin/groups, k, k]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    p: Conv2dParams,
) -> Result<Tensor> {
    let is = input.shape();
    let ws = weight.shape();
    let os = conv2d_shape(is, ws, p)?;
    if let Some(b) = bias {
        if b.len() != os.c {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != output channels {}", b.len(), os.c),
            ));
        }
    }
    let cin_g = is.c / p.groups;
    let cout_g = os.c / p.groups;
    let mut out = vec![0.0f32; os.numel()];

    if cin_g == 1 && cout_g == 1 {
        depthwise(input, weight, p, os, &mut out);
    } else {
        let k = ws.h;
        let kk = cin_g * k * k;
        let hw_out = os.plane();
        let hw_in = is.plane();
        for n in 0..is.n {
            for g in 0..p.groups {
                let in_off = (n * is.c + g * cin_g) * hw_in;
                let src = &input.data()[in_off..in_off + cin_g * hw_in];
                let wmat = &weight.data()[g * cout_g * kk..(g + 1) * cout_g * kk];
                let out_off = (n * os.c + g * cout_g) * hw_out;
                let dst = &mut out[out_off..out_off + cout_g * hw_out];
                let pointwise = k == 1 && p.stride == 1 && p.pad == 0;
                let chunks: Vec<(usize, Vec<f32>)> = (0..hw_out)
                    .step_by(COL_CHUNK)
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|start| {
                        let len = COL_CHUNK.min(hw_out - start);
                        let mut local = vec![0.0f32; cout_g * len];
                        if pointwise {
                            // Input plane is already the column matrix.
                            gemm(cout_g, kk, len, wmat, &src[start..], hw_in, &mut local);
                        } else {
                            let col = im2col(src, cin_g, is.h, is.w, k, p, os.w, start, len);
                            gemm(cout_g, kk, len, wmat, &col, len, &mut local);
                        }
                        (start, local)
                    })
                    .collect();
                for (start, local) in chunks {
                    let len = local.len() / cout_g;
                    for co in 0..cout_g {
                        dst[co * hw_out + start..co * hw_out + start + len]
                            .copy_from_slice(&local[co * len..(co + 1) * len]);
                    }
                }
            }
        }
    }

    if let Some(b) = bias {
        let hw = os.plane();
        out.par_chunks_mut(hw).enumerate().for_each(|(i, plane)| {
            let bv = b[i % os.c];
            plane.iter_mut().for_each(|v| *v += bv);
        });
    }
    Tensor::new(os, out)?.checked("conv2d")
}

/// `c[m x n] = a[m x k] * b[k x n]` where `b` has row stride `ldb`.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], ldb: usize, c: &mut [f32]) {
    debug_assert!(a.len() >= m * k);
    debug_assert!(k == 0 || b.len() >= (k - 1) * ldb + n);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted extents cover every element addressed through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            ldb as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Column matrix `[cin*k*k, len]` for output positions `start..start+len`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    p: Conv2dParams,
    out_w: usize,
    start: usize,
    len: usize,
) -> Vec<f32> {
    let mut col = vec![0.0f32; cin * k * k * len];
    let (s, pad) = (p.stride as isize, p.pad as isize);
    for c in 0..cin {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * len;
                let dst = &mut col[row..row + len];
                for (j, d) in dst.iter_mut().enumerate() {
                    let pos = start + j;
                    let oy = (pos / out_w) as isize;
                    let ox = (pos % out_w) as isize;
                    let iy = oy * s - pad + ky as isize;
                    let ix = ox * s - pad + kx as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        *d = plane[iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

fn depthwise(input: &Tensor, weight: &Tensor, p: Conv2dParams, os: Shape, out: &mut [f32]) {
    let is = input.shape();
    let k = weight.shape().h;
    let (s, pad) = (p.stride as isize, p.pad as isize);
    let hw_out = os.plane();
    out.par_chunks_mut(hw_out).enumerate().for_each(|(i, plane)| {
        let n = i / os.c;
        let c = i % os.c;
        let src = input.plane(n, c);
        let ker = &weight.data()[c * k * k..(c + 1) * k * k];
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    let iy = oy as isize * s - pad + ky as isize;
                    if iy < 0 || iy as usize >= is.h {
                        continue;
                    }
                    let row = &src[iy as usize * is.w..(iy as usize + 1) * is.w];
                    for kx in 0..k {
                        let ix = ox as isize * s - pad + kx as isize;
                        if ix < 0 || ix as usize >= is.w {
                            continue;
                        }
                        acc += ker[ky * k + kx] * row[ix as usize];
                    }
                }
                plane[oy * os.w + ox] = acc;
            }
        }
    });
}

/// Inference-time batch normalization statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    /// γ=1, β=0, μ=0, σ²=1.
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let op = "batchnorm";
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if v.len() != channels {
                return Err(Error::shape(
                    op,
                    format!("{name} has {} entries for {channels} channels", v.len()),
                ));
            }
        }
        if self.var.iter().any(|&v| v < 0.0) {
            return Err(Error::shape(op, "negative running variance"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale*x + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| ((*g as f64) / ((*v as f64) + self.eps as f64).sqrt()) as f32)
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// `y = (x - mean) / sqrt(var + eps) * gamma + beta`, per channel.
pub fn batchnorm(input: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let s = input.shape();
    bn.validate(s.c)?;
    let mut out = input.clone();
    let hw = s.plane();
    out.data_mut()
        .par_chunks_mut(hw)
        .enumerate()
        .for_each(|(i, plane)| {
            let c = i % s.c;
            let denom = (bn.var[c] + bn.eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - bn.mean[c]) / denom * bn.gamma[c] + bn.beta[c];
            }
        });
    out.checked("batchnorm")
}

/// Folds `bn` into the preceding convolution so that
/// `conv(x, w', b') == bn(conv(x, w, b))`.
pub fn fold_batchnorm(
    weight: &Tensor,
    bias: Option<&[f32]>,
    bn: &BatchNorm,
) -> Result<(Tensor, Vec<f32>)> {
    let ws = weight.shape();
    bn.validate(ws.n)?;
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::shape("fold_batchnorm", "bias length mismatch"));
        }
    }
    let (scale, shift) = bn.affine();
    let per_out = ws.c * ws.h * ws.w;
    let mut w = weight.clone();
    for (o, chunk) in w.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[o]);
    }
    let b = (0..ws.n)
        .map(|o| bias.map_or(0.0, |b| b[o]) * scale[o] + shift[o])
        .collect();
    Ok((w.checked("fold_batchnorm")?, b))
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `x * sigmoid(x)`, elementwise.
pub fn silu(input: &Tensor) -> Result<Tensor> {
    let mut out = input.clone();
    silu_inplace(&mut out);
    out.checked("silu")
}

pub(crate) fn silu_inplace(t: &mut Tensor) {
    t.data_mut()
        .par_chunks_mut(COL_CHUNK)
        .for_each(|c| c.iter_mut().for_each(|v| *v = silu_scalar(*v)));
}

pub fn pool_out_shape(input: Shape, k: usize, stride: usize, pad: usize) -> Result<Shape> {
    let op = "maxpool";
    if pad * 2 > k {
        return Err(Error::shape(op, format!("pad {pad} exceeds half of kernel {k}")));
    }
    let h = conv_out_size(input.h, k, stride, pad)
        .ok_or_else(|| Error::shape(op, format!("window {k} does not fit {input}")))?;
    let w = conv_out_size(input.w, k, stride, pad)
        .ok_or_else(|| Error::shape(op, format!("window {k} does not fit {input}")))?;
    Ok(Shape::new(input.n, input.c, h, w))
}

/// Window maximum; padded positions never win.
pub fn maxpool(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let is = input.shape();
    let os = pool_out_shape(is, k, stride, pad)?;
    let mut out = vec![0.0f32; os.numel()];
    let (s, p) = (stride as isize, pad as isize);
    out.par_chunks_mut(os.plane())
        .enumerate()
        .for_each(|(i, plane)| {
            let src = input.plane(i / is.c, i % is.c);
            for oy in 0..os.h {
                let y0 = (oy as isize * s - p).max(0) as usize;
                let y1 = ((oy as isize * s - p + k as isize) as usize).min(is.h);
                for ox in 0..os.w {
                    let x0 = (ox as isize * s - p).max(0) as usize;
                    let x1 = ((ox as isize * s - p + k as isize) as usize).min(is.w);
                    let mut m = f32::NEG_INFINITY;
                    for y in y0..y1 {
                        for &v in &src[y * is.w + x0..y * is.w + x1] {
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    plane[oy * os.w + ox] = m;
                }
            }
        });
    Tensor::new(os, out)?.checked("maxpool")
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    let is = input.shape();
    let os = Shape::new(is.n, is.c, is.h * 2, is.w * 2);
    let mut out = vec![0.0f32; os.numel()];
    out.par_chunks_mut(os.plane())
        .enumerate()
        .for_each(|(i, plane)| {
            let src = input.plane(i / is.c, i % is.c);
            for y in 0..os.h {
                let row = &src[(y / 2) * is.w..(y / 2 + 1) * is.w];
                for (x, v) in plane[y * os.w..(y + 1) * os.w].iter_mut().enumerate() {
                    *v = row[x / 2];
                }
            }
        });
    Tensor::new(os, out)
}

/// Concatenates along channels; all inputs must agree on N, H and W.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?
        .shape();
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat",
                format!("cannot concatenate {s} with {first}"),
            ));
        }
    }
    let c: usize = inputs.iter().map(|t| t.shape().c).sum();
    let os = first.with_c(c);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for t in inputs {
            out.extend_from_slice(t.item(n));
        }
    }
    Tensor::new(os, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)?.checked("add")
}

/// Splits channels into two equal halves.
pub fn chunk2_channels(input: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = input.shape();
    if !s.c.is_multiple_of(2) {
        return Err(Error::shape("chunk2", format!("odd channel count {}", s.c)));
    }
    let half = s.c / 2;
    let hs = s.with_c(half);
    let len = half * s.plane();
    let mut a = Vec::with_capacity(hs.numel());
    let mut b = Vec::with_capacity(hs.numel());
    for n in 0..s.n {
        let item = input.item(n);
        a.extend_from_slice(&item[..len]);
        b.extend_from_slice(&item[len..]);
    }
    Ok((Tensor::new(hs, a)?, Tensor::new(hs, b)?))
}

/// Source channel for each output channel of a shuffle with `groups`.
///
/// Channels are viewed as `(groups, c/groups)`, transposed, and flattened, so
/// output `j` reads input `(j % groups) * (c/groups) + j / groups`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::shape(
            "channel_shuffle",
            format!("{channels} channels not divisible by {groups} groups"),
        ));
    }
    let per = channels / groups;
    Ok((0..channels).map(|j| (j % groups) * per + j / groups).collect())
}

pub fn channel_shuffle(input: &Tensor, groups: usize) -> Result<Tensor> {
    let s = input.shape();
    let perm = shuffle_permutation(s.c, groups)?;
    permute_channels(input, &perm)
}

/// Output channel `j` is input channel `perm[j]`.
pub fn permute_channels(input: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let s = input.shape();
    if perm.len() != s.c {
        return Err(Error::shape("permute_channels", "permutation length"));
    }
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for &src in perm {
            out.extend_from_slice(input.plane(n, src));
        }
    }
    Tensor::new(s, out)
}

/// Space-to-depth for the Focus layer: channel blocks are taken from
/// (even row, even col), (odd row, even col), (even row, odd col),
/// (odd row, odd col).
pub fn space_to_depth2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape("space_to_depth", format!("odd spatial dims {s}")));
    }
    let os = Shape::new(s.n, s.c * 4, s.h / 2, s.w / 2);
    let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
    Ok(Tensor::from_fn(os, |n, c, y, x| {
        let (dy, dx) = offsets[c / s.c];
        input.at(n, c % s.c, 2 * y + dy, 2 * x + dx)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(shape: Shape, rng: &mut Xoshiro256PlusPlus) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop convolution used as an oracle for the GEMM path.
    fn naive_conv(x: &Tensor, w: &Tensor, p: Conv2dParams) -> Tensor {
        let os = conv2d_shape(x.shape(), w.shape(), p).unwrap();
        let cin_g = x.shape().c / p.groups;
        let cout_g = os.c / p.groups;
        let k = w.shape().h;
        Tensor::from_fn(os, |n, co, oy, ox| {
            let g = co / cout_g;
            let mut acc = 0.0f64;
            for ci in 0..cin_g {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                        let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                        if iy < 0 || ix < 0 || iy as usize >= x.shape().h || ix as usize >= x.shape().w {
                            continue;
                        }
                        acc += x.at(n, g * cin_g + ci, iy as usize, ix as usize) as f64
                            * w.at(co, ci, ky, kx) as f64;
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = Tensor::from_vec([1, 1, 3, 3], w).unwrap();
        let y = conv2d(&x, &w, None, Conv2dParams::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_stride_two() {
        let x = Tensor::full(Shape::new(1, 1, 4, 4), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let y = conv2d(&x, &w, None, Conv2dParams::new(2, 0, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn size_formula_vga() {
        assert_eq!(conv_out_size(640, 3, 2, 1), Some(320));
        assert_eq!(conv_out_size(2, 5, 1, 1), None);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(Shape::new(4, 2, 3, 3));
        assert!(conv2d(&x, &w, None, Conv2dParams::new(1, 1, 1)).is_err());
        let w = Tensor::zeros(Shape::new(4, 1, 3, 3));
        assert!(conv2d(&x, &w, None, Conv2dParams::new(1, 1, 3)).is_err());
        let w = Tensor::zeros(Shape::new(3, 3, 3, 3));
        assert!(conv2d(&x, &w, Some(&[0.0; 2]), Conv2dParams::new(1, 1, 1)).is_err());
    }

    #[test]
    fn gemm_and_depthwise_paths_match_direct_loops() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let cases = [
            (3, 8, 9, 11, 3, 2, 1, 1),
            (4, 6, 7, 7, 1, 1, 0, 1),
            (4, 4, 8, 8, 3, 1, 1, 4),
            (6, 6, 9, 9, 3, 2, 1, 6),
            (4, 6, 5, 6, 3, 1, 1, 2),
            (2, 3, 70, 70, 3, 1, 1, 1),
        ];
        for (cin, cout, h, w, k, s, p, g) in cases {
            let x = random(Shape::new(2, cin, h, w), &mut rng);
            let wt = random(Shape::new(cout, cin / g, k, k), &mut rng);
            let params = Conv2dParams::new(s, p, g);
            let fast = conv2d(&x, &wt, None, params).unwrap();
            let slow = naive_conv(&x, &wt, params);
            assert!(fast.max_abs_diff(&slow) < 1e-4, "case {cin} {cout} {h} {w} {k} {s} {p} {g}");
        }
    }

    #[test]
    fn batchnorm_examples() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![3.0, -2.0]).unwrap();
        let id = BatchNorm::identity(1, 0.0);
        assert_eq!(batchnorm(&x, &id).unwrap(), x);
        let bn = BatchNorm {
            gamma: vec![2.0],
            beta: vec![1.0],
            mean: vec![1.0],
            var: vec![4.0],
            eps: 0.0,
        };
        assert_eq!(batchnorm(&x, &bn).unwrap().at(0, 0, 0, 0), 3.0);
        let bad = BatchNorm::identity(2, 1e-3);
        assert!(batchnorm(&x, &bad).is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(1.0) - 0.731_059).abs() < 1e-6);
        assert!(((silu_scalar(10.0) - 10.0) / 10.0).abs() < 1e-3);
    }

    #[test]
    fn maxpool_hand_windows() {
        let x = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let y = maxpool(&x, 3, 1, 1).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 5.0);
        let c = Tensor::full(Shape::new(1, 2, 20, 20), -3.5);
        for k in [3, 5, 7, 9, 13] {
            assert_eq!(maxpool(&c, k, 1, k / 2).unwrap(), c);
        }
    }

    #[test]
    fn maxpool_ceil_free_stride_two() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn shuffle_examples() {
        assert_eq!(shuffle_permutation(6, 2).unwrap(), vec![0, 3, 1, 4, 2, 5]);
        let p = shuffle_permutation(4, 2).unwrap();
        assert_eq!(p, vec![0, 2, 1, 3]);
        let twice: Vec<usize> = (0..4).map(|j| p[p[j]]).collect();
        assert_eq!(twice, vec![0, 1, 2, 3]);
        assert!(shuffle_permutation(5, 2).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn concat_and_chunk_are_inverse() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let a = random(Shape::new(2, 3, 4, 5), &mut rng);
        let b = random(Shape::new(2, 3, 4, 5), &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        let (a2, b2) = chunk2_channels(&cat).unwrap();
        assert_eq!((a, b), (a2, b2));
        let odd = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(chunk2_channels(&odd).is_err());
        let other = Tensor::zeros(Shape::new(1, 3, 2, 3));
        assert!(concat_channels(&[&odd, &other]).is_err());
    }

    #[test]
    fn space_to_depth_layout() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = space_to_depth2(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
