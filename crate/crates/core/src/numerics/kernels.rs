//! Pure tensor kernels. Every function here is deterministic and free of
//! shared state, so callers may run them from any number of threads.

use crate::error::{ensure, Error, Result};
use crate::numerics::tensor::{numel, Tensor};

/// Longest sequence the temporal positional table covers.
pub const TEMPORAL_MAX_LEN: usize = 24;

/// `c = alpha * a·b + beta * c` on strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that stay inside `a`, `b` and `c`;
    // callers derive them from the logical shapes checked above this call.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched matrix product over `[B, M, K] x [B, K, N]`. `trans_a` / `trans_b`
/// read the stored operand as `[B, K, M]` / `[B, N, K]` respectively.
pub fn bmm(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    ensure!(
        a.rank() == 3 && b.rank() == 3,
        Argument,
        "bmm expects rank-3 operands, got {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    let batch = a.shape()[0];
    ensure!(
        b.shape()[0] == batch,
        Argument,
        "bmm batch mismatch {} vs {}",
        batch,
        b.shape()[0]
    );
    let (m, ka) = if trans_a {
        (a.shape()[2], a.shape()[1])
    } else {
        (a.shape()[1], a.shape()[2])
    };
    let (kb, n) = if trans_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    ensure!(ka == kb, Argument, "bmm inner dimension {ka} vs {kb}");
    let k = ka;
    let sa = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let sb = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let mut out = vec![0.0f32; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..],
            sa,
            &b.data()[i * k * n..],
            sb,
            &mut out[i * m * n..(i + 1) * m * n],
            0.0,
        );
    }
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

fn softmax_rows_in_place(data: &mut [f32], row: usize) {
    for r in data.chunks_mut(row) {
        let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for v in r.iter_mut() {
            let e = (*v - max).exp() as f64;
            *v = e as f32;
            denom += e;
        }
        let inv = 1.0 / denom;
        for v in r.iter_mut() {
            *v = (*v as f64 * inv) as f32;
        }
    }
}

/// Softmax along the last axis.
pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let row = *x.shape().last().expect("rank >= 1");
    let mut data = x.data().to_vec();
    softmax_rows_in_place(&mut data, row);
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Softmax along `axis`, with max subtraction and an `f64` denominator.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    ensure!(
        axis < x.rank(),
        Argument,
        "axis {axis} invalid for rank {}",
        x.rank()
    );
    ensure!(x.is_finite(), Numeric, "softmax input is not finite");
    if axis + 1 == x.rank() {
        return Ok(softmax_last(x));
    }
    let mut perm: Vec<usize> = (0..x.rank()).filter(|&a| a != axis).collect();
    perm.push(axis);
    let moved = permute(x, &perm)?;
    let sm = softmax_last(&moved);
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    permute(&sm, &inverse)
}

/// `softmax(Q Kᵀ / √d) V` for `Q: [Lq, d]`, `K: [Lk, d]`, `V: [Lk, dv]`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    ensure!(
        q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
        Argument,
        "attention expects rank-2 inputs"
    );
    ensure!(
        q.shape()[1] == k.shape()[1],
        Argument,
        "query/key width {} vs {}",
        q.shape()[1],
        k.shape()[1]
    );
    ensure!(
        k.shape()[0] == v.shape()[0],
        Argument,
        "key/value rows {} vs {}",
        k.shape()[0],
        v.shape()[0]
    );
    let q3 = q.reshape(&[1, q.shape()[0], q.shape()[1]])?;
    let k3 = k.reshape(&[1, k.shape()[0], k.shape()[1]])?;
    let v3 = v.reshape(&[1, v.shape()[0], v.shape()[1]])?;
    let out = batched_attention(&q3, &k3, &v3)?;
    out.reshape(&[q.shape()[0], v.shape()[1]])
}

/// Batched form of [`scaled_dot_attention`] over `[B, L, d]` operands.
pub fn batched_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.shape()[2];
    let scores = bmm(q, k, false, true)?.scale(1.0 / (d as f32).sqrt());
    bmm(&softmax_last(&scores), v, false, false)
}

/// Output extent of a convolution along one axis; errors unless integral.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    ensure!(stride >= 1, Argument, "stride must be positive");
    ensure!(
        size + 2 * pad >= k,
        Argument,
        "padded extent {} smaller than kernel {k}",
        size + 2 * pad
    );
    let span = size + 2 * pad - k;
    ensure!(
        span % stride == 0,
        Argument,
        "extent {size} with kernel {k}, pad {pad}, stride {stride} is not integral"
    );
    Ok(span / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: conv_out_extent(h, k, stride, pad)?,
            w_out: conv_out_extent(w, k, stride, pad)?,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` is
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.w + p > kj {
            ((self.w + p - kj - 1) / s + 1).min(self.w_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (hw_out, k, s) = (self.col_cols(), self.k, self.stride);
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let x0 = lo * s + kj - self.pad;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                            } else {
                                for (i, d) in line[lo..hi].iter_mut().enumerate() {
                                    *d = src[x0 + i * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (hw_out, k, s) = (self.col_cols(), self.k, self.stride);
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = lo * s + kj - self.pad;
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.w_out + lo..oy * self.w_out + hi];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (i, &v) in line.iter().enumerate() {
                            dst[x0 + i * s] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    ensure!(x.rank() == 4, Argument, "conv input must be [B,C,H,W], got {:?}", x.shape());
    ensure!(w.rank() == 4, Argument, "conv weight must be [O,C,k,k], got {:?}", w.shape());
    let (c_in, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    ensure!(
        w.shape()[1] == c_in && w.shape()[2] == w.shape()[3],
        Argument,
        "conv weight {:?} incompatible with input channels {c_in}",
        w.shape()
    );
    ConvGeom::new(c_in, h, wd, w.shape()[2], stride, pad)
}

/// Batched zero-padded convolution `[B,Cin,H,W] * [Cout,Cin,k,k] (+ bias)`.
pub(crate) fn conv2d_batched(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geom(x, w, stride, pad)?;
    let (batch, c_out) = (x.shape()[0], w.shape()[0]);
    if let Some(b) = bias {
        ensure!(b.shape() == [c_out], Argument, "bias shape {:?}", b.shape());
    }
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let mut cols = vec![0.0f32; rows * cols_n];
    let mut out = vec![0.0f32; batch * c_out * cols_n];
    for bi in 0..batch {
        let dst = &mut out[bi * c_out * cols_n..(bi + 1) * c_out * cols_n];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(cols_n).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let src = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        if g.k == 1 && g.stride == 1 && g.pad == 0 {
            gemm(c_out, rows, cols_n, w.data(), (rows as isize, 1), src, (cols_n as isize, 1), dst, 1.0);
        } else {
            g.im2col(src, &mut cols);
            gemm(c_out, rows, cols_n, w.data(), (rows as isize, 1), &cols, (cols_n as isize, 1), dst, 1.0);
        }
    }
    Ok(Tensor::from_parts(vec![batch, c_out, g.h_out, g.w_out], out))
}

/// Gradients of [`conv2d_batched`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geom(x, w, stride, pad)?;
    let (batch, c_out) = (x.shape()[0], w.shape()[0]);
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let mut cols = vec![0.0f32; rows * cols_n];
    let mut dcols = vec![0.0f32; rows * cols_n];
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f64; c_out];
    for bi in 0..batch {
        let dyb = &dy.data()[bi * c_out * cols_n..(bi + 1) * c_out * cols_n];
        for (o, chunk) in dyb.chunks(cols_n).enumerate() {
            db[o] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        let src = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
        let colsref: &[f32] = if direct {
            src
        } else {
            g.im2col(src, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(c_out, cols_n, rows, dyb, (cols_n as isize, 1), colsref, (1, cols_n as isize), &mut dw, 1.0);
        let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
        if direct {
            gemm(rows, c_out, cols_n, w.data(), (1, rows as isize), dyb, (cols_n as isize, 1), dxb, 0.0);
        } else {
            gemm(rows, c_out, cols_n, w.data(), (1, rows as isize), dyb, (cols_n as isize, 1), &mut dcols, 0.0);
            g.col2im(&dcols, dxb);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![c_out], db.into_iter().map(|v| v as f32).collect()),
    ))
}

/// Single-image convolution `[Cin,H,W] * [Cout,Cin,k,k] -> [Cout,H',W']`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    ensure!(x.rank() == 3, Argument, "conv2d expects [C,H,W], got {:?}", x.shape());
    let s = x.shape();
    let x4 = x.reshape(&[1, s[0], s[1], s[2]])?;
    let y = conv2d_batched(&x4, w, None, stride, pad)?;
    let ys = y.shape().to_vec();
    y.reshape(&ys[1..])?.check_finite("conv2d")
}

/// Angle-pair encoding of an arbitrary (possibly fractional) position.
pub(crate) fn sinusoid_row(position: f64, dim: usize) -> Vec<f32> {
    let mut row = vec![0.0f32; dim];
    for k in 0..dim / 2 {
        let angle = position / 10000f64.powf(2.0 * k as f64 / dim as f64);
        row[2 * k] = angle.sin() as f32;
        row[2 * k + 1] = angle.cos() as f32;
    }
    row
}

/// Sinusoidal encoding of a frame position inside a motion module, bounded
/// by the positional table length `max_len`.
pub fn sinusoidal_encoding_bounded(position: usize, dim: usize, max_len: usize) -> Result<Tensor> {
    ensure!(dim >= 2 && dim % 2 == 0, Argument, "encoding width {dim} must be even");
    ensure!(
        position < max_len,
        Range,
        "position {position} outside positional table of length {max_len}"
    );
    Ok(Tensor::from_parts(vec![dim], sinusoid_row(position as f64, dim)))
}

/// [`sinusoidal_encoding_bounded`] with the default 24-entry table.
pub fn sinusoidal_encoding(position: usize, dim: usize) -> Result<Tensor> {
    sinusoidal_encoding_bounded(position, dim, TEMPORAL_MAX_LEN)
}

/// General axis permutation.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    ensure!(perm.len() == rank, Argument, "permutation {perm:?} for rank {rank}");
    let mut seen = vec![false; rank];
    for &p in perm {
        ensure!(p < rank && !seen[p], Argument, "invalid permutation {perm:?}");
        seen[p] = true;
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * in_shape[a + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(&out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let src = x.data();
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    let mut base = 0usize;
    while out.len() < n {
        for j in 0..last_len {
            out.push(src[base + j * last_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut a = last;
        loop {
            if a == 0 {
                break;
            }
            a -= 1;
            idx[a] += 1;
            base += strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            base -= strides[a] * idx[a];
            idx[a] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Group normalization over `[B, C, ...]` with per-channel affine terms.
/// Returns the output with the per-(batch, group) mean and inverse std.
pub(crate) fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    ensure!(x.rank() >= 2, Argument, "group norm needs [B, C, ...]");
    let (batch, c) = (x.shape()[0], x.shape()[1]);
    ensure!(groups >= 1 && c % groups == 0, Argument, "{c} channels not divisible into {groups} groups");
    ensure!(gamma.shape() == [c] && beta.shape() == [c], Argument, "affine shape mismatch");
    let spatial = x.len() / (batch * c);
    let cg = c / groups;
    let span = cg * spatial;
    let mut out = vec![0.0f32; x.len()];
    let mut means = Vec::with_capacity(batch * groups);
    let mut rstds = Vec::with_capacity(batch * groups);
    for (gi, chunk) in x.data().chunks(span).enumerate() {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / span as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        means.push(mean);
        rstds.push(rstd);
        let g = gi % groups;
        for (ci, ch) in chunk.chunks(spatial).enumerate() {
            let cc = g * cg + ci;
            let (ga, be) = (gamma.data()[cc] as f64, beta.data()[cc] as f64);
            let dst = &mut out[gi * span + ci * spatial..gi * span + (ci + 1) * spatial];
            for (d, &v) in dst.iter_mut().zip(ch) {
                *d = (((v as f64 - mean) * rstd) * ga + be) as f32;
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), means, rstds))
}

pub(crate) fn group_norm_backward(
    x: &Tensor,
    dy: &Tensor,
    groups: usize,
    gamma: &Tensor,
    means: &[f64],
    rstds: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (batch, c) = (x.shape()[0], x.shape()[1]);
    let spatial = x.len() / (batch * c);
    let cg = c / groups;
    let span = cg * spatial;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for gi in 0..batch * groups {
        let g = gi % groups;
        let (mean, rstd) = (means[gi], rstds[gi]);
        let xs = &x.data()[gi * span..(gi + 1) * span];
        let dys = &dy.data()[gi * span..(gi + 1) * span];
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for i in 0..span {
            let cc = g * cg + i / spatial;
            let xhat = (xs[i] as f64 - mean) * rstd;
            let d = dys[i] as f64;
            dgamma[cc] += d * xhat;
            dbeta[cc] += d;
            let dxhat = d * gamma.data()[cc] as f64;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let m = span as f64;
        for i in 0..span {
            let cc = g * cg + i / spatial;
            let xhat = (xs[i] as f64 - mean) * rstd;
            let dxhat = dys[i] as f64 * gamma.data()[cc] as f64;
            dx[gi * span + i] = (rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)) as f32;
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], to32(dgamma)),
        Tensor::from_parts(vec![c], to32(dbeta)),
    )
}

/// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
pub(crate) fn upsample2x(x: &Tensor) -> Result<Tensor> {
    ensure!(x.rank() == 4, Argument, "upsample expects [B,C,H,W]");
    let (bc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![0.0f32; bc * 4 * h * w];
    for p in 0..bc {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    let s = x.shape();
    Ok(Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out))
}

pub(crate) fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let s = dy.shape();
    let (bc, h2, w2) = (s[0] * s[1], s[2], s[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0f32; bc * h * w];
    for p in 0..bc {
        let src = &dy.data()[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                out[p * h * w + (y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], h, w], out)
}

pub(crate) fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub(crate) fn silu_grad(v: f32) -> f32 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// Sums a rank-2 tensor over its rows, `[M, N] -> [N]`.
pub(crate) fn sum_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut acc = vec![0.0f64; n];
    for row in x.data().chunks(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Tensor::from_parts(vec![n], acc.into_iter().map(|v| v as f32).collect())
}

/// Error for kernels that encounter NaN/Inf.
pub(crate) fn non_finite(what: &str) -> Error {
    Error::Numeric(format!("{what} produced a non-finite value"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[0.0, 3f32.ln()]), 0).unwrap();
        // e^x / Σe^x evaluated by hand: 1/(1+3), 3/(1+3)
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
        let x = t(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 1.5, -0.5]);
        let shifted = x.map(|v| v + 7.25);
        assert_eq!(softmax(&x, 1).unwrap(), softmax(&shifted, 1).unwrap());
    }

    #[test]
    fn softmax_other_axis_and_errors() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(softmax(&x, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn attention_examples() {
        // single key: every output row is the lone value row
        let q = t(&[3, 2], &[1.0, -1.0, 0.5, 2.0, -3.0, 0.0]);
        let k = t(&[1, 2], &[0.3, 0.7]);
        let v = t(&[1, 2], &[4.0, -5.0]);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in o.data().chunks(2) {
            assert_eq!(row, &[4.0, -5.0]);
        }
        // identical keys give the column mean of V
        let k = t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let v = t(&[3, 2], &[1.0, 0.0, 2.0, 3.0, 6.0, 3.0]);
        let o = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in o.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-6 && (row[1] - 2.0).abs() < 1e-6);
        }
        // hand-rolled scalar oracle
        let q = t(&[1, 2], &[1.0, 0.0]);
        let kv = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let o = scaled_dot_attention(&q, &kv, &kv).unwrap();
        let s0 = (1.0f64 / 2f64.sqrt()).exp();
        let s1 = 1.0f64;
        let expect = [s0 / (s0 + s1), s1 / (s0 + s1)];
        assert!((o.data()[0] as f64 - expect[0]).abs() < 1e-6);
        assert!((o.data()[1] as f64 - expect[1]).abs() < 1e-6);
        assert!(scaled_dot_attention(&q, &t(&[2, 3], &[0.0; 6]), &kv).is_err());
        assert!(scaled_dot_attention(&q, &kv, &t(&[3, 2], &[0.0; 6])).is_err());
    }

    #[test]
    fn conv2d_examples() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| i as f32 * 0.1);
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        w[3] = 1.0;
        let id = conv2d(&x, &t(&[2, 2, 1, 1], &w), 1, 0).unwrap();
        assert_eq!(id, x);
        let z = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), 1, 1).unwrap();
        assert_eq!(z.shape(), &[3, 4, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let y = conv2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), &Tensor::ones(&[1, 1, 2, 2]), 1, 0)
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
        // (4 + 2 - 3) / 2 is not integral
        assert!(conv2d(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 1, 3, 3]), 2, 1).is_err());
    }

    #[test]
    fn conv2d_matches_direct_summation() {
        let x = Tensor::from_fn(&[2, 5, 6], |i| ((i * 7919) % 23) as f32 / 11.0 - 1.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 104729) % 17) as f32 / 8.0 - 1.0);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        for o in 0..3 {
            for r in 0..5 {
                for c in 0..6 {
                    let mut acc = 0.0f64;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (iy, ix) = (r as isize + ki as isize - 1, c as isize + kj as isize - 1);
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 6 {
                                    continue;
                                }
                                acc += x.data()[ci * 30 + iy as usize * 6 + ix as usize] as f64
                                    * w.data()[((o * 2 + ci) * 3 + ki) * 3 + kj] as f64;
                            }
                        }
                    }
                    assert!((y.data()[o * 30 + r * 6 + c] as f64 - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn sinusoidal_examples() {
        let e = sinusoidal_encoding(0, 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_encoding(1, 8).unwrap();
        assert!((e.data()[0] - 0.84147).abs() < 1e-5);
        for p in 0..TEMPORAL_MAX_LEN {
            let e = sinusoidal_encoding(p, 16).unwrap();
            assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(matches!(sinusoidal_encoding(24, 8), Err(Error::Range(_))));
        assert!(sinusoidal_encoding(0, 7).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k][i][j] = x[i][j][k]
        assert_eq!(p.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let back = permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back, x);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f32..30.0, 1..48), cols in 1usize..8) {
            let rows = v.len() / cols;
            prop_assume!(rows > 0);
            let x = Tensor::new(&[rows, cols], v[..rows * cols].to_vec()).unwrap();
            let s = softmax(&x, 1).unwrap();
            for r in s.data().chunks(cols) {
                let total: f64 = r.iter().map(|&p| p as f64).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                prop_assert!(r.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn attention_with_identity_values_is_row_stochastic(
            q in proptest::collection::vec(-3.0f32..3.0, 12),
            k in proptest::collection::vec(-3.0f32..3.0, 12),
        ) {
            let q = Tensor::new(&[3, 4], q).unwrap();
            let k = Tensor::new(&[3, 4], k).unwrap();
            let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
            let a = scaled_dot_attention(&q, &k, &eye).unwrap();
            for r in a.data().chunks(3) {
                let total: f64 = r.iter().map(|&p| p as f64).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn kernels_are_deterministic(v in proptest::collection::vec(-2.0f32..2.0, 32)) {
            let x = Tensor::new(&[2, 4, 4], v).unwrap();
            let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f32 * 0.37).sin());
            let a = conv2d(&x, &w, 1, 1).unwrap();
            let b = conv2d(&x, &w, 1, 1).unwrap();
            prop_assert!(a.bit_eq(&b));
        }
    }
}
