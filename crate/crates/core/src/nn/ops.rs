//! Forward and backward kernels for the layer kinds used by both networks.
//!
//! Layouts: images are `C×H×W`, batches are `B×F`, dense weights `F_out×F_in`,
//! conv weights `C_out×C_in×3×3`. Everything is row-major `f32`.

use crate::error::{dim_err, Result};
use crate::par;
use crate::tensor::Tensor;

/// Row-chunk size for splitting matrix products across workers.
const GEMM_ROW_CHUNK: usize = 32;
/// Below this many multiply-adds a product runs on the calling thread.
const GEMM_PAR_THRESHOLD: usize = 1 << 20;

/// Strided matrix view: element (i, j) lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c (m×n, row-major) = beta·c + a (m×k) · b (k×n)`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], beta: f32) {
    debug_assert_eq!(c.len(), m * n);
    let run = |row0: usize, c_chunk: &mut [f32]| {
        let rows = c_chunk.len() / n;
        if rows == 0 {
            return;
        }
        // SAFETY: all strides address within the slices, which outlive the call;
        // `c_chunk` is exclusively borrowed.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().add(row0 * a.rs),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n < GEMM_PAR_THRESHOLD || m <= GEMM_ROW_CHUNK {
        run(0, c);
    } else {
        par::for_each_chunk_mut(c, GEMM_ROW_CHUNK * n, |ci, chunk| {
            run(ci * GEMM_ROW_CHUNK, chunk)
        });
    }
}

fn image_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(dim_err!("{what}: expected C×H×W, got {:?}", t.shape())),
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(dim_err!("{what}: expected 2-d tensor, got {:?}", t.shape())),
    }
}

/// Unfold a `C×H×W` image into a `(C·9)×(H·W)` patch matrix with zero padding.
pub(crate) fn im2col3x3(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut col = vec![0.0f32; c * 9 * hw];
    par::for_each_chunk_mut(&mut col, 9 * hw, |ch, block| {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut block[(ky * 3 + kx) * hw..(ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    });
    col
}

/// Adjoint of [`im2col3x3`]: fold a patch-gradient matrix back onto the image.
pub(crate) fn col2im3x3(col: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    par::for_each_chunk_mut(&mut out, hw, |ch, plane| {
        let block = &col[ch * 9 * hw..(ch + 1) * 9 * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &block[(ky * 3 + kx) * hw..(ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    });
    out
}

fn check_conv(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = image_dims(input, "conv2d input")?;
    let (o, wc, kh, kw) = match *weights.shape() {
        [o, wc, kh, kw] => (o, wc, kh, kw),
        _ => return Err(dim_err!("conv2d weights: expected 4-d, got {:?}", weights.shape())),
    };
    if kh != 3 || kw != 3 {
        return Err(dim_err!("conv2d kernel must be 3×3, got {kh}×{kw}"));
    }
    if wc != c {
        return Err(dim_err!("conv2d weights expect {wc} input channels, input has {c}"));
    }
    bias.expect_shape(&[o], "conv2d bias")?;
    Ok((o, c, h, w))
}

fn add_row_bias(out: &mut [f32], bias: &[f32], cols: usize) {
    for (row, &b) in out.chunks_mut(cols).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

/// 3×3 same-padded convolution.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (o, c, h, w) = check_conv(input, weights, bias)?;
    let hw = h * w;
    let col = im2col3x3(input.data(), c, h, w);
    let mut out = vec![0.0f32; o * hw];
    gemm(
        o,
        c * 9,
        hw,
        MatRef::row_major(weights.data(), c * 9),
        MatRef::row_major(&col, hw),
        &mut out,
        0.0,
    );
    add_row_bias(&mut out, bias.data(), hw);
    Tensor::new(vec![o, h, w], out)
}

/// Gradients of [`conv2d_forward`]: `(d_input, d_weights, d_bias)`.
/// `d_input` is skipped when `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (c, h, w) = image_dims(input, "conv2d input")?;
    let o = weights.shape()[0];
    d_out.expect_shape(&[o, h, w], "conv2d output gradient")?;
    let hw = h * w;
    let col = im2col3x3(input.data(), c, h, w);
    let mut dw = vec![0.0f32; o * c * 9];
    gemm(
        o,
        hw,
        c * 9,
        MatRef::row_major(d_out.data(), hw),
        MatRef::transposed(&col, hw),
        &mut dw,
        0.0,
    );
    let db: Vec<f32> = d_out
        .data()
        .chunks(hw)
        .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let d_in = if need_input {
        let mut dcol = vec![0.0f32; c * 9 * hw];
        gemm(
            c * 9,
            o,
            hw,
            MatRef::transposed(weights.data(), c * 9),
            MatRef::row_major(d_out.data(), hw),
            &mut dcol,
            0.0,
        );
        Some(Tensor::new(vec![c, h, w], col2im3x3(&dcol, c, h, w))?)
    } else {
        None
    };
    Ok((d_in, Tensor::new(weights.shape().to_vec(), dw)?, Tensor::new(vec![o], db)?))
}

/// Per-pixel channel mixing (1×1 convolution) with weights `C_out×C_in`.
pub fn pointwise_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims(input, "pointwise input")?;
    let (o, wc) = matrix_dims(weights, "pointwise weights")?;
    if wc != c {
        return Err(dim_err!("pointwise weights expect {wc} channels, input has {c}"));
    }
    bias.expect_shape(&[o], "pointwise bias")?;
    let hw = h * w;
    let mut out = vec![0.0f32; o * hw];
    gemm(
        o,
        c,
        hw,
        MatRef::row_major(weights.data(), c),
        MatRef::row_major(input.data(), hw),
        &mut out,
        0.0,
    );
    add_row_bias(&mut out, bias.data(), hw);
    Tensor::new(vec![o, h, w], out)
}

pub fn pointwise_backward(
    input: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (c, h, w) = image_dims(input, "pointwise input")?;
    let o = weights.shape()[0];
    d_out.expect_shape(&[o, h, w], "pointwise output gradient")?;
    let hw = h * w;
    let mut dw = vec![0.0f32; o * c];
    gemm(
        o,
        hw,
        c,
        MatRef::row_major(d_out.data(), hw),
        MatRef::transposed(input.data(), hw),
        &mut dw,
        0.0,
    );
    let db: Vec<f32> = d_out
        .data()
        .chunks(hw)
        .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let d_in = if need_input {
        let mut di = vec![0.0f32; c * hw];
        gemm(
            c,
            o,
            hw,
            MatRef::transposed(weights.data(), c),
            MatRef::row_major(d_out.data(), hw),
            &mut di,
            0.0,
        );
        Some(Tensor::new(vec![c, h, w], di)?)
    } else {
        None
    };
    Ok((d_in, Tensor::new(vec![o, c], dw)?, Tensor::new(vec![o], db)?))
}

/// Affine map applied to every row: `B×F_in → B×F_out`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, f_in) = matrix_dims(input, "dense input")?;
    let (f_out, w_in) = matrix_dims(weights, "dense weights")?;
    if w_in != f_in {
        return Err(dim_err!("dense weights expect {w_in} features, input has {f_in}"));
    }
    bias.expect_shape(&[f_out], "dense bias")?;
    let mut out = vec![0.0f32; b * f_out];
    gemm(
        b,
        f_in,
        f_out,
        MatRef::row_major(input.data(), f_in),
        MatRef::transposed(weights.data(), f_in),
        &mut out,
        0.0,
    );
    for row in out.chunks_mut(f_out) {
        row.iter_mut().zip(bias.data()).for_each(|(v, &bb)| *v += bb);
    }
    Tensor::new(vec![b, f_out], out)
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (b, f_in) = matrix_dims(input, "dense input")?;
    let f_out = weights.shape()[0];
    d_out.expect_shape(&[b, f_out], "dense output gradient")?;
    let mut dw = vec![0.0f32; f_out * f_in];
    gemm(
        f_out,
        b,
        f_in,
        MatRef::transposed(d_out.data(), f_out),
        MatRef::row_major(input.data(), f_in),
        &mut dw,
        0.0,
    );
    let mut db = vec![0.0f64; f_out];
    for row in d_out.data().chunks(f_out) {
        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g as f64);
    }
    let d_in = if need_input {
        let mut di = vec![0.0f32; b * f_in];
        gemm(
            b,
            f_out,
            f_in,
            MatRef::row_major(d_out.data(), f_out),
            MatRef::row_major(weights.data(), f_in),
            &mut di,
            0.0,
        );
        Some(Tensor::new(vec![b, f_in], di)?)
    } else {
        None
    };
    Ok((
        d_in,
        Tensor::new(vec![f_out, f_in], dw)?,
        Tensor::new(vec![f_out], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gradient of ReLU; the derivative at exactly 0 is taken as 0.
pub fn relu_backward(input: &Tensor, d_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu gradient shape")
}

/// Width of the attention hidden vector.
pub const ATTN_WIDTH: usize = 64;
/// Tokens per hidden vector.
pub const ATTN_TOKENS: usize = 8;
/// Dimensions per token.
pub const ATTN_DIM: usize = 8;

fn check_attention(input: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<usize> {
    let (b, f) = matrix_dims(input, "self-attention input")?;
    if f != ATTN_WIDTH {
        return Err(dim_err!("self-attention needs width {ATTN_WIDTH}, got {f}"));
    }
    for (w, name) in [(wq, "query"), (wk, "key"), (wv, "value")] {
        w.expect_shape(&[ATTN_DIM, ATTN_DIM], name)?;
    }
    Ok(b)
}

/// Project every token of `x` (tokens × dims) with `w` (dims_out × dims_in).
fn project(x: &[f32], w: &[f32], out: &mut [f32]) {
    for t in 0..ATTN_TOKENS {
        let xt = &x[t * ATTN_DIM..(t + 1) * ATTN_DIM];
        for o in 0..ATTN_DIM {
            let wr = &w[o * ATTN_DIM..(o + 1) * ATTN_DIM];
            out[t * ATTN_DIM + o] = xt.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
}

struct AttnRow {
    q: [f32; ATTN_WIDTH],
    k: [f32; ATTN_WIDTH],
    v: [f32; ATTN_WIDTH],
    p: [f32; ATTN_TOKENS * ATTN_TOKENS],
}

fn attention_row(x: &[f32], wq: &[f32], wk: &[f32], wv: &[f32]) -> AttnRow {
    let mut r = AttnRow {
        q: [0.0; ATTN_WIDTH],
        k: [0.0; ATTN_WIDTH],
        v: [0.0; ATTN_WIDTH],
        p: [0.0; ATTN_TOKENS * ATTN_TOKENS],
    };
    project(x, wq, &mut r.q);
    project(x, wk, &mut r.k);
    project(x, wv, &mut r.v);
    let scale = 1.0 / (ATTN_DIM as f32).sqrt();
    for i in 0..ATTN_TOKENS {
        let qi = &r.q[i * ATTN_DIM..(i + 1) * ATTN_DIM];
        let row = &mut r.p[i * ATTN_TOKENS..(i + 1) * ATTN_TOKENS];
        for (j, v) in row.iter_mut().enumerate() {
            let kj = &r.k[j * ATTN_DIM..(j + 1) * ATTN_DIM];
            *v = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        row.iter_mut().for_each(|s| *s /= z);
    }
    r
}

/// Single-head scaled dot-product self-attention over 8 tokens of 8 dims,
/// with a residual connection: `y = x + softmax(QKᵀ/√8)·V`.
pub fn self_attention_forward(input: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    check_attention(input, wq, wk, wv)?;
    let mut out = input.data().to_vec();
    par::for_each_chunk_mut(&mut out, ATTN_WIDTH, |b, y| {
        let x = &input.data()[b * ATTN_WIDTH..(b + 1) * ATTN_WIDTH];
        let r = attention_row(x, wq.data(), wk.data(), wv.data());
        for i in 0..ATTN_TOKENS {
            for d in 0..ATTN_DIM {
                let mut acc = 0.0;
                for j in 0..ATTN_TOKENS {
                    acc += r.p[i * ATTN_TOKENS + j] * r.v[j * ATTN_DIM + d];
                }
                y[i * ATTN_DIM + d] += acc;
            }
        }
    });
    Tensor::new(input.shape().to_vec(), out)
}

/// Gradients of [`self_attention_forward`]: `(d_input, d_wq, d_wk, d_wv)`.
pub fn self_attention_backward(
    input: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let b = check_attention(input, wq, wk, wv)?;
    d_out.expect_shape(input.shape(), "self-attention output gradient")?;
    const WW: usize = ATTN_DIM * ATTN_DIM;
    // Per-row: d_input (64) followed by this row's weight-gradient contributions (3×64).
    let stride = ATTN_WIDTH + 3 * WW;
    let mut scratch = vec![0.0f32; b * stride];
    let scale = 1.0 / (ATTN_DIM as f32).sqrt();
    par::for_each_chunk_mut(&mut scratch, stride, |row, buf| {
        let x = &input.data()[row * ATTN_WIDTH..(row + 1) * ATTN_WIDTH];
        let dy = &d_out.data()[row * ATTN_WIDTH..(row + 1) * ATTN_WIDTH];
        let r = attention_row(x, wq.data(), wk.data(), wv.data());
        let mut dp = [0.0f32; ATTN_TOKENS * ATTN_TOKENS];
        let mut dv = [0.0f32; ATTN_WIDTH];
        for i in 0..ATTN_TOKENS {
            for j in 0..ATTN_TOKENS {
                let mut acc = 0.0;
                for d in 0..ATTN_DIM {
                    acc += dy[i * ATTN_DIM + d] * r.v[j * ATTN_DIM + d];
                    dv[j * ATTN_DIM + d] += r.p[i * ATTN_TOKENS + j] * dy[i * ATTN_DIM + d];
                }
                dp[i * ATTN_TOKENS + j] = acc;
            }
        }
        let mut ds = [0.0f32; ATTN_TOKENS * ATTN_TOKENS];
        for i in 0..ATTN_TOKENS {
            let pr = &r.p[i * ATTN_TOKENS..(i + 1) * ATTN_TOKENS];
            let dpr = &dp[i * ATTN_TOKENS..(i + 1) * ATTN_TOKENS];
            let dot: f32 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for j in 0..ATTN_TOKENS {
                ds[i * ATTN_TOKENS + j] = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        let mut dq = [0.0f32; ATTN_WIDTH];
        let mut dk = [0.0f32; ATTN_WIDTH];
        for i in 0..ATTN_TOKENS {
            for j in 0..ATTN_TOKENS {
                let s = ds[i * ATTN_TOKENS + j];
                for d in 0..ATTN_DIM {
                    dq[i * ATTN_DIM + d] += s * r.k[j * ATTN_DIM + d];
                    dk[j * ATTN_DIM + d] += s * r.q[i * ATTN_DIM + d];
                }
            }
        }
        let (dx, dws) = buf.split_at_mut(ATTN_WIDTH);
        dx.copy_from_slice(dy);
        for (slot, (dproj, w)) in [(&dq, wq), (&dk, wk), (&dv, wv)].into_iter().enumerate() {
            let dw = &mut dws[slot * WW..(slot + 1) * WW];
            for t in 0..ATTN_TOKENS {
                let xt = &x[t * ATTN_DIM..(t + 1) * ATTN_DIM];
                for o in 0..ATTN_DIM {
                    let g = dproj[t * ATTN_DIM + o];
                    let wr = &w.data()[o * ATTN_DIM..(o + 1) * ATTN_DIM];
                    for i in 0..ATTN_DIM {
                        dx[t * ATTN_DIM + i] += g * wr[i];
                        dw[o * ATTN_DIM + i] += g * xt[i];
                    }
                }
            }
        }
    });
    let mut d_in = Vec::with_capacity(b * ATTN_WIDTH);
    let mut dw = [vec![0.0f64; WW], vec![0.0f64; WW], vec![0.0f64; WW]];
    for buf in scratch.chunks(stride) {
        d_in.extend_from_slice(&buf[..ATTN_WIDTH]);
        for (slot, acc) in dw.iter_mut().enumerate() {
            let src = &buf[ATTN_WIDTH + slot * WW..ATTN_WIDTH + (slot + 1) * WW];
            acc.iter_mut().zip(src).for_each(|(a, &g)| *a += g as f64);
        }
    }
    let [dwq, dwk, dwv] = dw.map(|v| {
        Tensor::new(vec![ATTN_DIM, ATTN_DIM], v.into_iter().map(|x| x as f32).collect())
            .expect("attention weight gradient")
    });
    Ok((Tensor::new(vec![b, ATTN_WIDTH], d_in)?, dwq, dwk, dwv))
}
