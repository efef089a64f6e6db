//! Dense, depthwise and transposed 2-D convolutions (forward and backward).
//!
//! Dense convolutions lower to `im2col` + GEMM per batch item. Work is split
//! over batch items and fixed-size output-channel blocks, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Output channels handled by one parallel task.
const CHANNEL_BLOCK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// `out = ceil(in / stride)`, zero padding split with the extra pixel on
    /// the bottom/right.
    Same,
    Valid,
}

/// Geometry of a convolution mapping `in_c×in_h×in_w` to `out_c×out_h×out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_pad(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel {kernel} and stride {stride} must be positive"
            )));
        }
        if in_h == 0 || in_w == 0 || in_c == 0 || out_c == 0 {
            return Err(dim_err(
                "conv2d",
                format!("non-positive dims: input {in_c}×{in_h}×{in_w}, out channels {out_c}"),
            ));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let (oh, pt) = same_pad(in_h, kernel, stride);
                let (ow, pl) = same_pad(in_w, kernel, stride);
                (oh, ow, pt, pl)
            }
            Padding::Valid => {
                if kernel > in_h || kernel > in_w {
                    return Err(dim_err(
                        "conv2d",
                        format!("kernel {kernel} exceeds valid input {in_h}×{in_w}"),
                    ));
                }
                (
                    (in_h - kernel) / stride + 1,
                    (in_w - kernel) / stride + 1,
                    0,
                    0,
                )
            }
        };
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kernel,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Geometry with explicit symmetric padding.
    #[allow(clippy::too_many_arguments)]
    pub fn padded(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(dim_err(
                "conv2d",
                format!("kernel {kernel}, stride {stride}, pad {pad} on {in_h}×{in_w}"),
            ));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
            kernel,
            stride,
            pad_top: pad,
            pad_left: pad,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_pixels()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Source coordinate for output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let p = (o * stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    }
}

/// Unfold one `in_c×in_h×in_w` image into a `(in_c·k·k)×(out_h·out_w)` matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let k = g.kernel;
    let p = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match ConvGeom::src(oy, ky, g.stride, g.pad_top, g.in_h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match ConvGeom::src(ox, kx, g.stride, g.pad_left, g.in_w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im<T: Element>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let k = g.kernel;
    let p = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.in_h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.in_w) {
                            dst[ix] = dst[ix] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_vec<T: Element>(op: &'static str, what: &str, v: &[T], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(dim_err(
            op,
            format!("{what} has {} entries, expected {len}", v.len()),
        ));
    }
    Ok(())
}

/// Dense convolution. `weight` is `out×in×k×k`.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, ConvGeom)> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.c != xs.c {
        return Err(dim_err(
            "conv2d",
            format!(
                "weight input channels (axis 1) = {} but input channels (axis 1) = {}",
                ws.c, xs.c
            ),
        ));
    }
    if ws.h != ws.w {
        return Err(dim_err(
            "conv2d",
            format!("non-square kernel {}×{}", ws.h, ws.w),
        ));
    }
    let g = ConvGeom::new(xs.c, xs.h, xs.w, ws.n, ws.h, stride, padding)?;
    if let Some(b) = bias {
        check_vec("conv2d", "bias", b, ws.n)?;
    }
    let out = conv_forward_geom(x.data(), xs.n, weight.data(), bias, &g);
    Ok((
        Tensor::from_vec(Shape::new(xs.n, g.out_c, g.out_h, g.out_w), out)?,
        g,
    ))
}

pub(crate) fn conv_forward_geom<T: Element>(
    x: &[T],
    batch: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_len()];
    let rows = g.col_rows();
    let p = g.out_pixels();
    out.par_chunks_mut(g.out_len())
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let col_buf;
            let col: &[T] = if g.is_pointwise() {
                x_n
            } else {
                let mut buf = vec![T::zero(); rows * p];
                im2col(x_n, g, &mut buf);
                col_buf = buf;
                &col_buf
            };
            out_n
                .par_chunks_mut(CHANNEL_BLOCK * p)
                .enumerate()
                .for_each(|(blk, out_blk)| {
                    let c0 = blk * CHANNEL_BLOCK;
                    let m = out_blk.len() / p;
                    T::gemm(
                        m,
                        rows,
                        p,
                        &w[c0 * rows..(c0 + m) * rows],
                        false,
                        col,
                        false,
                        out_blk,
                        false,
                    );
                    if let Some(b) = bias {
                        for (i, chunk) in out_blk.chunks_mut(p).enumerate() {
                            let bv = b[c0 + i];
                            chunk.iter_mut().for_each(|v| *v = *v + bv);
                        }
                    }
                });
        });
    out
}

/// Gradients of a dense convolution.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv_backward_geom<T: Element>(
    x: &[T],
    batch: usize,
    w: &[T],
    g: &ConvGeom,
    dy: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let rows = g.col_rows();
    let p = g.out_pixels();
    let wlen = g.out_c * rows;
    let partials: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let dy_n = &dy[n * g.out_len()..(n + 1) * g.out_len()];
            let col_buf;
            let col: &[T] = if g.is_pointwise() {
                x_n
            } else {
                let mut buf = vec![T::zero(); rows * p];
                im2col(x_n, g, &mut buf);
                col_buf = buf;
                &col_buf
            };
            let mut dw = vec![T::zero(); wlen];
            T::gemm(g.out_c, p, rows, dy_n, false, col, true, &mut dw, false);
            let db: Vec<T> = dy_n
                .chunks(p)
                .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
                .collect();
            let dx = need_input.then(|| {
                if g.is_pointwise() {
                    let mut dx = vec![T::zero(); g.in_len()];
                    T::gemm(rows, g.out_c, p, w, true, dy_n, false, &mut dx, false);
                    dx
                } else {
                    let mut dcol = vec![T::zero(); rows * p];
                    T::gemm(rows, g.out_c, p, w, true, dy_n, false, &mut dcol, false);
                    let mut dx = vec![T::zero(); g.in_len()];
                    col2im(&dcol, g, &mut dx);
                    dx
                }
            });
            (dw, db, dx)
        })
        .collect();
    let mut weight = vec![T::zero(); wlen];
    let mut bias = vec![T::zero(); g.out_c];
    let mut input = need_input.then(|| Vec::with_capacity(batch * g.in_len()));
    for (dw, db, dx) in partials {
        weight.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
        bias.iter_mut().zip(&db).for_each(|(a, &b)| *a = *a + b);
        if let (Some(all), Some(dx)) = (input.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input,
        weight,
        bias,
    }
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
    dy: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    conv_backward_geom(x.data(), x.shape().n, weight.data(), g, dy, need_input)
}

/// Depthwise convolution. `weight` is `C×1×k×k`.
pub fn depthwise_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, ConvGeom)> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.n != xs.c || ws.c != 1 {
        return Err(dim_err(
            "depthwise_conv2d",
            format!(
                "weight is {ws} (channels on axis 0 = {}) but input channels (axis 1) = {}",
                ws.n, xs.c
            ),
        ));
    }
    if ws.h != ws.w {
        return Err(dim_err(
            "depthwise_conv2d",
            format!("non-square kernel {}×{}", ws.h, ws.w),
        ));
    }
    let g = ConvGeom::new(xs.c, xs.h, xs.w, xs.c, ws.h, stride, padding)?;
    let k = g.kernel;
    let (ip, op) = (g.in_h * g.in_w, g.out_pixels());
    let w = weight.data();
    let xd = x.data();
    let mut out = vec![T::zero(); xs.n * g.out_len()];
    out.par_chunks_mut(op).enumerate().for_each(|(nc, o)| {
        let c = nc % xs.c;
        let src = &xd[nc * ip..(nc + 1) * ip];
        let kw = &w[c * k * k..(c + 1) * k * k];
        for oy in 0..g.out_h {
            for ky in 0..k {
                let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.in_h) else {
                    continue;
                };
                let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                for kx in 0..k {
                    let wv = kw[ky * k + kx];
                    for (ox, ov) in orow.iter_mut().enumerate() {
                        if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.in_w) {
                            *ov = *ov + wv * row[ix];
                        }
                    }
                }
            }
        }
    });
    Ok((
        Tensor::from_vec(Shape::new(xs.n, xs.c, g.out_h, g.out_w), out)?,
        g,
    ))
}

pub fn depthwise_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
    dy: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let k = g.kernel;
    let (ip, op) = (g.in_h * g.in_w, g.out_pixels());
    let w = weight.data();
    let xd = x.data();
    // per (n, c) plane: (dw for that channel, dx plane)
    let planes: Vec<(Vec<T>, Vec<T>)> = (0..xs.n * xs.c)
        .into_par_iter()
        .map(|nc| {
            let c = nc % xs.c;
            let src = &xd[nc * ip..(nc + 1) * ip];
            let d = &dy[nc * op..(nc + 1) * op];
            let kw = &w[c * k * k..(c + 1) * k * k];
            let mut dw = vec![T::zero(); k * k];
            let mut dx = if need_input {
                vec![T::zero(); ip]
            } else {
                Vec::new()
            };
            for oy in 0..g.out_h {
                for ky in 0..k {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let mut acc = T::zero();
                        let wv = kw[ky * k + kx];
                        for ox in 0..g.out_w {
                            if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.in_w) {
                                let gy = d[oy * g.out_w + ox];
                                acc = acc + gy * src[iy * g.in_w + ix];
                                if need_input {
                                    let t = &mut dx[iy * g.in_w + ix];
                                    *t = *t + gy * wv;
                                }
                            }
                        }
                        dw[ky * k + kx] = dw[ky * k + kx] + acc;
                    }
                }
            }
            (dw, dx)
        })
        .collect();
    let mut weight = vec![T::zero(); xs.c * k * k];
    let mut input = need_input.then(|| Vec::with_capacity(xs.numel()));
    for (nc, (dw, dx)) in planes.into_iter().enumerate() {
        let c = nc % xs.c;
        for (a, b) in weight[c * k * k..(c + 1) * k * k].iter_mut().zip(&dw) {
            *a = *a + *b;
        }
        if let Some(all) = input.as_mut() {
            all.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input,
        weight,
        bias: Vec::new(),
    }
}

/// Geometry of the dense convolution whose data-gradient is the given
/// transposed convolution: it maps the transposed output back to its input.
pub fn transposed_geom(
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if in_h == 0 || in_w == 0 {
        return Err(dim_err(
            "conv_transpose2d",
            format!("non-positive input {in_h}×{in_w}"),
        ));
    }
    let big = |n: usize| ((n - 1) * stride + kernel).checked_sub(2 * pad);
    let (Some(oh), Some(ow)) = (big(in_h), big(in_w)) else {
        return Err(dim_err(
            "conv_transpose2d",
            format!("padding {pad} too large"),
        ));
    };
    let g = ConvGeom::padded(out_c, oh, ow, in_c, kernel, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (in_h, in_w));
    Ok(g)
}

/// Transposed convolution. `weight` is `in×out×k×k`; output is
/// `(in_h−1)·stride + k − 2·pad` per spatial axis.
pub fn conv_transpose2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.n != xs.c {
        return Err(dim_err(
            "conv_transpose2d",
            format!(
                "weight input channels (axis 0) = {} but input channels (axis 1) = {}",
                ws.n, xs.c
            ),
        ));
    }
    let g = transposed_geom(xs.c, xs.h, xs.w, ws.c, ws.h, stride, pad)?;
    if let Some(b) = bias {
        check_vec("conv_transpose2d", "bias", b, ws.c)?;
    }
    let rows = g.col_rows();
    let p = g.out_pixels();
    let w = weight.data();
    let xd = x.data();
    let mut out = vec![T::zero(); xs.n * g.in_len()];
    out.par_chunks_mut(g.in_len())
        .enumerate()
        .for_each(|(n, y)| {
            let x_n = &xd[n * g.out_len()..(n + 1) * g.out_len()];
            let mut col = vec![T::zero(); rows * p];
            T::gemm(rows, g.out_c, p, w, true, x_n, false, &mut col, false);
            col2im(&col, &g, y);
            if let Some(b) = bias {
                let plane = g.in_h * g.in_w;
                for (c, chunk) in y.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + b[c]);
                }
            }
        });
    Ok((
        Tensor::from_vec(Shape::new(xs.n, g.in_c, g.in_h, g.in_w), out)?,
        g,
    ))
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
    dy: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let n = x.shape().n;
    let rows = g.col_rows();
    let p = g.out_pixels();
    let w = weight.data();
    let xd = x.data();
    let partials: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x_i = &xd[i * g.out_len()..(i + 1) * g.out_len()];
            let dy_i = &dy[i * g.in_len()..(i + 1) * g.in_len()];
            let mut col = vec![T::zero(); rows * p];
            im2col(dy_i, g, &mut col);
            // dW[in, out·k·k] = x[in, p] · colᵀ
            let mut dw = vec![T::zero(); g.out_c * rows];
            T::gemm(g.out_c, p, rows, x_i, false, &col, true, &mut dw, false);
            let plane = g.in_h * g.in_w;
            let db: Vec<T> = dy_i
                .chunks(plane)
                .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
                .collect();
            let dx = need_input.then(|| {
                let mut dx = vec![T::zero(); g.out_len()];
                T::gemm(g.out_c, rows, p, w, false, &col, false, &mut dx, false);
                dx
            });
            (dw, db, dx)
        })
        .collect();
    let mut weight = vec![T::zero(); g.out_c * rows];
    let mut bias = vec![T::zero(); g.in_c];
    let mut input = need_input.then(|| Vec::with_capacity(n * g.out_len()));
    for (dw, db, dx) in partials {
        weight.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
        bias.iter_mut().zip(&db).for_each(|(a, &b)| *a = *a + b);
        if let (Some(all), Some(dx)) = (input.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Separable bilinear kernel for factor-2 upsampling with a 4×4 kernel.
pub const BILINEAR_TAPS: [f64; 4] = [0.25, 0.75, 0.75, 0.25];

/// `channels×channels×4×4` transposed-conv weight: bilinear kernel on the
/// diagonal, zero cross-channel terms.
pub fn bilinear_weight<T: Element>(channels: usize) -> Tensor<T> {
    Tensor::from_fn(Shape::new(channels, channels, 4, 4), |i, o, y, x| {
        if i == o {
            T::of(BILINEAR_TAPS[y] * BILINEAR_TAPS[x])
        } else {
            T::zero()
        }
    })
}
