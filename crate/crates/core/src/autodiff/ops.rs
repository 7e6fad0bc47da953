//! Differentiable building blocks for the encoder and decoder networks.

use super::tape::{Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-major `c = a' * b' + beta * c` where `'` optionally transposes.
/// `a'` is `m x k`, `b'` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m*k, k*n and m*n elements addressed
    // by these strides.
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

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Accumulate `src` into an optional gradient slot.
#[inline]
fn acc(slot: &mut Option<Vec<f32>>, src: impl Iterator<Item = f32>) {
    if let Some(g) = slot {
        g.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
}

struct Add;
impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        acc(&mut grads[0], g.iter().copied());
        acc(&mut grads[1], g.iter().copied());
    }
}

struct Mul;
impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        acc(&mut grads[0], g.iter().zip(b).map(|(g, b)| g * b));
        acc(&mut grads[1], g.iter().zip(a).map(|(g, a)| g * a));
    }
}

struct Affine {
    scale: f32,
}
impl Op for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        acc(&mut grads[0], g.iter().map(|g| g * self.scale));
    }
}

/// Broadcast add of a per-channel vector along axis 1.
struct AddBias {
    outer: usize,
    channels: usize,
    inner: usize,
}
impl Op for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        acc(&mut grads[0], g.iter().copied());
        if let Some(gb) = &mut grads[1] {
            for o in 0..self.outer {
                for c in 0..self.channels {
                    let base = (o * self.channels + c) * self.inner;
                    gb[c] += g[base..base + self.inner].iter().sum::<f32>();
                }
            }
        }
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}
impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(ga) = &mut grads[0] {
            // dA = G * B^T
            gemm(m, n, k, g, false, inputs[1].data(), true, 1.0, ga);
        }
        if let Some(gb) = &mut grads[1] {
            // dB = A^T * G
            gemm(k, m, n, inputs[0].data(), true, g, false, 1.0, gb);
        }
    }
}

struct LeakyRelu {
    slope: f32,
}
impl Op for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let x = inputs[0].data();
        acc(
            &mut grads[0],
            g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { g * self.slope }),
        );
    }
}

struct Sigmoid;
impl Op for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        acc(&mut grads[0], g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)));
    }
}

struct Reshape;
impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        acc(&mut grads[0], g.iter().copied());
    }
}

struct Concat {
    outer: usize,
    /// per-input length of one contiguous block (axis extent * inner)
    blocks: Vec<usize>,
}
impl Op for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let total: usize = self.blocks.iter().sum();
        let mut offset = 0;
        for (i, &b) in self.blocks.iter().enumerate() {
            if let Some(gi) = &mut grads[i] {
                for o in 0..self.outer {
                    let src = &g[o * total + offset..o * total + offset + b];
                    gi[o * b..(o + 1) * b].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                }
            }
            offset += b;
        }
    }
}

struct Mean;
impl Op for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let s = g[0] / inputs[0].len() as f32;
        acc(&mut grads[0], std::iter::repeat(s));
    }
}

struct L1Loss;
impl Op for L1Loss {
    fn name(&self) -> &'static str {
        "l1_loss"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let s = g[0] / inputs[0].len() as f32;
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let sign = |d: f32| {
            if d > 0.0 {
                s
            } else if d < 0.0 {
                -s
            } else {
                0.0
            }
        };
        acc(&mut grads[0], p.iter().zip(t).map(|(p, t)| sign(p - t)));
        acc(&mut grads[1], p.iter().zip(t).map(|(p, t)| -sign(p - t)));
    }
}

/// Geometry of a 2-D convolution on one sample.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(channels: usize, in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds `input` (`channels x in_h x in_w`) into `rows x cols`.
    fn im2col(&self, input: &[f32], cols: &mut [f32]) {
        let n = self.cols();
        for c in 0..self.channels {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters-adds `cols` into `out`.
    fn col2im(&self, cols: &[f32], out: &mut [f32]) {
        let n = self.cols();
        for c in 0..self.channels {
            let plane = &mut out[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                line[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution: input `[N, C, H, W]`, weight `[O, C, kh, kw]`.
struct Conv2d {
    batch: usize,
    out_ch: usize,
    geom: ConvGeom,
    has_bias: bool,
}

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let geo = self.geom;
        let (rows, ncols) = (geo.rows(), geo.cols());
        let in_len = geo.channels * geo.in_h * geo.in_w;
        let out_len = self.out_ch * ncols;
        let x = inputs[0].data();
        let w = inputs[1].data();
        let mut cols = vec![0.0; rows * ncols];
        let mut dcols = vec![0.0; rows * ncols];
        for b in 0..self.batch {
            let gb = &g[b * out_len..(b + 1) * out_len];
            if let Some(gw) = &mut grads[1] {
                geo.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
                gemm(self.out_ch, ncols, rows, gb, false, &cols, true, 1.0, gw);
            }
            if let Some(gx) = &mut grads[0] {
                gemm(rows, self.out_ch, ncols, w, true, gb, false, 0.0, &mut dcols);
                geo.col2im(&dcols, &mut gx[b * in_len..(b + 1) * in_len]);
            }
        }
        if self.has_bias {
            if let Some(gbias) = &mut grads[2] {
                for b in 0..self.batch {
                    for o in 0..self.out_ch {
                        let base = b * out_len + o * ncols;
                        gbias[o] += g[base..base + ncols].iter().sum::<f32>();
                    }
                }
            }
        }
    }
}

/// Transposed convolution: input `[N, C, H, W]`, weight `[C, O, kh, kw]`.
/// `geom` describes the adjoint convolution, whose input is this op's
/// output.
struct ConvTranspose2d {
    batch: usize,
    in_ch: usize,
    geom: ConvGeom,
    has_bias: bool,
}

impl Op for ConvTranspose2d {
    fn name(&self) -> &'static str {
        "transposed_conv2d"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let geo = self.geom;
        let (rows, ncols) = (geo.rows(), geo.cols());
        let out_ch = geo.channels;
        let out_len = out_ch * geo.in_h * geo.in_w;
        let in_len = self.in_ch * ncols;
        let x = inputs[0].data();
        let w = inputs[1].data();
        let mut cols = vec![0.0; rows * ncols];
        for b in 0..self.batch {
            geo.im2col(&g[b * out_len..(b + 1) * out_len], &mut cols);
            if let Some(gx) = &mut grads[0] {
                gemm(
                    self.in_ch,
                    rows,
                    ncols,
                    w,
                    false,
                    &cols,
                    false,
                    1.0,
                    &mut gx[b * in_len..(b + 1) * in_len],
                );
            }
            if let Some(gw) = &mut grads[1] {
                gemm(
                    self.in_ch,
                    ncols,
                    rows,
                    &x[b * in_len..(b + 1) * in_len],
                    false,
                    &cols,
                    true,
                    1.0,
                    gw,
                );
            }
        }
        if self.has_bias {
            if let Some(gbias) = &mut grads[2] {
                let plane = geo.in_h * geo.in_w;
                for b in 0..self.batch {
                    for o in 0..out_ch {
                        let base = b * out_len + o * plane;
                        gbias[o] += g[base..base + plane].iter().sum::<f32>();
                    }
                }
            }
        }
    }
}

fn sum_f64(values: impl Iterator<Item = f32>) -> f64 {
    values.map(f64::from).sum()
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(mismatch("add", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.tape.record(Box::new(Add), &[self, other], out))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(mismatch("mul", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.tape.record(Box::new(Mul), &[self, other], out))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(self, scale: f32, shift: f32) -> Var<'t> {
        let out = {
            let a = self.value();
            let data = a.data().iter().map(|x| scale * x + shift).collect();
            Tensor::new(a.shape(), data).expect("same shape")
        };
        self.tape.record(Box::new(Affine { scale }), &[self], out)
    }

    /// Adds `bias` (shape `[C]`) along axis 1 of `self` (`[N, C, ...]`).
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (out, op) = {
            let (x, b) = (self.value(), bias.value());
            let s = x.shape();
            if s.len() < 2 || b.shape() != [s[1]] {
                return Err(mismatch("add_bias", s, b.shape()));
            }
            let (outer, channels) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    data[base..base + inner].iter_mut().for_each(|v| *v += b.data()[c]);
                }
            }
            (Tensor::new(s, data)?, AddBias { outer, channels, inner })
        };
        Ok(self.tape.record(Box::new(op), &[self, bias], out))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, op) = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
            (Tensor::new([m, n], c)?, MatMul { m, k, n })
        };
        Ok(self.tape.record(Box::new(op), &[self, other], out))
    }

    /// Fully connected layer: `x [B, in] * w [in, out] + b [out]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add_bias(b)
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (out, op) = {
            let (x, w) = (self.value(), weight.value());
            let (sx, sw) = (x.shape(), w.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
                return Err(mismatch("conv2d", sx, sw));
            }
            let (batch, out_ch) = (sx[0], sw[0]);
            let geo = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad)
                .ok_or_else(|| mismatch("conv2d", sx, sw))?;
            if let Some(b) = bias {
                if b.value().shape() != [out_ch] {
                    return Err(mismatch("conv2d", sw, b.value().shape()));
                }
            }
            let (rows, ncols) = (geo.rows(), geo.cols());
            let in_len = geo.channels * geo.in_h * geo.in_w;
            let out_len = out_ch * ncols;
            let mut data = vec![0.0; batch * out_len];
            let mut cols = vec![0.0; rows * ncols];
            for b in 0..batch {
                geo.im2col(&x.data()[b * in_len..(b + 1) * in_len], &mut cols);
                gemm(
                    out_ch,
                    rows,
                    ncols,
                    w.data(),
                    false,
                    &cols,
                    false,
                    0.0,
                    &mut data[b * out_len..(b + 1) * out_len],
                );
            }
            if let Some(bv) = bias {
                let bv = bv.value();
                for b in 0..batch {
                    for o in 0..out_ch {
                        let base = b * out_len + o * ncols;
                        data[base..base + ncols].iter_mut().for_each(|v| *v += bv.data()[o]);
                    }
                }
            }
            (
                Tensor::new([batch, out_ch, geo.out_h, geo.out_w], data)?,
                Conv2d {
                    batch,
                    out_ch,
                    geom: geo,
                    has_bias: bias.is_some(),
                },
            )
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.record(Box::new(op), &inputs, out))
    }

    /// Transposed convolution; output size `(H - 1) * stride - 2 * pad + k`.
    pub fn transposed_conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (out, op) = {
            let (x, w) = (self.value(), weight.value());
            let (sx, sw) = (x.shape(), w.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
                return Err(mismatch("transposed_conv2d", sx, sw));
            }
            let (batch, in_ch, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (out_ch, kh, kw) = (sw[1], sw[2], sw[3]);
            let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
            let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(mismatch("transposed_conv2d", sx, sw));
            };
            let geo = ConvGeom::new(out_ch, oh, ow, kh, kw, stride, pad)
                .filter(|g| g.out_h == h && g.out_w == wd)
                .ok_or_else(|| mismatch("transposed_conv2d", sx, sw))?;
            if let Some(b) = bias {
                if b.value().shape() != [out_ch] {
                    return Err(mismatch("transposed_conv2d", sw, b.value().shape()));
                }
            }
            let (rows, ncols) = (geo.rows(), geo.cols());
            let in_len = in_ch * ncols;
            let out_len = out_ch * oh * ow;
            let mut data = vec![0.0; batch * out_len];
            let mut cols = vec![0.0; rows * ncols];
            for b in 0..batch {
                gemm(
                    rows,
                    in_ch,
                    ncols,
                    w.data(),
                    true,
                    &x.data()[b * in_len..(b + 1) * in_len],
                    false,
                    0.0,
                    &mut cols,
                );
                geo.col2im(&cols, &mut data[b * out_len..(b + 1) * out_len]);
            }
            if let Some(bv) = bias {
                let bv = bv.value();
                let plane = oh * ow;
                for b in 0..batch {
                    for o in 0..out_ch {
                        let base = b * out_len + o * plane;
                        data[base..base + plane].iter_mut().for_each(|v| *v += bv.data()[o]);
                    }
                }
            }
            (
                Tensor::new([batch, out_ch, oh, ow], data)?,
                ConvTranspose2d {
                    batch,
                    in_ch,
                    geom: geo,
                    has_bias: bias.is_some(),
                },
            )
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.record(Box::new(op), &inputs, out))
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'t> {
        let out = {
            let x = self.value();
            let data = x.data().iter().map(|&v| if v > 0.0 { v } else { v * slope }).collect();
            Tensor::new(x.shape(), data).expect("same shape")
        };
        self.tape.record(Box::new(LeakyRelu { slope }), &[self], out)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let data = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
            Tensor::new(x.shape(), data).expect("same shape")
        };
        self.tape.record(Box::new(Sigmoid), &[self], out)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.to_tensor().reshaped(shape)?;
        Ok(self.tape.record(Box::new(Reshape), &[self], out))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (out, op) = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let s0 = values[0].shape().to_vec();
            if axis >= s0.len() {
                return Err(mismatch("concat", &s0, &[axis]));
            }
            for v in &values[1..] {
                let s = v.shape();
                let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(mismatch("concat", &s0, s));
                }
            }
            let outer: usize = s0[..axis].iter().product();
            let inner: usize = s0[axis + 1..].iter().product();
            let blocks: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
            let mut data = Vec::with_capacity(values.iter().map(|v| v.len()).sum());
            for o in 0..outer {
                for (v, &b) in values.iter().zip(&blocks) {
                    data.extend_from_slice(&v.data()[o * b..(o + 1) * b]);
                }
            }
            let mut shape = s0;
            shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
            (Tensor::new(shape, data)?, Concat { outer, blocks })
        };
        Ok(first.tape.record(Box::new(op), parts, out))
    }

    pub fn mean(self) -> Var<'t> {
        let out = {
            let x = self.value();
            Tensor::scalar((sum_f64(x.data().iter().copied()) / x.len() as f64) as f32)
        };
        self.tape.record(Box::new(Mean), &[self], out)
    }

    /// Mean absolute difference.
    pub fn l1_loss(self, target: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (p, t) = (self.value(), target.value());
            if p.shape() != t.shape() {
                return Err(mismatch("l1_loss", p.shape(), t.shape()));
            }
            let s = sum_f64(p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()));
            Tensor::scalar((s / p.len() as f64) as f32)
        };
        Ok(self.tape.record(Box::new(L1Loss), &[self, target], out))
    }
}

#[cfg(test)]
mod tests {
    use super::super::tape::Tape;
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn l1_loss_examples() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let l = x.l1_loss(x).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0, 0.0]);

        let tape = Tape::new();
        let a = tape.var(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[0.0, 4.0]));
        let l = a.l1_loss(b).unwrap();
        assert_eq!(l.item().unwrap(), 1.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[0.5, -0.5]);
    }

    #[test]
    fn conv2d_of_ones_is_sum() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = x.conv2d(w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item().unwrap(), 9.0);
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let tape = Tape::new();
        let xs: Vec<f32> = (0..2 * 2 * 5 * 4).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
        let ws: Vec<f32> = (0..3 * 2 * 3 * 3).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
        let x = tape.constant(t(&[2, 2, 5, 4], &xs));
        let w = tape.constant(t(&[3, 2, 3, 3], &ws));
        let bias = tape.constant(t(&[3], &[0.1, -0.2, 0.3]));
        let y = x.conv2d(w, Some(bias), 2, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 3, 2]);
        let yv = y.to_tensor();
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut s = [0.1, -0.2, 0.3][o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                        continue;
                                    }
                                    s += xs[((n * 2 + c) * 5 + iy as usize) * 4 + ix as usize]
                                        * ws[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = yv.data()[((n * 3 + o) * 3 + oy) * 2 + ox];
                        assert!((got - s).abs() < 1e-5, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> with the same weights
        let xs: Vec<f32> = (0..2 * 8 * 8).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1).collect();
        let ws: Vec<f32> = (0..3 * 2 * 4 * 4).map(|i| ((i * 5 % 9) as f32 - 4.0) * 0.1).collect();
        let ys: Vec<f32> = (0..3 * 4 * 4).map(|i| ((i * 11 % 17) as f32 - 8.0) * 0.1).collect();
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 8, 8], &xs));
        let w = tape.constant(t(&[3, 2, 4, 4], &ws));
        let y = tape.constant(t(&[1, 3, 4, 4], &ys));
        let cx = x.conv2d(w, None, 2, 1).unwrap().to_tensor();
        let ty = y.transposed_conv2d(w, None, 2, 1).unwrap().to_tensor();
        assert_eq!(ty.shape(), &[1, 2, 8, 8]);
        let lhs: f64 = cx.data().iter().zip(&ys).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = ty.data().iter().zip(&xs).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} {rhs}");
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 2]"),
            "{err}"
        );
        assert!(matches!(a.matmul(a), Err(Error::ShapeMismatch { op: "matmul", .. })));
        assert!(a.l1_loss(b).is_err());
        assert!(a.reshape(&[5]).is_err());
        let img = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(
            img.conv2d(k, None, 1, 0),
            Err(Error::ShapeMismatch { op: "conv2d", .. })
        ));
    }

    #[test]
    fn concat_along_feature_axis() {
        let tape = Tape::new();
        let a = tape.var(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.var(t(&[2, 1], &[5.0, 6.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.to_tensor(), t(&[2, 3], &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]));
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let l = c.mul(w).unwrap().mean();
        let g = tape.backward(l).unwrap();
        let s = 1.0 / 6.0;
        assert_eq!(g.wrt(a).unwrap(), &[s, 2.0 * s, 4.0 * s, 5.0 * s]);
        assert_eq!(g.wrt(b).unwrap(), &[3.0 * s, 6.0 * s]);
    }

    #[test]
    fn mean_of_product_gradient() {
        let tape = Tape::new();
        let xs = [0.5, -1.0, 2.0, 4.0];
        let w = tape.var(t(&[4], &[1.0, 1.0, 1.0, 1.0]));
        let x = tape.constant(t(&[4], &xs));
        let g = tape.backward(w.mul(x).unwrap().mean()).unwrap();
        let expect: Vec<f32> = xs.iter().map(|v| v / 4.0).collect();
        assert_eq!(g.wrt(w).unwrap(), expect.as_slice());
    }

    #[test]
    fn sigmoid_chain_gradient() {
        let tape = Tape::new();
        let w = tape.var(t(&[1], &[0.3]));
        let y = w.sigmoid();
        let yv = y.item().unwrap();
        let g = tape.backward(y).unwrap();
        assert!((g.wrt(w).unwrap()[0] - yv * (1.0 - yv)).abs() < 1e-7);
    }

    #[test]
    fn second_backward_is_an_error() {
        let tape = Tape::new();
        let w = tape.var(t(&[1], &[0.3]));
        let y = w.sigmoid();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.var(t(&[2], &[0.3, 0.1]));
        assert!(matches!(tape.backward(w.sigmoid()), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let xs = [0.5f32, -1.5, 2.0, 0.25];
        let grad = |which: u8| {
            let tape = Tape::new();
            let w = tape.var(t(&[4], &[0.2, -0.4, 0.9, 1.3]));
            let l1 = w.sigmoid().mean();
            let l2 = w.mul(tape.constant(t(&[4], &xs))).unwrap().leaky_relu(0.2).mean();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => l1.add(l2).unwrap(),
            };
            tape.backward(loss).unwrap().wrt(w).unwrap().to_vec()
        };
        let (a, b, s) = (grad(0), grad(1), grad(2));
        for i in 0..4 {
            assert!((a[i] + b[i] - s[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.constant(t(&[1, 1, 4, 4], &(0..16).map(|i| i as f32 * 0.37).collect::<Vec<_>>()));
            let w = tape.constant(t(&[2, 1, 3, 3], &(0..18).map(|i| (i as f32).sin()).collect::<Vec<_>>()));
            x.conv2d(w, None, 1, 1).unwrap().sigmoid().to_tensor()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
