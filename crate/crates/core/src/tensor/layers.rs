//! Layer vocabulary and the forward/backward kernels behind it.
//!
//! Convolutions are lowered to GEMM via an im2col buffer spanning the whole
//! batch; the transposed convolution is the exact adjoint of conv2d with the
//! same stride/padding geometry. All kernels accumulate (`+=`) into gradient
//! buffers so parameters shared by several graph nodes sum their
//! contributions.

use std::cell::RefCell;

use super::{Result, Tensor, TensorError};

thread_local! {
    static SCRATCH_POOL: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
}

/// Pooled scratch buffer for GEMM temporaries that are fully overwritten
/// before being read; contents on take are unspecified (stale data from a
/// previous use), which every call site below overwrites completely.
struct Scratch(Vec<f32>);

impl Scratch {
    fn take(len: usize) -> Scratch {
        let mut buf = SCRATCH_POOL
            .with(|p| p.borrow_mut().pop())
            .unwrap_or_default();
        if buf.len() >= len {
            buf.truncate(len);
        } else {
            buf.resize(len, 0.0);
        }
        Scratch(buf)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let buf = std::mem::take(&mut self.0);
        SCRATCH_POOL.with(|p| {
            let mut pool = p.borrow_mut();
            if pool.len() < 16 {
                pool.push(buf);
            }
        });
    }
}

impl std::ops::Deref for Scratch {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl std::ops::DerefMut for Scratch {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

/// One layer of a network. `Concat`, `SoftmaxCrossEntropy` and
/// `EuclideanLoss` take more than one operand and are applied through the
/// dedicated [`super::Tape`] methods; the remaining kinds also work through
/// the stateless [`forward`](crate::tensor::Tape::forward_layer) path.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    },
    TransposedConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
    },
    Concat,
    SoftmaxCrossEntropy,
    EuclideanLoss,
}

/// conv2d output extent: floor((in + 2*pad - kernel) / stride) + 1.
pub fn conv2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(TensorError::Shape(format!(
            "conv2d kernel {} exceeds padded input extent {}",
            kernel, padded
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// transposed-conv2d output extent: (in - 1)*stride - 2*pad + kernel.
pub fn deconv2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * pad + 1 {
        return Err(TensorError::Shape(format!(
            "transposed-conv2d pad {} swallows the whole {}-wide output",
            pad, grown
        )));
    }
    Ok(grown - 2 * pad)
}

/// max-pool output extent (no padding): floor((in - kernel) / stride) + 1.
pub fn pool_out_size(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if input < kernel {
        return Err(TensorError::Shape(format!(
            "max-pool kernel {} exceeds input extent {}",
            kernel, input
        )));
    }
    Ok((input - kernel) / stride + 1)
}

impl LayerSpec {
    /// Output shape for a single-input layer given an input shape.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
            } => {
                let (n, c, h, w) = expect_nchw(input)?;
                if c != in_channels {
                    return Err(TensorError::Shape(format!(
                        "conv2d expects {} input channels, got {} (input {:?})",
                        in_channels, c, input
                    )));
                }
                let oh = conv2d_out_size(h, kernel_h, stride, pad)?;
                let ow = conv2d_out_size(w, kernel_w, stride, pad)?;
                Ok(vec![n, out_channels, oh, ow])
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
            } => {
                let (n, c, h, w) = expect_nchw(input)?;
                if c != in_channels {
                    return Err(TensorError::Shape(format!(
                        "transposed-conv2d expects {} input channels, got {}",
                        in_channels, c
                    )));
                }
                let oh = deconv2d_out_size(h, kernel_h, stride, pad)?;
                let ow = deconv2d_out_size(w, kernel_w, stride, pad)?;
                Ok(vec![n, out_channels, oh, ow])
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (n, c, h, w) = expect_nchw(input)?;
                Ok(vec![
                    n,
                    c,
                    pool_out_size(h, kernel, stride)?,
                    pool_out_size(w, kernel, stride)?,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                let n = input.first().copied().unwrap_or(0);
                let flat: usize = input.iter().skip(1).product();
                if flat != in_dim {
                    return Err(TensorError::Shape(format!(
                        "fully-connected expects {} input features, got {} (input {:?})",
                        in_dim, flat, input
                    )));
                }
                Ok(vec![n, out_dim])
            }
            LayerSpec::Concat | LayerSpec::SoftmaxCrossEntropy | LayerSpec::EuclideanLoss => {
                Err(TensorError::InvalidArgument(format!(
                    "{:?} takes multiple operands; apply it through the tape",
                    self
                )))
            }
        }
    }

    /// Shapes of this layer's weight and bias, if it is parametric.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            )),
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((
                vec![in_channels, out_channels, kernel_h, kernel_w],
                vec![out_channels],
            )),
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                Some((vec![out_dim, in_dim], vec![out_dim]))
            }
            _ => None,
        }
    }

    /// Fan-in used by the normal(0, sqrt(2/fan_in)) weight initializer.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            }
            | LayerSpec::TransposedConv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some(in_channels * kernel_h * kernel_w),
            LayerSpec::FullyConnected { in_dim, .. } => Some(in_dim),
            _ => None,
        }
    }

    pub fn is_parametric(&self) -> bool {
        self.param_shapes().is_some()
    }
}

fn expect_nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(TensorError::Shape(format!(
            "expected a 4-d NCHW tensor, got {:?}",
            shape
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Gather `src` [N,C,H,W] into a CKK x (N*OH*OW) column matrix for the
/// conv geometry (kernel, stride, pad). Out-of-bounds taps read zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let ncols = n * oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * ncols);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ncols;
                for ni in 0..n {
                    let plane = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let dst = row + ni * oh * ow + oy * ow;
                        if iy < 0 || iy >= h as isize {
                            cols[dst..dst + ow].fill(0.0);
                            continue;
                        }
                        let src_row = plane + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            cols[dst + ox] = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[src_row + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`]: accumulate columns back into a
/// [N,C,H,W] buffer.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f32],
) {
    let ncols = n * oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ncols;
                for ni in 0..n {
                    let plane = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = row + ni * oh * ow + oy * ow;
                        let dst_row = plane + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[dst_row + ix as usize] += cols[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Repack [N,C,S] (row-major) into a C x (N*S) matrix.
fn pack_channels_major(src: &[f32], n: usize, c: usize, s: usize, dst: &mut [f32]) {
    for ni in 0..n {
        for ci in 0..c {
            let from = (ni * c + ci) * s;
            let to = ci * n * s + ni * s;
            dst[to..to + s].copy_from_slice(&src[from..from + s]);
        }
    }
}

/// Adjoint of [`pack_channels_major`]: C x (N*S) back to [N,C,S], adding.
fn unpack_channels_major_add(src: &[f32], n: usize, c: usize, s: usize, dst: &mut [f32]) {
    for ni in 0..n {
        for ci in 0..c {
            let from = ci * n * s + ni * s;
            let to = (ni * c + ci) * s;
            for i in 0..s {
                dst[to + i] += src[from + i];
            }
        }
    }
}

pub(super) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn for_conv(spec: &LayerSpec, input: &[usize]) -> Result<ConvGeom> {
        let (LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
        }
        | LayerSpec::TransposedConv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
        }) = spec
        else {
            unreachable!("ConvGeom applies to conv layers only");
        };
        let out = spec.out_shape(input)?;
        let (n, c, h, w) = expect_nchw(input)?;
        debug_assert_eq!(c, *in_channels);
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            oc: *out_channels,
            kh: *kernel_h,
            kw: *kernel_w,
            stride: *stride,
            pad: *pad,
            oh: out[2],
            ow: out[3],
        })
    }
}

/// Returns the output and the im2col buffer, which backward reuses for the
/// weight gradient.
pub(super) fn conv2d_forward(
    g: &ConvGeom,
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> (Tensor, Vec<f32>) {
    let ckk = g.c * g.kh * g.kw;
    let ncols = g.n * g.oh * g.ow;
    let mut cols = vec![0.0f32; ckk * ncols];
    im2col(
        x.data(),
        g.n,
        g.c,
        g.h,
        g.w,
        g.kh,
        g.kw,
        g.stride,
        g.pad,
        g.oh,
        g.ow,
        &mut cols,
    );
    // packed output: OC x (N*OH*OW), fully written by the beta=0 gemm
    let mut packed = Scratch::take(g.oc * ncols);
    gemm(
        g.oc,
        ckk,
        ncols,
        1.0,
        weight.data(),
        ckk as isize,
        1,
        &cols,
        ncols as isize,
        1,
        0.0,
        &mut packed,
        ncols as isize,
        1,
    );
    let s = g.oh * g.ow;
    let mut out = Tensor::zeros(&[g.n, g.oc, g.oh, g.ow]);
    let od = out.data_mut();
    for ni in 0..g.n {
        for oc in 0..g.oc {
            let from = oc * ncols + ni * s;
            let to = (ni * g.oc + oc) * s;
            let b = bias.data()[oc];
            for i in 0..s {
                od[to + i] = packed[from + i] + b;
            }
        }
    }
    (out, cols)
}

/// `cols` is the im2col buffer saved by [`conv2d_forward`].
pub(super) fn conv2d_backward_params(
    g: &ConvGeom,
    cols: &[f32],
    dout: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
) {
    let ckk = g.c * g.kh * g.kw;
    let ncols = g.n * g.oh * g.ow;
    let s = g.oh * g.ow;
    debug_assert_eq!(cols.len(), ckk * ncols);
    let mut dpk = Scratch::take(g.oc * ncols);
    pack_channels_major(dout, g.n, g.oc, s, &mut dpk);
    for oc in 0..g.oc {
        dbias[oc] += dpk[oc * ncols..(oc + 1) * ncols].iter().sum::<f32>();
    }
    // dW += dOut_packed @ cols^T
    gemm(
        g.oc,
        ncols,
        ckk,
        1.0,
        &dpk,
        ncols as isize,
        1,
        cols,
        1,
        ncols as isize,
        1.0,
        dweight,
        ckk as isize,
        1,
    );
}

pub(super) fn conv2d_backward_input(g: &ConvGeom, weight: &Tensor, dout: &[f32], dx: &mut [f32]) {
    let ckk = g.c * g.kh * g.kw;
    let ncols = g.n * g.oh * g.ow;
    let s = g.oh * g.ow;
    let mut dpk = Scratch::take(g.oc * ncols);
    pack_channels_major(dout, g.n, g.oc, s, &mut dpk);
    // dcols = W^T @ dOut_packed, scattered back to dx
    let mut dcols = Scratch::take(ckk * ncols);
    gemm(
        ckk,
        g.oc,
        ncols,
        1.0,
        weight.data(),
        1,
        ckk as isize,
        &dpk,
        ncols as isize,
        1,
        0.0,
        &mut dcols,
        ncols as isize,
        1,
    );
    col2im_add(
        &dcols, g.n, g.c, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, dx,
    );
}

pub(super) fn deconv2d_forward(g: &ConvGeom, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let ockk = g.oc * g.kh * g.kw;
    let ncols = g.n * g.h * g.w;
    let mut xp = Scratch::take(g.c * ncols);
    pack_channels_major(x.data(), g.n, g.c, g.h * g.w, &mut xp);
    // cols = W~ (OCKK x IC) @ xp, where W~ is the flat [IC x OCKK] weight transposed
    let mut cols = Scratch::take(ockk * ncols);
    gemm(
        ockk,
        g.c,
        ncols,
        1.0,
        weight.data(),
        1,
        ockk as isize,
        &xp,
        ncols as isize,
        1,
        0.0,
        &mut cols,
        ncols as isize,
        1,
    );
    // scatter with the conv geometry transposed: oy = iy*s + ki - pad
    let mut out = Tensor::zeros(&[g.n, g.oc, g.oh, g.ow]);
    col2im_add(
        &cols,
        g.n,
        g.oc,
        g.oh,
        g.ow,
        g.kh,
        g.kw,
        g.stride,
        g.pad,
        g.h,
        g.w,
        out.data_mut(),
    );
    let od = out.data_mut();
    let s = g.oh * g.ow;
    for ni in 0..g.n {
        for oc in 0..g.oc {
            let b = bias.data()[oc];
            let at = (ni * g.oc + oc) * s;
            od[at..at + s].iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

pub(super) fn deconv2d_backward_params(
    g: &ConvGeom,
    x: &Tensor,
    dout: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
) {
    let ockk = g.oc * g.kh * g.kw;
    let ncols = g.n * g.h * g.w;
    let s = g.oh * g.ow;
    for ni in 0..g.n {
        for oc in 0..g.oc {
            let at = (ni * g.oc + oc) * s;
            dbias[oc] += dout[at..at + s].iter().sum::<f32>();
        }
    }
    // dcols = im2col over dOut with the same gather geometry as conv2d
    let mut dcols = Scratch::take(ockk * ncols);
    im2col(
        dout, g.n, g.oc, g.oh, g.ow, g.kh, g.kw, g.stride, g.pad, g.h, g.w, &mut dcols,
    );
    // dW (IC x OCKK) += xp @ dcols^T
    let mut xp = Scratch::take(g.c * ncols);
    pack_channels_major(x.data(), g.n, g.c, g.h * g.w, &mut xp);
    gemm(
        g.c,
        ncols,
        ockk,
        1.0,
        &xp,
        ncols as isize,
        1,
        &dcols,
        1,
        ncols as isize,
        1.0,
        dweight,
        ockk as isize,
        1,
    );
}

pub(super) fn deconv2d_backward_input(g: &ConvGeom, weight: &Tensor, dout: &[f32], dx: &mut [f32]) {
    let ockk = g.oc * g.kh * g.kw;
    let ncols = g.n * g.h * g.w;
    let mut dcols = Scratch::take(ockk * ncols);
    im2col(
        dout, g.n, g.oc, g.oh, g.ow, g.kh, g.kw, g.stride, g.pad, g.h, g.w, &mut dcols,
    );
    // dxp = W (IC x OCKK) @ dcols
    let mut dxp = Scratch::take(g.c * ncols);
    gemm(
        g.c,
        ockk,
        ncols,
        1.0,
        weight.data(),
        ockk as isize,
        1,
        &dcols,
        ncols as isize,
        1,
        0.0,
        &mut dxp,
        ncols as isize,
        1,
    );
    unpack_channels_major_add(&dxp, g.n, g.c, g.h * g.w, dx);
}

pub(super) fn maxpool_forward(
    input: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = expect_nchw(input.shape())?;
    let oh = pool_out_size(h, kernel, stride)?;
    let ow = pool_out_size(w, kernel, stride)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        let plane = nc * h * w;
        let oplane = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0usize;
                for ki in 0..kernel {
                    let iy = oy * stride + ki;
                    for kj in 0..kernel {
                        let ix = ox * stride + kj;
                        let at = iy * w + ix;
                        let v = src[plane + at];
                        if v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                dst[oplane + oy * ow + ox] = best;
                argmax[oplane + oy * ow + ox] = best_at as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub(super) fn maxpool_backward(
    input_shape: &[usize],
    out_shape: &[usize],
    argmax: &[u32],
    dout: &[f32],
    dx: &mut [f32],
) {
    let (n, c, _, _) = expect_nchw(input_shape).expect("pool shapes validated in forward");
    let plane = input_shape[2] * input_shape[3];
    let oplane = out_shape[2] * out_shape[3];
    for nc in 0..n * c {
        for o in 0..oplane {
            dx[nc * plane + argmax[nc * oplane + o] as usize] += dout[nc * oplane + o];
        }
    }
}

pub(super) fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.clear_grad();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub(super) fn relu_backward(out: &Tensor, dout: &[f32], dx: &mut [f32]) {
    for (i, &y) in out.data().iter().enumerate() {
        if y > 0.0 {
            dx[i] += dout[i];
        }
    }
}

pub(super) fn fc_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    in_dim: usize,
    out_dim: usize,
) -> Tensor {
    let n = input.shape()[0];
    let mut out = Tensor::zeros(&[n, out_dim]);
    gemm(
        n,
        in_dim,
        out_dim,
        1.0,
        input.data(),
        in_dim as isize,
        1,
        weight.data(),
        1,
        in_dim as isize,
        0.0,
        out.data_mut(),
        out_dim as isize,
        1,
    );
    let od = out.data_mut();
    for ni in 0..n {
        for o in 0..out_dim {
            od[ni * out_dim + o] += bias.data()[o];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn fc_backward_params_flat(
    input: &[f32],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    dout: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
) {
    debug_assert_eq!(input.len(), n * in_dim);
    for ni in 0..n {
        for o in 0..out_dim {
            dbias[o] += dout[ni * out_dim + o];
        }
    }
    // dW += dOut^T @ X
    gemm(
        out_dim,
        n,
        in_dim,
        1.0,
        dout,
        1,
        out_dim as isize,
        input,
        in_dim as isize,
        1,
        1.0,
        dweight,
        in_dim as isize,
        1,
    );
}

pub(super) fn fc_backward_input(
    weight: &Tensor,
    n: usize,
    in_dim: usize,
    out_dim: usize,
    dout: &[f32],
    dx: &mut [f32],
) {
    // dX += dOut @ W
    gemm(
        n,
        out_dim,
        in_dim,
        1.0,
        dout,
        out_dim as isize,
        1,
        weight.data(),
        in_dim as isize,
        1,
        1.0,
        dx,
        in_dim as isize,
        1,
    );
}
