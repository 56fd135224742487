//! Differentiable layer primitives: convolution, pooling, activation, the
//! linear head, batch normalization, and the classification loss.
//!
//! Each op comes as a forward function plus an explicit backward companion;
//! the tape in [`crate::autodiff`] wires them together. Convolutions use the
//! cross-correlation convention (no kernel flip). All loops run in a fixed
//! order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

/// Forward-pass mode; batch norm is the only op that distinguishes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Trainable convolution parameters: weight `[C_out, C_in, kH, kW]` and
/// per-output-channel bias, with uniform stride and zero padding.
#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if x.shape().len() != 4 || weight.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d needs NCHW input and OIHW weight, got {:?} / {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, wc_in, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c_in}, weight expects {wc_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::Value("conv2d stride must be >= 1".into()));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if kh > hp || kw > wp {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Unrolls one sample's receptive fields into a `[C_in*kH*kW, OH*OW]` matrix.
fn im2col(
    x: &[f32],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    col: &mut [f32],
) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    let col_w = oh * ow;
    for c in 0..d.c_in {
        for u in 0..d.kh {
            for v in 0..d.kw {
                let row = (c * d.kh + u) * d.kw + v;
                let dst = &mut col[row * col_w..(row + 1) * col_w];
                for ohi in 0..oh {
                    let ih = (ohi * stride + u) as isize - padding as isize;
                    let base = ohi * ow;
                    if ih < 0 || ih >= h as isize {
                        dst[base..base + ow].fill(0.0);
                        continue;
                    }
                    let src_row = (c * h + ih as usize) * w;
                    for owi in 0..ow {
                        let iw = (owi * stride + v) as isize - padding as isize;
                        dst[base + owi] = if iw < 0 || iw >= w as isize {
                            0.0
                        } else {
                            x[src_row + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the column matrix back onto the image.
fn col2im_acc(
    col: &[f32],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    x_grad: &mut [f32],
) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    let col_w = oh * ow;
    for c in 0..d.c_in {
        for u in 0..d.kh {
            for v in 0..d.kw {
                let row = (c * d.kh + u) * d.kw + v;
                let src = &col[row * col_w..(row + 1) * col_w];
                for ohi in 0..oh {
                    let ih = (ohi * stride + u) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + ih as usize) * w;
                    for owi in 0..ow {
                        let iw = (owi * stride + v) as isize - padding as isize;
                        if iw >= 0 && iw < w as isize {
                            x_grad[dst_row + iw as usize] += src[ohi * ow + owi];
                        }
                    }
                }
            }
        }
    }
}

/// `out[i][j] += sum_k a[i][k] * b[j][k]` (A times B-transposed).
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[i][j] += sum_k a[k][i] * b[k][j]` (A-transposed times B).
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aik = a[kk * m + i];
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Cross-correlation of an NCHW batch with `p.weight`, plus per-channel bias.
pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    conv2d_raw(x, &p.weight, &p.bias, p.stride, p.padding)
}

pub fn conv2d_raw(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = conv_dims(x, weight, stride, padding)?;
    if bias.shape() != [d.c_out] {
        return Err(Error::Shape(format!(
            "conv2d bias shape {:?}, expected [{}]",
            bias.shape(),
            d.c_out
        )));
    }
    let ck = d.c_in * d.kh * d.kw;
    let col_w = d.oh * d.ow;
    let mut col = vec![0.0f32; ck * col_w];
    let mut out = Tensor::zeros(&[d.n, d.c_out, d.oh, d.ow])?;
    let x_stride = d.c_in * d.h * d.w;
    let o_stride = d.c_out * col_w;
    for ni in 0..d.n {
        im2col(&x.data()[ni * x_stride..(ni + 1) * x_stride], &d, stride, padding, &mut col);
        let out_n = &mut out.data_mut()[ni * o_stride..(ni + 1) * o_stride];
        gemm_acc(d.c_out, ck, col_w, weight.data(), &col, out_n);
        for co in 0..d.c_out {
            let b = bias.data()[co];
            if b != 0.0 {
                for v in &mut out_n[co * col_w..(co + 1) * col_w] {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution w.r.t. its input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(x, weight, stride, padding)?;
    let ck = d.c_in * d.kh * d.kw;
    let col_w = d.oh * d.ow;
    let mut col = vec![0.0f32; ck * col_w];
    let mut dcol = vec![0.0f32; ck * col_w];
    let mut dx = x.zeros_like();
    let mut dw = weight.zeros_like();
    let mut db = Tensor::zeros(&[d.c_out])?;
    let x_stride = d.c_in * d.h * d.w;
    let o_stride = d.c_out * col_w;
    for ni in 0..d.n {
        let x_n = &x.data()[ni * x_stride..(ni + 1) * x_stride];
        let g_n = &grad_out.data()[ni * o_stride..(ni + 1) * o_stride];
        im2col(x_n, &d, stride, padding, &mut col);
        // dW += g_n . col^T
        gemm_abt(d.c_out, col_w, ck, g_n, &col, dw.data_mut());
        // dcol = W^T . g_n
        dcol.fill(0.0);
        gemm_tn(ck, d.c_out, col_w, weight.data(), g_n, &mut dcol);
        col2im_acc(&dcol, &d, stride, padding, &mut dx.data_mut()[ni * x_stride..(ni + 1) * x_stride]);
        for co in 0..d.c_out {
            let mut acc = 0.0f32;
            for &g in &g_n[co * col_w..(co + 1) * col_w] {
                acc += g;
            }
            db.data_mut()[co] += acc;
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Max pooling over non-overlapping or strided square windows. Returns the
/// pooled tensor and, per output element, the flat input index of its max
/// (ties go to the first index in row-major order, for backward routing).
pub fn maxpool2d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    if x.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "maxpool2d needs NCHW input, got {:?}",
            x.shape()
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Value("maxpool2d window and stride must be >= 1".into()));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if window > h || window > w {
        return Err(Error::Shape(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    debug_assert!(x.numel() <= u32::MAX as usize);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow])?;
    let mut argmax = vec![0u32; n * c * oh * ow];
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for u in 0..window {
                        let row = plane + (ohi * stride + u) * w + owi * stride;
                        for v in 0..window {
                            let val = x.data()[row + v];
                            if val > best {
                                best = val;
                                best_idx = (row + v) as u32;
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the recorded argmax position.
pub fn maxpool2d_backward(x_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(x_shape)?;
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[idx as usize] += g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Activation
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// ReLU gradient; the subgradient at exactly zero is taken as 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut dx = grad_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer: `x[N,D] . w[D,K] + b[K]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "linear needs rank-2 input and weight, got {:?} / {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (wd, k) = (w.shape()[0], w.shape()[1]);
    if d != wd || b.shape() != [k] {
        return Err(Error::Shape(format!(
            "linear dims: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, k])?;
    gemm_acc(n, d, k, x.data(), w.data(), out.data_mut());
    for row in out.data_mut().chunks_exact_mut(k) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(out)
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    let mut dx = x.zeros_like();
    let mut dw = w.zeros_like();
    let mut db = Tensor::zeros(&[k])?;
    // dx = g . w^T
    gemm_abt(n, k, d, grad_out.data(), w.data(), dx.data_mut());
    // dw = x^T . g
    gemm_tn(d, n, k, x.data(), grad_out.data(), dw.data_mut());
    for row in grad_out.data().chunks_exact(k) {
        for (acc, &g) in db.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel running statistics for batch normalization. The affine
/// parameters (gamma, beta) live in the parameter store, not here.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> BatchNormState {
        BatchNormState {
            running_mean: Tensor::zeros(&[channels]).expect("channels >= 1"),
            running_var: Tensor::from_vec(&[channels], vec![1.0; channels]).expect("channels >= 1"),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }
}

/// Values saved during the forward pass for use in backward.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub mode: Mode,
}

/// Batch normalization over NCHW input. In train mode, normalizes by batch
/// statistics (biased variance) and updates the running statistics as
/// `running = (1 - momentum) * running + momentum * batch`. In eval mode the
/// stored running statistics are used and left untouched.
pub fn batchnorm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<(Tensor, BnCache)> {
    if x.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "batchnorm2d needs NCHW input, got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.shape() != [c] || beta.shape() != [c] || state.channels() != c {
        return Err(Error::Shape(format!(
            "batchnorm2d channel mismatch: input {c}, gamma {:?}, state {}",
            gamma.shape(),
            state.channels()
        )));
    }
    let m = n * h * w;
    if mode == Mode::Train && m < 2 {
        return Err(Error::Contract(format!(
            "batchnorm2d train mode needs >= 2 values per channel, got {m}"
        )));
    }
    let plane = h * w;
    let mut xhat = x.zeros_like();
    let mut inv_std = vec![0.0f32; c];
    let mut out = x.zeros_like();
    for ci in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &x.data()[base..base + plane] {
                        sum += v as f64;
                    }
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &x.data()[base..base + plane] {
                        let d = v as f64 - mean;
                        sq += d * d;
                    }
                }
                let var = sq / m as f64;
                let mom = state.momentum as f64;
                let rm = state.running_mean.data()[ci] as f64;
                let rv = state.running_var.data()[ci] as f64;
                state.running_mean.data_mut()[ci] = ((1.0 - mom) * rm + mom * mean) as f32;
                state.running_var.data_mut()[ci] = ((1.0 - mom) * rv + mom * var) as f32;
                (mean as f32, var as f32)
            }
            Mode::Eval => (state.running_mean.data()[ci], state.running_var.data()[ci]),
        };
        let istd = 1.0 / (var + state.eps).sqrt();
        inv_std[ci] = istd;
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let xh = (x.data()[i] - mean) * istd;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

/// Gradients of batch normalization w.r.t. input, gamma, and beta.
pub fn batchnorm2d_backward(
    gamma: &Tensor,
    cache: &BnCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let shape = cache.xhat.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = cache.xhat.zeros_like();
    let mut dgamma = Tensor::zeros(&[c])?;
    let mut dbeta = Tensor::zeros(&[c])?;
    for ci in 0..c {
        let g = gamma.data()[ci] as f64;
        let istd = cache.inv_std[ci] as f64;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let dy = grad_out.data()[i] as f64;
                sum_dy += dy;
                sum_dy_xhat += dy * cache.xhat.data()[i] as f64;
            }
        }
        dbeta.data_mut()[ci] = sum_dy as f32;
        dgamma.data_mut()[ci] = sum_dy_xhat as f32;
        match cache.mode {
            Mode::Train => {
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        let dy = grad_out.data()[i] as f64;
                        let xh = cache.xhat.data()[i] as f64;
                        dx.data_mut()[i] =
                            (g * istd * (dy - sum_dy / m - xh * sum_dy_xhat / m)) as f32;
                    }
                }
            }
            Mode::Eval => {
                // Running stats are constants in eval mode.
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        dx.data_mut()[i] = (g * istd * grad_out.data()[i] as f64) as f32;
                    }
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean cross-entropy of softmaxed logits against integer labels, stabilized
/// by row-max subtraction. Returns the scalar loss and the softmax
/// probabilities (needed for backward).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy needs [N, K] logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut probs = logits.zeros_like();
    let mut loss = 0.0f64;
    for (i, (row, p_row)) in logits
        .data()
        .chunks_exact(k)
        .zip(probs.data_mut().chunks_exact_mut(k))
        .enumerate()
    {
        let label = labels[i];
        if label >= k {
            return Err(Error::Value(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for (&v, p) in row.iter().zip(p_row.iter_mut()) {
            let e = ((v - max) as f64).exp();
            *p = e as f32;
            denom += e;
        }
        for p in p_row.iter_mut() {
            *p = (*p as f64 / denom) as f32;
        }
        loss -= ((row[label] - max) as f64 - denom.ln()) / n as f64;
    }
    Ok((loss as f32, probs))
}

/// Gradient of the mean cross-entropy w.r.t. the logits, scaled by the
/// upstream scalar gradient.
pub fn softmax_cross_entropy_backward(
    probs: &Tensor,
    labels: &[usize],
    upstream: f32,
) -> Tensor {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let mut dlogits = probs.clone();
    let scale = upstream / n as f32;
    for (i, row) in dlogits.data_mut().chunks_exact_mut(k).enumerate() {
        row[labels[i]] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    dlogits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, max_abs_diff, randn, scale, Rng};

    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        // Brute-force six-loop convolution, accumulating in f64.
        let d = conv_dims(x, w, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[d.n, d.c_out, d.oh, d.ow]).unwrap();
        for ni in 0..d.n {
            for co in 0..d.c_out {
                for ohi in 0..d.oh {
                    for owi in 0..d.ow {
                        let mut acc = b.data()[co] as f64;
                        for ci in 0..d.c_in {
                            for u in 0..d.kh {
                                for v in 0..d.kw {
                                    let ih = (ohi * stride + u) as isize - pad as isize;
                                    let iw = (owi * stride + v) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ni * d.c_in + ci) * d.h + ih as usize) * d.w
                                        + iw as usize;
                                    let wi = ((co * d.c_in + ci) * d.kh + u) * d.kw + v;
                                    acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                                }
                            }
                        }
                        let oi = ((ni * d.c_out + co) * d.oh + ohi) * d.ow + owi;
                        out.data_mut()[oi] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut rng = Rng::new(2);
        let x = randn(&[1, 1, 4, 4], &mut rng, 0.0, 1.0).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv2d_raw(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_delta_kernel_identity() {
        let mut rng = Rng::new(3);
        let x = randn(&[1, 1, 5, 5], &mut rng, 0.0, 1.0).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0; // center tap
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv2d_raw(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut rng = Rng::new(4);
        let x = randn(&[1, 2, 6, 6], &mut rng, 0.0, 1.0).unwrap();
        let w = randn(&[3, 2, 3, 3], &mut rng, 0.0, 0.5).unwrap();
        let b = randn(&[3], &mut rng, 0.0, 0.5).unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let got = conv2d_raw(&x, &w, &b, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, pad);
            assert!(
                max_abs_diff(&got, &want) < 1e-5,
                "stride {stride} pad {pad}"
            );
        }
    }

    #[test]
    fn conv2d_zero_weight_gives_zero_output() {
        let mut rng = Rng::new(5);
        let x = randn(&[2, 3, 5, 5], &mut rng, 0.0, 2.0).unwrap();
        let w = Tensor::zeros(&[4, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        let y = conv2d_raw(&x, &w, &b, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_is_linear_in_input() {
        let mut rng = Rng::new(6);
        let x = randn(&[1, 2, 5, 5], &mut rng, 0.0, 1.0).unwrap();
        let y = randn(&[1, 2, 5, 5], &mut rng, 0.0, 1.0).unwrap();
        let w = randn(&[2, 2, 3, 3], &mut rng, 0.0, 0.5).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let lhs = conv2d_raw(
            &add(&scale(&x, 2.0), &scale(&y, -3.0)).unwrap(),
            &w,
            &b,
            1,
            1,
        )
        .unwrap();
        let rhs = add(
            &scale(&conv2d_raw(&x, &w, &b, 1, 1).unwrap(), 2.0),
            &scale(&conv2d_raw(&y, &w, &b, 1, 1).unwrap(), -3.0),
        )
        .unwrap();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-5);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(
            conv2d_raw(&x, &w, &b, 1, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn maxpool_basics() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::from_vec(&[1, 1, 4, 4], vec![7.0; 16]).unwrap();
        let (y, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        // Ties resolve to the first (row-major) index of each window.
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let (_, arg) = maxpool2d(&x, 2, 2).unwrap();
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let dx = maxpool2d_backward(&[1, 1, 2, 2], &arg, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let x = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(matches!(maxpool2d(&x, 3, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&y), y); // idempotent

        let g = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let dx = relu_backward(&x, &g);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_identity_weight() {
        let mut rng = Rng::new(8);
        let x = randn(&[3, 4], &mut rng, 0.0, 1.0).unwrap();
        let mut w = Tensor::zeros(&[4, 4]).unwrap();
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let b = Tensor::zeros(&[4]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let mut rng = Rng::new(9);
        let x = randn(&[4, 5], &mut rng, 0.0, 1.0).unwrap();
        let w = randn(&[5, 3], &mut rng, 0.0, 1.0).unwrap();
        let b = randn(&[3], &mut rng, 0.0, 1.0).unwrap();
        let got = linear(&x, &w, &b).unwrap();
        let want = add(&crate::tensor::matmul(&x, &w).unwrap(), &b).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-6);
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut rng = Rng::new(10);
        let x = randn(&[4, 3, 4, 4], &mut rng, 2.0, 3.0).unwrap();
        let gamma = Tensor::from_vec(&[3], vec![1.5, 0.5, 2.0]).unwrap();
        let beta = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let mut state = BatchNormState::new(3);
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &mut state, Mode::Train).unwrap();
        let (n, c, plane) = (4, 3, 16);
        for ci in 0..c {
            let mut vals = Vec::new();
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                vals.extend_from_slice(&y.data()[base..base + plane]);
            }
            let m: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let s: f64 =
                (vals.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / vals.len() as f64)
                    .sqrt();
            assert!((m - beta.data()[ci] as f64).abs() < 1e-4, "mean ch {ci}: {m}");
            assert!(
                (s - gamma.data()[ci] as f64).abs() < 1e-3,
                "std ch {ci}: {s}"
            );
        }
    }

    #[test]
    fn batchnorm_eval_at_running_mean_gives_beta() {
        let gamma = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.7, -0.3]).unwrap();
        let mut state = BatchNormState::new(2);
        state.running_mean = Tensor::from_vec(&[2], vec![0.4, -1.2]).unwrap();
        let mut x = Tensor::zeros(&[1, 2, 2, 2]).unwrap();
        for ci in 0..2 {
            for i in 0..4 {
                x.data_mut()[ci * 4 + i] = state.running_mean.data()[ci];
            }
        }
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &mut state, Mode::Eval).unwrap();
        for ci in 0..2 {
            for i in 0..4 {
                assert!((y.data()[ci * 4 + i] - beta.data()[ci]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batchnorm_rejects_degenerate_train_batch() {
        let x = Tensor::zeros(&[1, 2, 1, 1]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::zeros(&[2]).unwrap();
        let mut state = BatchNormState::new(2);
        assert!(matches!(
            batchnorm2d(&x, &gamma, &beta, &mut state, Mode::Train),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[4, 10]).unwrap();
        let labels = [0usize, 3, 7, 9];
        let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((loss - 10.0f32.ln()).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn cross_entropy_confident_correct_logit() {
        let mut logits = Tensor::zeros(&[1, 5]).unwrap();
        logits.data_mut()[2] = 50.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 3]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut rng = Rng::new(12);
        let logits = randn(&[3, 4], &mut rng, 0.0, 2.0).unwrap();
        let labels = [1usize, 0, 3];
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        let d = softmax_cross_entropy_backward(&probs, &labels, 1.0);
        for i in 0..3 {
            for k in 0..4 {
                let onehot = if labels[i] == k { 1.0 } else { 0.0 };
                let want = (probs.data()[i * 4 + k] - onehot) / 3.0;
                assert!((d.data()[i * 4 + k] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_nonnegative() {
        let mut rng = Rng::new(13);
        for seed in 0..5 {
            let logits = randn(&[4, 6], &mut rng, 0.0, 5.0).unwrap();
            let labels = [seed as usize % 6, 1, 2, 3];
            let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
            assert!(loss >= 0.0);
        }
    }
}
