//! Network building blocks with hand-written backward passes.
//!
//! All activation tensors are `[N, H, W, C]` channel-last; convolution
//! kernels are `[K, K, Cin, Cout]`. Convolution is stride-1 with zero "same"
//! padding and is evaluated as im2col followed by a single gemm per sample.
//! Batch statistics are accumulated in `f64` regardless of the tensor scalar
//! type, and every parallel reduction folds per-sample partials in sample
//! order, so results are bit-identical for any thread count.

use rayon::prelude::*;

use super::scalar::{matmul, matmul_a_bt, matmul_at_b, Scalar};
use super::tensor::Tensor;
use super::MilError;

/// Whether batch normalisation uses batch statistics (training) or running
/// statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

fn shape4(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4], MilError> {
    match t.shape() {
        &[n, h, w, c] => Ok([n, h, w, c]),
        other => Err(MilError::Shape(format!(
            "{what} must be rank 4 [N,H,W,C], got {other:?}"
        ))),
    }
}

fn check_kernel<T: Scalar>(
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    cin: usize,
) -> Result<(usize, usize), MilError> {
    let (k, cout) = match kernel.shape() {
        &[kh, kw, kc, co] if kh == kw && kc == cin => (kh, co),
        other => {
            return Err(MilError::Shape(format!(
                "kernel must be [K,K,{cin},Cout], got {other:?}"
            )))
        }
    };
    if k % 2 == 0 {
        return Err(MilError::EvenKernel(k));
    }
    if bias.shape() != [cout] {
        return Err(MilError::Shape(format!(
            "bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    Ok((k, cout))
}

/// Lowers one sample's receptive fields into a `[H*W, K*K*Cin]` matrix whose
/// column order matches the kernel's `[K,K,Cin]` flattening.
fn im2col<T: Scalar>(
    sample: &[T],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    cols: &mut [T],
) {
    let pad = k / 2;
    let ck = k * k * c;
    debug_assert_eq!(cols.len(), h * w * ck);
    for v in cols.iter_mut() {
        *v = T::zero();
    }
    for ky in 0..k {
        for kx in 0..k {
            let col_off = (ky * k + kx) * c;
            for oh in 0..h {
                let ih = oh as isize + ky as isize - pad as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let ih = ih as usize;
                for ow in 0..w {
                    let iw = ow as isize + kx as isize - pad as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let src = (ih * w + iw as usize) * c;
                    let dst = (oh * w + ow) * ck + col_off;
                    cols[dst..dst + c].copy_from_slice(&sample[src..src + c]);
                }
            }
        }
    }
}

/// Scatter-adds a `[H*W, K*K*Cin]` gradient matrix back onto the input plane.
fn col2im_add<T: Scalar>(
    cols: &[T],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    sample_grad: &mut [T],
) {
    let pad = k / 2;
    let ck = k * k * c;
    for ky in 0..k {
        for kx in 0..k {
            let col_off = (ky * k + kx) * c;
            for oh in 0..h {
                let ih = oh as isize + ky as isize - pad as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let ih = ih as usize;
                for ow in 0..w {
                    let iw = ow as isize + kx as isize - pad as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let dst = (ih * w + iw as usize) * c;
                    let src = (oh * w + ow) * ck + col_off;
                    for ch in 0..c {
                        sample_grad[dst + ch] = sample_grad[dst + ch] + cols[src + ch];
                    }
                }
            }
        }
    }
}

/// Stride-1 same-padding convolution: `[N,H,W,Cin] -> [N,H,W,Cout]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, MilError> {
    let [n, h, w, cin] = shape4(input, "conv input")?;
    let (k, cout) = check_kernel(kernel, bias, cin)?;
    let ck = k * k * cin;
    let plane_in = h * w * cin;
    let plane_out = h * w * cout;
    let mut out = Tensor::zeros(&[n, h, w, cout]);
    out.data_mut()
        .par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(s, chunk)| {
            let sample = &input.data()[s * plane_in..(s + 1) * plane_in];
            let mut cols = vec![T::zero(); h * w * ck];
            im2col(sample, h, w, cin, k, &mut cols);
            matmul(h * w, ck, cout, &cols, kernel.data(), chunk, false);
            for px in chunk.chunks_exact_mut(cout) {
                for (v, b) in px.iter_mut().zip(bias.data()) {
                    *v = *v + *b;
                }
            }
        });
    Ok(out)
}

/// Gradients of the convolution with respect to input, kernel, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), MilError> {
    let [n, h, w, cin] = shape4(input, "conv input")?;
    let [no, ho, wo, cout] = shape4(d_out, "conv output gradient")?;
    let k = match kernel.shape() {
        &[kh, kw, kc, co] if kh == kw && kc == cin && co == cout => kh,
        other => {
            return Err(MilError::Shape(format!(
                "kernel {other:?} inconsistent with input/gradient shapes"
            )))
        }
    };
    if (no, ho, wo) != (n, h, w) {
        return Err(MilError::Shape(format!(
            "output gradient shape {:?} does not match input {:?}",
            d_out.shape(),
            input.shape()
        )));
    }
    let ck = k * k * cin;
    let plane_in = h * w * cin;
    let plane_out = h * w * cout;

    let mut d_input = Tensor::zeros(input.shape());
    // Per-sample weight/bias partials, folded in sample order below so the
    // result does not depend on the rayon schedule.
    let partials: Vec<(Vec<T>, Vec<T>)> = d_input
        .data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .map(|(s, dx_chunk)| {
            let sample = &input.data()[s * plane_in..(s + 1) * plane_in];
            let dy = &d_out.data()[s * plane_out..(s + 1) * plane_out];

            let mut cols = vec![T::zero(); h * w * ck];
            im2col(sample, h, w, cin, k, &mut cols);
            let mut dk_local = vec![T::zero(); ck * cout];
            matmul_at_b(ck, h * w, cout, &cols, dy, &mut dk_local, false);

            let mut db_local = vec![T::zero(); cout];
            for px in dy.chunks_exact(cout) {
                for (acc, v) in db_local.iter_mut().zip(px) {
                    *acc = *acc + *v;
                }
            }

            // d_cols = dY @ W^T; kernel flat layout is [ck, cout], which is
            // exactly the b^T operand layout.
            let mut d_cols = vec![T::zero(); h * w * ck];
            matmul_a_bt(h * w, cout, ck, dy, kernel.data(), &mut d_cols, false);
            col2im_add(&d_cols, h, w, cin, k, dx_chunk);

            (dk_local, db_local)
        })
        .collect();

    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(&[cout]);
    for (dk_local, db_local) in partials {
        for (acc, v) in d_kernel.data_mut().iter_mut().zip(&dk_local) {
            *acc = *acc + *v;
        }
        for (acc, v) in d_bias.data_mut().iter_mut().zip(&db_local) {
            *acc = *acc + *v;
        }
    }
    Ok((d_input, d_kernel, d_bias))
}

/// Per-channel statistics captured by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
    /// Number of values per channel (`N * H * W`).
    pub m: usize,
}

/// Output of [`batchnorm_forward`].
pub struct BnForward<T> {
    pub output: Tensor<T>,
    /// Present in training mode; needed by the backward pass.
    pub cache: Option<BatchNormCache<T>>,
    /// Updated running `(mean, var)` in training mode. The forward pass is
    /// pure: the caller decides when to commit these to the model.
    pub new_running: Option<(Vec<T>, Vec<T>)>,
    /// Raw biased batch `(mean, var, per-channel element count)` in training
    /// mode, before any momentum blending. Lets a trainer pool statistics
    /// across several forward passes before updating the running estimates.
    pub batch_stats: Option<(Vec<T>, Vec<T>, usize)>,
}

fn check_channel_vec<T: Scalar>(v: &Tensor<T>, c: usize, what: &str) -> Result<(), MilError> {
    if v.shape() != [c] {
        return Err(MilError::Shape(format!(
            "{what} must be [{c}], got {:?}",
            v.shape()
        )));
    }
    Ok(())
}

/// Batch normalisation over the `(N, H, W)` axes of a `[N,H,W,C]` tensor.
///
/// Training mode normalises by biased batch statistics and reports updated
/// running statistics (`r' = momentum * r + (1 - momentum) * batch`);
/// inference mode normalises by the running statistics. Training on a single
/// sample is refused: the statistics would be degenerate.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    momentum: f64,
    eps: f64,
    mode: BnMode,
) -> Result<BnForward<T>, MilError> {
    let [n, h, w, c] = shape4(input, "batchnorm input")?;
    check_channel_vec(gamma, c, "gamma")?;
    check_channel_vec(beta, c, "beta")?;
    check_channel_vec(running_mean, c, "running mean")?;
    check_channel_vec(running_var, c, "running var")?;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        BnMode::Train => {
            if n < 2 {
                return Err(MilError::BatchTooSmall(n));
            }
            let m = (n * h * w) as f64;
            let mut sum = vec![0f64; c];
            let mut sum_sq = vec![0f64; c];
            for px in input.data().chunks_exact(c) {
                for (ch, &v) in px.iter().enumerate() {
                    let v = v.as_f64();
                    sum[ch] += v;
                    sum_sq[ch] += v * v;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
            let var: Vec<f64> = sum_sq
                .iter()
                .zip(&mean)
                .map(|(sq, mu)| (sq / m - mu * mu).max(0.0))
                .collect();
            (mean, var)
        }
        BnMode::Infer => (
            running_mean.data().iter().map(|v| v.as_f64()).collect(),
            running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
    };
    let invstd: Vec<T> = var
        .iter()
        .map(|v| T::from_f64(1.0 / (v + eps).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();

    let mut output = Tensor::zeros(input.shape());
    for (out_px, in_px) in output
        .data_mut()
        .chunks_exact_mut(c)
        .zip(input.data().chunks_exact(c))
    {
        for ch in 0..c {
            let xhat = (in_px[ch] - mean_t[ch]) * invstd[ch];
            out_px[ch] = gamma.data()[ch] * xhat + beta.data()[ch];
        }
    }

    let (cache, new_running, batch_stats) = match mode {
        BnMode::Train => {
            let mom = momentum;
            let new_rm: Vec<T> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, b)| T::from_f64(mom * r.as_f64() + (1.0 - mom) * b))
                .collect();
            let new_rv: Vec<T> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(r, b)| T::from_f64(mom * r.as_f64() + (1.0 - mom) * b))
                .collect();
            let raw_mean: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
            let raw_var: Vec<T> = var.iter().map(|&v| T::from_f64(v)).collect();
            (
                Some(BatchNormCache {
                    mean: mean_t,
                    invstd,
                    m: n * h * w,
                }),
                Some((new_rm, new_rv)),
                Some((raw_mean, raw_var, n * h * w)),
            )
        }
        BnMode::Infer => (None, None, None),
    };
    Ok(BnForward {
        output,
        cache,
        new_running,
        batch_stats,
    })
}

/// Backward pass for training-mode batch normalisation, differentiating
/// through the batch statistics.
pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), MilError> {
    let [_, _, _, c] = shape4(input, "batchnorm input")?;
    if d_out.shape() != input.shape() {
        return Err(MilError::Shape(format!(
            "batchnorm gradient shape {:?} does not match input {:?}",
            d_out.shape(),
            input.shape()
        )));
    }
    check_channel_vec(gamma, c, "gamma")?;

    // Channel sums of dy and dy * xhat, accumulated in f64.
    let mut sum_dy = vec![0f64; c];
    let mut sum_dy_xhat = vec![0f64; c];
    for (in_px, dy_px) in input
        .data()
        .chunks_exact(c)
        .zip(d_out.data().chunks_exact(c))
    {
        for ch in 0..c {
            let xhat = ((in_px[ch] - cache.mean[ch]) * cache.invstd[ch]).as_f64();
            let dy = dy_px[ch].as_f64();
            sum_dy[ch] += dy;
            sum_dy_xhat[ch] += dy * xhat;
        }
    }

    let m = cache.m as f64;
    let mut d_input = Tensor::zeros(input.shape());
    for ((dx_px, in_px), dy_px) in d_input
        .data_mut()
        .chunks_exact_mut(c)
        .zip(input.data().chunks_exact(c))
        .zip(d_out.data().chunks_exact(c))
    {
        for ch in 0..c {
            let invstd = cache.invstd[ch].as_f64();
            let xhat = ((in_px[ch] - cache.mean[ch]) * cache.invstd[ch]).as_f64();
            let g = gamma.data()[ch].as_f64();
            let dx = g * invstd / m
                * (m * dy_px[ch].as_f64() - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
            dx_px[ch] = T::from_f64(dx);
        }
    }
    let d_gamma = Tensor::from_vec(
        &[c],
        sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect(),
    )?;
    let d_beta = Tensor::from_vec(&[c], sum_dy.iter().map(|&v| T::from_f64(v)).collect())?;
    Ok((d_input, d_gamma, d_beta))
}

/// Elementwise rectifier.
pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Backward through the rectifier given its *output* (gradient is passed
/// where the output is strictly positive).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = d_out.clone();
    for (g, y) in dx.data_mut().iter_mut().zip(output.data()) {
        if *y <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

/// Winner positions recorded by [`maxpool2x2_forward`].
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub in_shape: [usize; 4],
    /// For each output element, the flat `(h * W + w)` plane index of the
    /// winning input cell.
    pub argmax: Vec<u32>,
}

/// 2x2 stride-2 max pooling with ceil-mode output `ceil(H/2) x ceil(W/2)`.
///
/// Odd edges are conceptually padded bottom/right with the feature map's
/// per-channel minimum, which can never win a window (every window contains
/// at least one real cell, and ties resolve to the first cell in row-major
/// order), so gradients always flow to real inputs.
pub fn maxpool2x2_forward<T: Scalar>(
    input: &Tensor<T>,
) -> Result<(Tensor<T>, MaxPoolCache), MilError> {
    let [n, h, w, c] = shape4(input, "maxpool input")?;
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = Tensor::zeros(&[n, ho, wo, c]);
    let mut argmax = vec![0u32; n * ho * wo * c];
    let in_plane = h * w * c;
    let out_plane = ho * wo * c;
    for s in 0..n {
        let sample = &input.data()[s * in_plane..(s + 1) * in_plane];
        let out_chunk = &mut out.data_mut()[s * out_plane..(s + 1) * out_plane];
        let arg_chunk = &mut argmax[s * out_plane..(s + 1) * out_plane];
        for oh in 0..ho {
            for ow in 0..wo {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    for dh in 0..2 {
                        let ih = oh * 2 + dh;
                        if ih >= h {
                            continue;
                        }
                        for dw in 0..2 {
                            let iw = ow * 2 + dw;
                            if iw >= w {
                                continue;
                            }
                            let v = sample[(ih * w + iw) * c + ch];
                            // Strict comparison: the earliest maximum in
                            // row-major window order wins.
                            if v > best {
                                best = v;
                                best_idx = (ih * w + iw) as u32;
                            }
                        }
                    }
                    let o = (oh * wo + ow) * c + ch;
                    out_chunk[o] = best;
                    arg_chunk[o] = best_idx;
                }
            }
        }
    }
    Ok((
        out,
        MaxPoolCache {
            in_shape: [n, h, w, c],
            argmax,
        },
    ))
}

/// Routes each output gradient back to the winning input cell.
pub fn maxpool2x2_backward<T: Scalar>(
    cache: &MaxPoolCache,
    d_out: &Tensor<T>,
) -> Result<Tensor<T>, MilError> {
    let [n, h, w, c] = cache.in_shape;
    let [no, ho, wo, co] = shape4(d_out, "maxpool output gradient")?;
    if no != n || co != c || ho != h.div_ceil(2) || wo != w.div_ceil(2) {
        return Err(MilError::Shape(format!(
            "maxpool gradient shape {:?} does not match cached input {:?}",
            d_out.shape(),
            cache.in_shape
        )));
    }
    let mut dx = Tensor::zeros(&[n, h, w, c]);
    let in_plane = h * w * c;
    let out_plane = ho * wo * c;
    for s in 0..n {
        let dx_chunk = &mut dx.data_mut()[s * in_plane..(s + 1) * in_plane];
        let dy_chunk = &d_out.data()[s * out_plane..(s + 1) * out_plane];
        let arg_chunk = &cache.argmax[s * out_plane..(s + 1) * out_plane];
        for (o, (&g, &idx)) in dy_chunk.iter().zip(arg_chunk).enumerate() {
            let ch = o % c;
            let d = idx as usize * c + ch;
            dx_chunk[d] = dx_chunk[d] + g;
        }
    }
    Ok(dx)
}

/// Mean over the spatial axes: `[N,H,W,C] -> [N,C]`.
pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, MilError> {
    let [n, h, w, c] = shape4(input, "global average pool input")?;
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(&[n, c]);
    for s in 0..n {
        let sample = &input.data()[s * h * w * c..(s + 1) * h * w * c];
        let acc = &mut out.data_mut()[s * c..(s + 1) * c];
        for px in sample.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a = *a + v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a * scale;
        }
    }
    Ok(out)
}

/// Spreads `[N,C]` gradients uniformly over the pooled spatial extent.
pub fn global_avg_pool_backward<T: Scalar>(
    d_out: &Tensor<T>,
    in_shape: [usize; 4],
) -> Result<Tensor<T>, MilError> {
    let [n, h, w, c] = in_shape;
    if d_out.shape() != [n, c] {
        return Err(MilError::Shape(format!(
            "pool gradient must be [{n},{c}], got {:?}",
            d_out.shape()
        )));
    }
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(&[n, h, w, c]);
    for s in 0..n {
        let g = &d_out.data()[s * c..(s + 1) * c];
        for px in dx.data_mut()[s * h * w * c..(s + 1) * h * w * c].chunks_exact_mut(c) {
            for (d, &v) in px.iter_mut().zip(g) {
                *d = v * scale;
            }
        }
    }
    Ok(dx)
}

/// Fully connected layer: `[N,Cin] @ [Cin,Cout] + [Cout]`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, MilError> {
    let (n, cin) = match input.shape() {
        &[n, cin] => (n, cin),
        other => return Err(MilError::Shape(format!("dense input must be rank 2, got {other:?}"))),
    };
    let cout = match weight.shape() {
        &[wc, co] if wc == cin => co,
        other => {
            return Err(MilError::Shape(format!(
                "dense weight must be [{cin},Cout], got {other:?}"
            )))
        }
    };
    check_channel_vec(bias, cout, "dense bias")?;
    let mut out = Tensor::zeros(&[n, cout]);
    matmul(n, cin, cout, input.data(), weight.data(), out.data_mut(), false);
    for row in out.data_mut().chunks_exact_mut(cout) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v = *v + *b;
        }
    }
    Ok(out)
}

/// Gradients of the dense layer.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), MilError> {
    let (n, cin) = match input.shape() {
        &[n, cin] => (n, cin),
        other => return Err(MilError::Shape(format!("dense input must be rank 2, got {other:?}"))),
    };
    let cout = weight.shape()[1];
    if d_out.shape() != [n, cout] {
        return Err(MilError::Shape(format!(
            "dense gradient must be [{n},{cout}], got {:?}",
            d_out.shape()
        )));
    }
    let mut d_input = Tensor::zeros(&[n, cin]);
    matmul_a_bt(n, cout, cin, d_out.data(), weight.data(), d_input.data_mut(), false);
    let mut d_weight = Tensor::zeros(&[cin, cout]);
    matmul_at_b(cin, n, cout, input.data(), d_out.data(), d_weight.data_mut(), false);
    let mut d_bias = Tensor::zeros(&[cout]);
    for row in d_out.data().chunks_exact(cout) {
        for (acc, &v) in d_bias.data_mut().iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok((d_input, d_weight, d_bias))
}

/// Numerically stable elementwise logistic function.
pub fn sigmoid_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        let x = *v;
        *v = if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        };
    }
    out
}

/// Backward through the logistic function given its output.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = d_out.clone();
    for (g, &y) in dx.data_mut().iter_mut().zip(output.data()) {
        *g = *g * y * (T::one() - y);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct quadruple-loop convolution used as an independent oracle.
    fn conv_naive(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let [n, h, w, cin] = [
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        ];
        let k = kernel.shape()[0];
        let cout = kernel.shape()[3];
        let pad = k as isize / 2;
        let mut out = Tensor::zeros(&[n, h, w, cout]);
        for s in 0..n {
            for oh in 0..h {
                for ow in 0..w {
                    for co in 0..cout {
                        let mut acc = bias.data()[co];
                        for ky in 0..k {
                            for kx in 0..k {
                                let ih = oh as isize + ky as isize - pad;
                                let iw = ow as isize + kx as isize - pad;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let x = input.data()
                                        [((s * h + ih as usize) * w + iw as usize) * cin + ci];
                                    let wv =
                                        kernel.data()[((ky * k + kx) * cin + ci) * cout + co];
                                    acc += x * wv;
                                }
                            }
                        }
                        out.data_mut()[((s * h + oh) * w + ow) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, h, w, cin, cout, k) in [(2, 5, 4, 3, 4, 3), (1, 7, 7, 2, 3, 5), (3, 4, 6, 1, 2, 1)]
        {
            let x = random_tensor(&mut rng, &[n, h, w, cin]);
            let kern = random_tensor(&mut rng, &[k, k, cin, cout]);
            let b = random_tensor(&mut rng, &[cout]);
            let got = conv2d_forward(&x, &kern, &b).unwrap();
            let want = conv_naive(&x, &kern, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert_relative_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    fn inner(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_backward_satisfies_adjoint_identities() {
        // For the linear map y = conv(x; W) (bias zero):
        //   <conv(x), dY> = <x, dX>          (dX adjoint identity)
        //   <conv(x), dY> = <W, dW>          (bilinearity in W)
        // Exact up to float rounding; these pin both gradients with no
        // finite differences involved.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[2, 6, 5, 3]);
        let kern = random_tensor(&mut rng, &[3, 3, 3, 4]);
        let zero_bias = Tensor::zeros(&[4]);
        let dy = random_tensor(&mut rng, &[2, 6, 5, 4]);
        let y = conv2d_forward(&x, &kern, &zero_bias).unwrap();
        let (dx, dk, db) = conv2d_backward(&x, &kern, &dy).unwrap();

        let lhs = inner(y.data(), dy.data());
        assert_relative_eq!(lhs, inner(x.data(), dx.data()), epsilon = 1e-9);
        assert_relative_eq!(lhs, inner(kern.data(), dk.data()), epsilon = 1e-9);

        // Bias gradient is the plain sum of dY over all but the channel axis.
        for co in 0..4 {
            let want: f64 = dy
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 4 == co)
                .map(|(_, v)| v)
                .sum();
            assert_relative_eq!(db.data()[co], want, epsilon = 1e-10);
        }
    }

    #[test]
    fn conv_validates_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 3]);
        let even = Tensor::<f64>::zeros(&[2, 2, 3, 4]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(matches!(
            conv2d_forward(&x, &even, &b),
            Err(MilError::EvenKernel(2))
        ));
        let wrong_cin = Tensor::<f64>::zeros(&[3, 3, 2, 4]);
        assert!(matches!(
            conv2d_forward(&x, &wrong_cin, &b),
            Err(MilError::Shape(_))
        ));
        let k = Tensor::<f64>::zeros(&[3, 3, 3, 4]);
        let bad_bias = Tensor::<f64>::zeros(&[5]);
        assert!(matches!(
            conv2d_forward(&x, &k, &bad_bias),
            Err(MilError::Shape(_))
        ));
    }

    fn bn_params(c: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Tensor::from_vec(&[c], vec![1.0; c]).unwrap(),
            Tensor::zeros(&[c]),
            Tensor::zeros(&[c]),
            Tensor::from_vec(&[c], vec![1.0; c]).unwrap(),
        )
    }

    #[test]
    fn batchnorm_train_standardises_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[4, 3, 3, 2]);
        let (gamma, beta, rm, rv) = bn_params(2);
        let fwd = batchnorm_forward(&x, &gamma, &beta, &rm, &rv, 0.9, 1e-5, BnMode::Train).unwrap();
        let m = 4.0 * 3.0 * 3.0;
        for ch in 0..2 {
            let vals: Vec<f64> = fwd
                .output
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 2 == ch)
                .map(|(_, &v)| v)
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / m;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-10);
            assert_relative_eq!(var, 1.0, epsilon = 1e-4); // eps slightly shrinks it
        }
        // Running statistics blend: r' = 0.9 r + 0.1 batch, from r = (0, 1).
        let (new_rm, new_rv) = fwd.new_running.unwrap();
        let batch_mean: f64 = x.data().iter().enumerate().filter(|(i, _)| i % 2 == 0).map(|(_, v)| v).sum::<f64>() / m;
        assert_relative_eq!(new_rm[0], 0.1 * batch_mean, epsilon = 1e-12);
        assert!(new_rv[0] > 0.0);
    }

    #[test]
    fn batchnorm_applies_gamma_beta_and_running_stats_in_infer_mode() {
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![3.0, 5.0]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![-1.0]).unwrap();
        let rm = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        let rv = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        let fwd =
            batchnorm_forward(&x, &gamma, &beta, &rm, &rv, 0.9, 0.0, BnMode::Infer).unwrap();
        // (3-4)/2 * 2 - 1 = -2; (5-4)/2 * 2 - 1 = 0.
        assert_relative_eq!(fwd.output.data()[0], -2.0, epsilon = 1e-12);
        assert_relative_eq!(fwd.output.data()[1], 0.0, epsilon = 1e-12);
        assert!(fwd.cache.is_none());
        assert!(fwd.new_running.is_none());
    }

    #[test]
    fn batchnorm_rejects_single_sample_training() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3, 2]);
        let (gamma, beta, rm, rv) = bn_params(2);
        assert!(matches!(
            batchnorm_forward(&x, &gamma, &beta, &rm, &rv, 0.9, 1e-5, BnMode::Train),
            Err(MilError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[3, 2, 2, 2]);
        let gamma = random_tensor(&mut rng, &[2]);
        let beta = random_tensor(&mut rng, &[2]);
        let (_, _, rm, rv) = bn_params(2);
        let proj = random_tensor(&mut rng, &[3, 2, 2, 2]);
        // Scalar loss L(x) = <BN(x), proj>.
        let loss = |xt: &Tensor<f64>| -> f64 {
            let f = batchnorm_forward(xt, &gamma, &beta, &rm, &rv, 0.9, 1e-5, BnMode::Train)
                .unwrap();
            inner(f.output.data(), proj.data())
        };
        let fwd = batchnorm_forward(&x, &gamma, &beta, &rm, &rv, 0.9, 1e-5, BnMode::Train).unwrap();
        let (dx, dgamma, dbeta) =
            batchnorm_backward(&x, &gamma, fwd.cache.as_ref().unwrap(), &proj).unwrap();

        let eps = 1e-6;
        for i in [0usize, 5, 11, 17, 23] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let ana = dx.data()[i];
            assert!(
                (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8) < 1e-6,
                "dx[{i}]: numeric {num} vs analytic {ana}"
            );
        }
        // dgamma / dbeta against their closed forms.
        let cache = fwd.cache.unwrap();
        for ch in 0..2 {
            let mut want_g = 0.0;
            let mut want_b = 0.0;
            for (i, (&xv, &pv)) in x.data().iter().zip(proj.data()).enumerate() {
                if i % 2 == ch {
                    let xhat = (xv - cache.mean[ch]) * cache.invstd[ch];
                    want_g += pv * xhat;
                    want_b += pv;
                }
            }
            assert_relative_eq!(dgamma.data()[ch], want_g, epsilon = 1e-10);
            assert_relative_eq!(dbeta.data()[ch], want_b, epsilon = 1e-10);
        }
    }

    #[test]
    fn maxpool_hand_oracle_and_tie_breaking() {
        // 4x4 single-channel plane with known window maxima.
        let data = vec![
            1.0, 5.0, 2.0, 2.0, //
            3.0, 4.0, 2.0, 2.0, //
            7.0, 7.0, 0.0, -1.0, //
            7.0, 6.0, -2.0, 0.0,
        ];
        let x = Tensor::from_vec(&[1, 4, 4, 1], data).unwrap();
        let (y, cache) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[5.0, 2.0, 7.0, 0.0]);
        // Window (1,0) is all ties at 7 except 6: the first 7 in row-major
        // order is input cell (2,0) = plane index 8.
        assert_eq!(cache.argmax[2], 8);
        // Window (0,1): four-way tie at 2 resolves to cell (0,2) = index 2.
        assert_eq!(cache.argmax[1], 2);

        let dy = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dx = maxpool2x2_backward(&cache, &dy).unwrap();
        let mut want = vec![0.0; 16];
        want[1] = 1.0; // 5 at (0,1)
        want[2] = 2.0; // tie -> (0,2)
        want[8] = 3.0; // tie -> (2,0)
        want[10] = 4.0; // max 0 appears twice; the first is (2,2) = index 10
        assert_eq!(dx.data(), &want[..]);
    }

    #[test]
    fn maxpool_ceil_mode_keeps_odd_edges() {
        // 3x3 plane: output is 2x2; bottom/right windows see only real cells.
        let data = vec![
            1.0, 2.0, 3.0, //
            4.0, 5.0, 6.0, //
            7.0, 8.0, 9.0,
        ];
        let x = Tensor::from_vec(&[1, 3, 3, 1], data).unwrap();
        let (y, cache) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
        assert_eq!(cache.argmax, vec![4, 5, 7, 8]);

        // Gradient flows only to real cells (padding can never win).
        let dy = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0; 4]).unwrap();
        let dx = maxpool2x2_backward(&cache, &dy).unwrap();
        let total: f64 = dx.data().iter().sum();
        assert_relative_eq!(total, 4.0, epsilon = 1e-12);
        assert_eq!(dx.data()[4], 1.0);
        assert_eq!(dx.data()[8], 1.0);
    }

    #[test]
    fn global_avg_pool_and_backward() {
        let x = Tensor::from_vec(
            &[1, 2, 2, 2],
            vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0],
        )
        .unwrap();
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_relative_eq!(y.data()[0], 2.5, epsilon = 1e-12);
        assert_relative_eq!(y.data()[1], 25.0, epsilon = 1e-12);

        let dy = Tensor::from_vec(&[1, 2], vec![4.0, 8.0]).unwrap();
        let dx = global_avg_pool_backward(&dy, [1, 2, 2, 2]).unwrap();
        for px in dx.data().chunks_exact(2) {
            assert_relative_eq!(px[0], 1.0, epsilon = 1e-12);
            assert_relative_eq!(px[1], 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dense_layer_matches_hand_product_and_adjoints() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![10.0, -10.0]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        // Row 0: [1-2+0+10, 0.5+4+3-10] = [9, -2.5]
        assert_relative_eq!(y.data()[0], 9.0, epsilon = 1e-12);
        assert_relative_eq!(y.data()[1], -2.5, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dy = random_tensor(&mut rng, &[2, 2]);
        let zero_b = Tensor::zeros(&[2]);
        let y0 = dense_forward(&x, &w, &zero_b).unwrap();
        let (dx, dw, db) = dense_backward(&x, &w, &dy).unwrap();
        let lhs = inner(y0.data(), dy.data());
        assert_relative_eq!(lhs, inner(x.data(), dx.data()), epsilon = 1e-10);
        assert_relative_eq!(lhs, inner(w.data(), dw.data()), epsilon = 1e-10);
        assert_relative_eq!(db.data()[0], dy.data()[0] + dy.data()[2], epsilon = 1e-12);
    }

    #[test]
    fn relu_and_sigmoid_behave() {
        let x = Tensor::from_vec(&[1, 4], vec![-2.0, -0.0, 0.5, 3.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 3.0]);
        let dy = Tensor::from_vec(&[1, 4], vec![1.0; 4]).unwrap();
        let dx = relu_backward(&y, &dy);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 1.0]);

        let s = sigmoid_forward(&x);
        assert_relative_eq!(s.data()[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.data()[3], 1.0 / (1.0 + (-3.0f64).exp()), epsilon = 1e-12);
        // Stability at extremes.
        let extreme = Tensor::from_vec(&[1, 2], vec![-500.0f64, 500.0]).unwrap();
        let se = sigmoid_forward(&extreme);
        assert!(se.data()[0] >= 0.0 && se.data()[1] <= 1.0);
        assert!(se.data().iter().all(|v| v.is_finite()));

        // Derivative check at one point: sigma'(0.5-ish).
        let ds = sigmoid_backward(&s, &dy);
        let y3: f64 = s.data()[3];
        assert_relative_eq!(ds.data()[3], y3 * (1.0 - y3), epsilon = 1e-12);
    }
}
