//! Differentiable layer kernels.
//!
//! Each layer is a forward function plus a backward function that maps the
//! upstream gradient to gradients of the input and of every parameter slot.
//! Convolutions lower to GEMM through `im2col`; all other reductions
//! accumulate in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Weight `(C_out, C_in, k, k)` for convolutions, `(C_in, C_out, 2, 2)` for
/// transposed convolutions; bias `(1, C_out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNormParams {
            gamma: Tensor::filled(s, T::one()),
            beta: Tensor::zeros(s),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T = f32> {
    Conv(ConvParams<T>),
    BatchNorm(BatchNormParams<T>),
}

impl<T: Scalar> LayerParams<T> {
    /// Trainable slots in a fixed order.
    pub fn slots(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            LayerParams::Conv(p) => vec![("weight", &p.weight), ("bias", &p.bias)],
            LayerParams::BatchNorm(p) => vec![("gamma", &p.gamma), ("beta", &p.beta)],
        }
    }

    pub fn slots_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            LayerParams::Conv(p) => vec![("weight", &mut p.weight), ("bias", &mut p.bias)],
            LayerParams::BatchNorm(p) => vec![("gamma", &mut p.gamma), ("beta", &mut p.beta)],
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.slots().iter().map(|(_, t)| t.values.len()).sum()
    }
}

fn mismatch(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

// ---------------------------------------------------------------------------
// conv2d

/// Unfolds one sample `(C, H, W)` into `(C·k·k, H·W)` for a same-padded,
/// stride-1 convolution.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                // valid output columns: 0 <= ox + kx - pad < w
                let ox0 = pad.saturating_sub(kx);
                let ox1 = (w + pad).saturating_sub(kx).min(w);
                for oy in 0..h {
                    let out = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || ox0 >= ox1 {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..ox0].iter_mut().for_each(|v| *v = T::zero());
                    out[ox1..].iter_mut().for_each(|v| *v = T::zero());
                    let ix0 = ox0 + kx - pad;
                    out[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `(C, H, W)`.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let ox0 = pad.saturating_sub(kx);
                let ox1 = (w + pad).saturating_sub(kx).min(w);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ix0 = ox0 + kx - pad;
                    let dst = &mut plane[iy as usize * w + ix0..][..ox1 - ox0];
                    for (d, s) in dst.iter_mut().zip(&row[oy * w + ox0..oy * w + ox1]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<(usize, usize, usize)> {
    let ws = p.weight.shape;
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(mismatch(format!("conv kernel must be square and odd, got {ws}")));
    }
    if ws.c != x.shape.c {
        return Err(mismatch(format!(
            "conv expects {} input channels, got input {}",
            ws.c, x.shape
        )));
    }
    if p.bias.values.len() != ws.n {
        return Err(mismatch(format!("conv bias has {} entries for {} filters", p.bias.values.len(), ws.n)));
    }
    Ok((ws.n, ws.c, ws.h))
}

/// Same-padded stride-1 cross-correlation plus per-channel bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (c_out, c_in, k) = check_conv(x, p)?;
    let Shape { n, h, w, .. } = x.shape;
    let hw = h * w;
    let ck = c_in * k * k;
    let mut out = Tensor::zeros(Shape::new(n, c_out, h, w));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ck * hw] };
    for s in 0..n {
        let xs = x.sample(s);
        let b: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c_in, h, w, k, &mut cols);
            &cols
        };
        let ys = &mut out.values[s * c_out * hw..(s + 1) * c_out * hw];
        for (co, row) in ys.chunks_exact_mut(hw.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v = p.bias.values[co]);
        }
        T::gemm(c_out, ck, hw, T::one(), &p.weight.values, ck as isize, 1, b, hw as isize, 1, T::one(), ys, hw as isize, 1);
    }
    Ok(out)
}

/// Gradients of a [`conv2d`] call: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (c_out, c_in, k) = check_conv(x, p)?;
    let Shape { n, h, w, .. } = x.shape;
    if dy.shape != Shape::new(n, c_out, h, w) {
        return Err(mismatch(format!("conv upstream gradient {} does not match output", dy.shape)));
    }
    let hw = h * w;
    let ck = c_in * k * k;
    let mut dx = Tensor::zeros(x.shape);
    let mut dw = vec![T::zero(); c_out * ck];
    let mut db = vec![0f64; c_out];
    let mut cols = vec![T::zero(); if k == 1 { 0 } else { ck * hw }];
    let mut dcols = vec![T::zero(); if k == 1 { 0 } else { ck * hw }];
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        for (co, row) in dys.chunks_exact(hw.max(1)).enumerate() {
            db[co] += row.iter().map(|v| v.f64()).sum::<f64>();
        }
        let b: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c_in, h, w, k, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(c_out, hw, ck, T::one(), dys, hw as isize, 1, b, 1, hw as isize, T::one(), &mut dw, ck as isize, 1);
        // dcols = Wᵀ · dY
        let dxs = &mut dx.values[s * c_in * hw..(s + 1) * c_in * hw];
        if k == 1 {
            T::gemm(ck, c_out, hw, T::one(), &p.weight.values, 1, ck as isize, dys, hw as isize, 1, T::zero(), dxs, hw as isize, 1);
        } else {
            T::gemm(ck, c_out, hw, T::one(), &p.weight.values, 1, ck as isize, dys, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
            col2im(&dcols, c_in, h, w, k, dxs);
        }
    }
    Ok((dx, dw, db.into_iter().map(T::of).collect()))
}

// ---------------------------------------------------------------------------
// conv2d_transpose (2×2 kernel, stride 2)

fn check_convt<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<(usize, usize)> {
    let ws = p.weight.shape;
    if ws.h != 2 || ws.w != 2 {
        return Err(mismatch(format!("transposed conv kernel must be 2×2, got {ws}")));
    }
    if ws.n != x.shape.c {
        return Err(mismatch(format!(
            "transposed conv expects {} input channels, got input {}",
            ws.n, x.shape
        )));
    }
    if p.bias.values.len() != ws.c {
        return Err(mismatch("transposed conv bias size".into()));
    }
    Ok((ws.n, ws.c))
}

/// Stride-2 transposed convolution with a 2×2 kernel; doubles H and W.
pub fn conv2d_transpose<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (c_in, c_out) = check_convt(x, p)?;
    let Shape { n, h, w, .. } = x.shape;
    let hw = h * w;
    let m = c_out * 4;
    let out_shape = Shape::new(n, c_out, 2 * h, 2 * w);
    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![T::zero(); m * hw];
    for s in 0..n {
        // cols (C_out·4, HW) = Wᵀ · X, with W viewed as (C_in, C_out·4)
        T::gemm(m, c_in, hw, T::one(), &p.weight.values, 1, m as isize, x.sample(s), hw as isize, 1, T::zero(), &mut cols, hw as isize, 1);
        for co in 0..c_out {
            let b = p.bias.values[co];
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &cols[((co * 2 + a) * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        let dst = out_shape.index(s, co, 2 * i + a, 0);
                        for j in 0..w {
                            out.values[dst + 2 * j + bb] = row[i * w + j] + b;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (c_in, c_out) = check_convt(x, p)?;
    let Shape { n, h, w, .. } = x.shape;
    let out_shape = Shape::new(n, c_out, 2 * h, 2 * w);
    if dy.shape != out_shape {
        return Err(mismatch(format!("transposed conv upstream gradient {} != {out_shape}", dy.shape)));
    }
    let hw = h * w;
    let m = c_out * 4;
    let mut dx = Tensor::zeros(x.shape);
    let mut dw = vec![T::zero(); c_in * m];
    let mut db = vec![0f64; c_out];
    let mut dcols = vec![T::zero(); m * hw];
    for s in 0..n {
        for co in 0..c_out {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut dcols[((co * 2 + a) * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        let src = out_shape.index(s, co, 2 * i + a, 0);
                        for j in 0..w {
                            let g = dy.values[src + 2 * j + bb];
                            row[i * w + j] = g;
                            db[co] += g.f64();
                        }
                    }
                }
            }
        }
        let dxs = &mut dx.values[s * c_in * hw..(s + 1) * c_in * hw];
        T::gemm(c_in, m, hw, T::one(), &p.weight.values, m as isize, 1, &dcols, hw as isize, 1, T::zero(), dxs, hw as isize, 1);
        T::gemm(c_in, hw, m, T::one(), x.sample(s), hw as isize, 1, &dcols, 1, hw as isize, T::one(), &mut dw, m as isize, 1);
    }
    Ok((dx, dw, db.into_iter().map(T::of).collect()))
}

// ---------------------------------------------------------------------------
// maxpool2d

/// 2×2 stride-2 max pooling. Odd extents are padded right/bottom with −∞.
/// Returns the output and, per output element, the flat input index of the
/// maximum (first in scan order on ties).
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let Shape { n, c, h, w } = x.shape;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let os = Shape::new(n, c, oh, ow);
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for a in 0..2 {
                        for b in 0..2 {
                            let (y, xx) = (2 * i + a, 2 * j + b);
                            if y < h && xx < w {
                                let idx = x.shape.index(s, ch, y, xx);
                                if best_idx == usize::MAX || x.values[idx] > best {
                                    best = x.values[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = os.index(s, ch, i, j);
                    out.values[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_backward<T: Scalar>(input: Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    for (g, &i) in dy.values.iter().zip(argmax) {
        dx.values[i] = dx.values[i] + *g;
    }
    dx
}

// ---------------------------------------------------------------------------
// batchnorm2d

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    mode: Mode,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

fn check_bn<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<()> {
    let c = x.shape.c;
    if p.gamma.values.len() != c
        || p.beta.values.len() != c
        || p.running_mean.len() != c
        || p.running_var.len() != c
    {
        return Err(mismatch(format!("batch norm parameters do not match input {}", x.shape)));
    }
    Ok(())
}

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics (biased variance) and folds them into the running statistics
/// as `running = momentum·running + (1 − momentum)·batch`.
pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (y, cache, stats) = batchnorm2d_forward(x, p, mode, eps)?;
    if let Some(stats) = stats {
        update_running_stats(p, &stats, momentum);
    }
    Ok((y, cache))
}

/// Per-channel `(mean, biased variance)` of a batch.
pub type BatchStats = Vec<(f64, f64)>;

pub fn update_running_stats<T: Scalar>(p: &mut BatchNormParams<T>, stats: &BatchStats, momentum: f64) {
    for (ch, (mean, var)) in stats.iter().enumerate() {
        p.running_mean[ch] = T::of(momentum * p.running_mean[ch].f64() + (1.0 - momentum) * mean);
        p.running_var[ch] = T::of(momentum * p.running_var[ch].f64() + (1.0 - momentum) * var);
    }
}

/// Batch norm without touching the running statistics; train mode also
/// returns the batch statistics it used.
pub fn batchnorm2d_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: Mode,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>, Option<BatchStats>)> {
    check_bn(x, p)?;
    let Shape { n, c, .. } = x.shape;
    let hw = x.shape.plane();
    let count = n * hw;
    if mode == Mode::Train && count <= 1 {
        return Err(Error::DegenerateBatch);
    }
    let mut out = Tensor::zeros(x.shape);
    let mut xhat = vec![T::zero(); x.values.len()];
    let mut inv_std = vec![0f64; c];
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0f64;
                for s in 0..n {
                    let base = x.shape.index(s, ch, 0, 0);
                    sum += x.values[base..base + hw].iter().map(|v| v.f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0f64;
                for s in 0..n {
                    let base = x.shape.index(s, ch, 0, 0);
                    sq += x.values[base..base + hw]
                        .iter()
                        .map(|v| (v.f64() - mean).powi(2))
                        .sum::<f64>();
                }
                (mean, sq / count as f64)
            }
            Mode::Eval => (p.running_mean[ch].f64(), p.running_var[ch].f64().max(0.0)),
        };
        stats.push((mean, var));
        let is = 1.0 / (var + eps).sqrt();
        inv_std[ch] = is;
        let (g, b) = (p.gamma.values[ch].f64(), p.beta.values[ch].f64());
        for s in 0..n {
            let base = x.shape.index(s, ch, 0, 0);
            for i in base..base + hw {
                let xh = (x.values[i].f64() - mean) * is;
                xhat[i] = T::of(xh);
                out.values[i] = T::of(g * xh + b);
            }
        }
    }
    let stats = (mode == Mode::Train).then_some(stats);
    Ok((out, BatchNormCache { mode, xhat, inv_std }, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    p: &BatchNormParams<T>,
    cache: &BatchNormCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let Shape { n, c, .. } = dy.shape;
    let hw = dy.shape.plane();
    let m = (n * hw) as f64;
    let mut dx = Tensor::zeros(dy.shape);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |s| {
            let base = dy.shape.index(s, ch, 0, 0);
            base..base + hw
        });
        let (mut sdy, mut sdyx) = (0f64, 0f64);
        for i in idx() {
            let g = dy.values[i].f64();
            sdy += g;
            sdyx += g * cache.xhat[i].f64();
        }
        dgamma[ch] = T::of(sdyx);
        dbeta[ch] = T::of(sdy);
        let g = p.gamma.values[ch].f64();
        let is = cache.inv_std[ch];
        match cache.mode {
            Mode::Train => {
                // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                for i in idx() {
                    let v = dy.values[i].f64() * m - sdy - cache.xhat[i].f64() * sdyx;
                    dx.values[i] = T::of(g * is * v / m);
                }
            }
            Mode::Eval => {
                for i in idx() {
                    dx.values[i] = T::of(dy.values[i].f64() * g * is);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// pointwise

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        values: x.values.iter().map(|v| v.max(T::zero())).collect(),
        grad: None,
    }
}

/// Subgradient 0 at 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        values: x
            .values
            .iter()
            .zip(&dy.values)
            .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
            .collect(),
        grad: None,
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        values: x.values.iter().map(|v| T::of(sigmoid_scalar(v.f64()))).collect(),
        grad: None,
    }
}

/// Backward from the sigmoid output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: y.shape,
        values: y
            .values
            .iter()
            .zip(&dy.values)
            .map(|(s, g)| *g * *s * (T::one() - *s))
            .collect(),
        grad: None,
    }
}

/// Inverted dropout: train mode zeroes each activation with probability
/// `rate` and scales survivors by `1/(1 − rate)`; eval mode is the identity.
/// Returns the per-element multiplier used (absent in eval mode).
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.values.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let values = x.values.iter().zip(&mask).map(|(v, m)| *v * *m).collect();
    Ok((Tensor { shape: x.shape, values, grad: None }, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, dy: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => dy.clone(),
        Some(m) => Tensor {
            shape: dy.shape,
            values: dy.values.iter().zip(m).map(|(g, k)| *g * *k).collect(),
            grad: None,
        },
    }
}

/// Stacks channels of `a` then `b`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape, b.shape);
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(mismatch(format!("cannot concatenate {sa} and {sb}")));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut values = Vec::with_capacity(out_shape.len());
    for s in 0..sa.n {
        values.extend_from_slice(a.sample(s));
        values.extend_from_slice(b.sample(s));
    }
    Ok(Tensor { shape: out_shape, values, grad: None })
}

/// Splits an upstream gradient back into the `a` and `b` channel ranges.
pub fn split_channels<T: Scalar>(dy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let Shape { n, c, h, w } = dy.shape;
    let hw = h * w;
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let src = dy.sample(s);
        a.extend_from_slice(&src[..ca * hw]);
        b.extend_from_slice(&src[ca * hw..]);
    }
    (
        Tensor { shape: Shape::new(n, ca, h, w), values: a, grad: None },
        Tensor { shape: Shape::new(n, cb, h, w), values: b, grad: None },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_params(c_out: usize, c_in: usize, k: usize, w: Vec<f64>, b: Vec<f64>) -> ConvParams<f64> {
        ConvParams {
            weight: Tensor::from_vec(Shape::new(c_out, c_in, k, k), w).unwrap(),
            bias: Tensor::from_vec(Shape::new(1, c_out, 1, 1), b).unwrap(),
        }
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = Tensor::from_vec(Shape::new(1, 2, 3, 4), (0..24).map(|v| v as f64).collect()).unwrap();
        let p = conv_params(3, 2, 3, vec![0.0; 54], vec![0.0; 3]);
        assert!(conv2d(&x, &p).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::from_vec(Shape::new(2, 1, 5, 3), (0..30).map(|v| v as f64 * 0.5).collect()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d(&x, &conv_params(1, 1, 3, k, vec![0.0])).unwrap();
        assert_eq!(y.values, x.values);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        let p = conv_params(1, 3, 3, vec![0.0; 27], vec![0.0]);
        assert!(matches!(conv2d(&x, &p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn same_padding_preserves_extent() {
        for (h, w) in [(1, 1), (1, 7), (2, 3), (6, 5)] {
            let x = Tensor::<f64>::filled(Shape::new(1, 1, h, w), 1.0);
            let y = conv2d(&x, &conv_params(2, 1, 3, vec![1.0; 18], vec![0.0; 2])).unwrap();
            assert_eq!((y.shape.h, y.shape.w), (h, w));
        }
    }

    #[test]
    fn single_pixel_transposed_conv() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let p = ConvParams {
            weight: Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: Tensor::zeros(Shape::new(1, 1, 1, 1)),
        };
        let y = conv2d_transpose(&x, &p).unwrap();
        assert_eq!(y.shape, Shape::new(1, 1, 2, 2));
        assert_eq!(y.values, vec![3.0, 6.0, 9.0, 12.0]);
        let z = ConvParams { weight: Tensor::zeros(p.weight.shape), bias: p.bias.clone() };
        assert!(conv2d_transpose(&x, &z).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn maxpool_window_and_tie_break() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x);
        assert_eq!(y.values, vec![4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2), 7.0);
        let (_, arg) = maxpool2d(&c);
        let dx = maxpool2d_backward(c.shape, &arg, &Tensor::filled(Shape::new(1, 1, 1, 1), 1.0));
        assert_eq!(dx.values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_pads_odd_extent() {
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), vec![-5.0, -4.0, -3.0, -2.0, -1.0, -6.0, -7.0, -8.0, -9.0]).unwrap();
        let (y, _) = maxpool2d(&x);
        assert_eq!(y.shape, Shape::new(1, 1, 2, 2));
        assert_eq!(y.values, vec![-1.0, -3.0, -7.0, -9.0]);
    }

    #[test]
    fn batchnorm_degenerate_cases() {
        let x = Tensor::from_vec(Shape::new(2, 2, 1, 2), vec![3., 3., 5., 5., 3., 3., 5., 5.]).unwrap();
        let mut p = BatchNormParams::<f64>::new(2);
        let (y, _) = batchnorm2d(&x, &mut p, Mode::Train, BN_MOMENTUM, BN_EPS).unwrap();
        assert!(y.values.iter().all(|v| v.abs() < 1e-12));

        p.gamma.values = vec![0.0, 0.0];
        p.beta.values = vec![0.25, -1.5];
        let (y, _) = batchnorm2d(&x, &mut p, Mode::Eval, BN_MOMENTUM, BN_EPS).unwrap();
        assert_eq!(y.values, vec![0.25, 0.25, -1.5, -1.5, 0.25, 0.25, -1.5, -1.5]);

        let one = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let mut p1 = BatchNormParams::new(1);
        assert!(matches!(
            batchnorm2d(&one, &mut p1, Mode::Train, BN_MOMENTUM, BN_EPS),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let mut p = BatchNormParams::<f64>::new(1);
        batchnorm2d(&x, &mut p, Mode::Train, 0.9, BN_EPS).unwrap();
        assert!((p.running_mean[0] - 0.3).abs() < 1e-12);
        // 0.9 * 1 + 0.1 * 5
        assert!((p.running_var[0] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn pointwise_values() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-3.0, 5.0]).unwrap();
        assert_eq!(relu(&x).values, vec![0.0, 5.0]);
        assert_eq!(sigmoid_scalar(-800.0), 0.0);
        assert_eq!(sigmoid_scalar(800.0), 1.0);
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
        let (y, m) = dropout(&x, 0.2, Mode::Eval, 1).unwrap();
        assert_eq!(y, x);
        assert!(m.is_none());
        assert!(matches!(dropout(&x, 1.0, Mode::Train, 1), Err(Error::InvalidRate(_))));
        assert!(matches!(dropout(&x, -0.1, Mode::Train, 1), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn concat_then_split_is_lossless() {
        let a = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec(Shape::new(2, 2, 1, 2), vec![5., 6., 7., 8., 9., 10., 11., 12.]).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.values, vec![1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let (ga, gb) = split_channels(&c, 1);
        assert_eq!((ga.values, gb.values), (a.values.clone(), b.values.clone()));
        let bad = Tensor::<f64>::zeros(Shape::new(2, 1, 2, 2));
        assert!(concat_channels(&a, &bad).is_err());
    }
}
