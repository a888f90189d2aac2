//! Independent f64 re-evaluation of every layer and of the assembled models.
//!
//! Each function here recomputes a layer's output with plain straight-line
//! loops in double precision, reading the live parameters of the f32 layer
//! structs. Nothing is shared with the tape implementations, so agreement
//! between the two routes checks both of them; the f64 route also serves as
//! the finite-difference oracle, where the ~1e-16 rounding floor makes even
//! heavily attenuated parameter directions measurable.

use crate::error::{Error, Result};
use crate::losses::{LossWeights, PerceptualExtractor};
use crate::models::{AttnStage, Discriminator, GenStage, Generator};
use crate::nn::{
    AxialAttention, AxialBlock, Axis, BatchNorm2d, Conv2d, Full2dBlock, FullAttention2d, Pad,
    ResidualBlock, SnConv2d, SnDeconv2d, SpectralNorm, TransposedConv2d,
};
use crate::tensor::Param;

/// Dense f64 array with shape bookkeeping — the working currency of this
/// module.
#[derive(Clone)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: &[usize]) -> Self {
        Arr { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Arr { shape: shape.to_vec(), data: data.iter().map(|&v| v as f64).collect() }
    }

    pub fn from_param(p: &Param) -> Self {
        let v = p.value();
        Arr::from_f32(&v.shape, &v.data)
    }

    /// Largest absolute difference against an f32 slice (shape agreement is
    /// the caller's problem).
    pub fn max_abs_diff(&self, other: &[f32]) -> f64 {
        self.data
            .iter()
            .zip(other)
            .map(|(&a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max)
    }
}

fn param_f64(p: &Param) -> Vec<f64> {
    p.value().data.iter().map(|&v| v as f64).collect()
}

/// σ̂ = uᵀWv with the layer's current power-iteration vectors, in f64.
fn sn_sigma(sn: &SpectralNorm, weight: &Param) -> f64 {
    let (out, rest) = SpectralNorm::matrix_dims(weight);
    let w = param_f64(weight);
    let u = param_f64(&sn.u);
    let v = param_f64(&sn.v);
    let mut s = 0.0;
    for i in 0..out {
        let mut row = 0.0;
        for j in 0..rest {
            row += w[i * rest + j] * v[j];
        }
        s += row * u[i];
    }
    s
}

fn effective_kernel(kernel: &Param, sn: Option<&SpectralNorm>) -> Vec<f64> {
    let mut w = param_f64(kernel);
    if let Some(sn) = sn {
        let inv = 1.0 / sn_sigma(sn, kernel);
        for v in &mut w {
            *v *= inv;
        }
    }
    w
}

/// Plain convolution: gather over the input window for every output site.
pub fn conv2d(x: &Arr, kernel: &[f64], kshape: &[usize], bias: Option<&[f64]>, stride: usize, pad: Pad) -> Arr {
    let (b, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, k) = (kshape[0], kshape[2]);
    let oh = (h + pad.top + pad.bottom - k) / stride + 1;
    let ow = (w + pad.left + pad.right - k) / stride + 1;
    let mut y = Arr::zeros(&[b, co, oh, ow]);
    for n in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for i in 0..ci {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad.top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad.left as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data[((n * ci + i) * h + iy as usize) * w + ix as usize]
                                    * kernel[((o * ci + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    y.data[((n * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution: scatter every input site into the output.
pub fn deconv2d(
    x: &Arr,
    kernel: &[f64],
    kshape: &[usize],
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Arr {
    let (b, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, k) = (kshape[0], kshape[2]);
    let oh = (h - 1) * stride + k + output_padding - 2 * padding;
    let ow = (w - 1) * stride + k + output_padding - 2 * padding;
    let mut y = Arr::zeros(&[b, co, oh, ow]);
    for n in 0..b {
        for o in 0..co {
            for i in 0..ci {
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = x.data[((n * ci + i) * h + iy) * w + ix];
                        for ky in 0..k {
                            let oy = (iy * stride + ky) as isize - padding as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (ix * stride + kx) as isize - padding as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                y.data[((n * co + o) * oh + oy as usize) * ow + ox as usize]
                                    += xv * kernel[((o * ci + i) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bs) = bias {
        for n in 0..b {
            for o in 0..co {
                for s in 0..oh * ow {
                    y.data[(n * co + o) * oh * ow + s] += bs[o];
                }
            }
        }
    }
    y
}

pub fn conv_layer(conv: &Conv2d, sn: Option<&SpectralNorm>, x: &Arr) -> Arr {
    let w = effective_kernel(&conv.kernel, sn);
    let bias = conv.bias.as_ref().map(param_f64);
    conv2d(x, &w, &conv.kernel.shape(), bias.as_deref(), conv.stride, conv.pad)
}

pub fn sn_conv_layer(conv: &SnConv2d, x: &Arr) -> Arr {
    conv_layer(&conv.conv, conv.sn.as_ref(), x)
}

pub fn deconv_layer(conv: &TransposedConv2d, sn: Option<&SpectralNorm>, x: &Arr) -> Arr {
    let w = effective_kernel(&conv.kernel, sn);
    let bias = conv.bias.as_ref().map(param_f64);
    deconv2d(
        x,
        &w,
        &conv.kernel.shape(),
        bias.as_deref(),
        conv.stride,
        conv.padding,
        conv.output_padding,
    )
}

pub fn sn_deconv_layer(conv: &SnDeconv2d, x: &Arr) -> Arr {
    deconv_layer(&conv.conv, conv.sn.as_ref(), x)
}

/// Batch normalization; `train` selects batch statistics (biased variance)
/// over the stored running statistics.
pub fn batchnorm(bn: &BatchNorm2d, x: &Arr, train: bool) -> Arr {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let gamma = param_f64(&bn.gamma);
    let beta = param_f64(&bn.beta);
    let (mean, var) = if train {
        let count = (b * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for n in 0..b {
                for i in 0..h * w {
                    s += x.data[(n * c + ch) * h * w + i];
                }
            }
            mean[ch] = s / count;
            let mut v = 0.0;
            for n in 0..b {
                for i in 0..h * w {
                    let d = x.data[(n * c + ch) * h * w + i] - mean[ch];
                    v += d * d;
                }
            }
            var[ch] = v / count;
        }
        (mean, var)
    } else {
        (param_f64(&bn.running_mean), param_f64(&bn.running_var))
    };
    let mut y = Arr::zeros(&x.shape);
    for n in 0..b {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + bn.eps as f64).sqrt();
            for i in 0..h * w {
                let idx = (n * c + ch) * h * w + i;
                y.data[idx] = gamma[ch] * (x.data[idx] - mean[ch]) * inv + beta[ch];
            }
        }
    }
    y
}

pub fn relu(x: &Arr) -> Arr {
    Arr { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

pub fn leaky_relu(x: &Arr, slope: f64) -> Arr {
    Arr {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect(),
    }
}

pub fn tanh(x: &Arr) -> Arr {
    Arr { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.tanh()).collect() }
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    Arr {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    }
}

pub fn concat_channels(a: &Arr, b: &Arr) -> Arr {
    let (n, ca, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
    let cb = b.shape[1];
    let mut y = Arr::zeros(&[n, ca + cb, h, w]);
    let plane = h * w;
    for i in 0..n {
        let dst = i * (ca + cb) * plane;
        y.data[dst..dst + ca * plane].copy_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
        y.data[dst + ca * plane..dst + (ca + cb) * plane]
            .copy_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
    }
    y
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

/// One position-sensitive attention pass along the layer's axis, computed
/// per head directly from the defining sum
///   y_j = Σ_w softmax_w(q_jᵀk_w + q_jᵀr^q_{j−w} + k_wᵀr^k_{j−w}) (v_w + r^v_{j−w}).
pub fn axial_attention(attn: &AxialAttention, x: &Arr) -> Arr {
    let q = conv_layer(&attn.wq, None, x);
    let k = conv_layer(&attn.wk, None, x);
    let v = conv_layer(&attn.wv, None, x);
    let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
    let (heads, dqk, dv) = (attn.heads, attn.d_qk, attn.d_v);
    let scale = if attn.scale_logits { 1.0 / (dqk as f64).sqrt() } else { 1.0 };
    let rq = param_f64(&attn.r_q);
    let rk = param_f64(&attn.r_k);
    let rv = param_f64(&attn.r_v);
    let table_w = 2 * attn.max_len - 1;
    let (other, len) = match attn.axis {
        Axis::Width => (h, w),
        Axis::Height => (w, h),
    };
    // map (non-attended index, position along the axis) to the spatial site
    let site = |io: usize, s: usize| match attn.axis {
        Axis::Width => io * w + s,
        Axis::Height => s * w + io,
    };
    let mut mixed = Arr::zeros(&[b, heads * dv, h, w]);
    let plane = h * w;
    for n in 0..b {
        for hd in 0..heads {
            for io in 0..other {
                let qat = |s: usize, d: usize| q.data[(n * heads * dqk + hd * dqk + d) * plane + site(io, s)];
                let kat = |s: usize, d: usize| k.data[(n * heads * dqk + hd * dqk + d) * plane + site(io, s)];
                let vat = |s: usize, d: usize| v.data[(n * heads * dv + hd * dv + d) * plane + site(io, s)];
                for j in 0..len {
                    let mut logits = vec![0.0; len];
                    for (wp, lg) in logits.iter_mut().enumerate() {
                        let o = j + attn.max_len - 1 - wp;
                        let mut acc = 0.0;
                        for d in 0..dqk {
                            let r_q = rq[(hd * dqk + d) * table_w + o];
                            let r_k = rk[(hd * dqk + d) * table_w + o];
                            acc += qat(j, d) * kat(wp, d) + qat(j, d) * r_q + kat(wp, d) * r_k;
                        }
                        *lg = acc * scale;
                    }
                    softmax_inplace(&mut logits);
                    for d in 0..dv {
                        let mut acc = 0.0;
                        for (wp, &a) in logits.iter().enumerate() {
                            let o = j + attn.max_len - 1 - wp;
                            acc += a * (vat(wp, d) + rv[(hd * dv + d) * table_w + o]);
                        }
                        mixed.data[(n * heads * dv + hd * dv + d) * plane + site(io, j)] = acc;
                    }
                }
            }
        }
    }
    conv_layer(&attn.wout, None, &mixed)
}

/// Content-only attention over all h·w positions.
pub fn full2d_attention(attn: &FullAttention2d, x: &Arr) -> Arr {
    let q = conv_layer(&attn.wq, None, x);
    let k = conv_layer(&attn.wk, None, x);
    let v = conv_layer(&attn.wv, None, x);
    let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
    let (heads, dqk, dv) = (attn.heads, attn.d_qk, attn.d_v);
    let scale = if attn.scale_logits { 1.0 / (dqk as f64).sqrt() } else { 1.0 };
    let l = h * w;
    let mut mixed = Arr::zeros(&[b, heads * dv, h, w]);
    for n in 0..b {
        for hd in 0..heads {
            let qb = (n * heads * dqk + hd * dqk) * l;
            let vb = (n * heads * dv + hd * dv) * l;
            for j in 0..l {
                let mut logits = vec![0.0; l];
                for (wp, lg) in logits.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for d in 0..dqk {
                        acc += q.data[qb + d * l + j] * k.data[qb + d * l + wp];
                    }
                    *lg = acc * scale;
                }
                softmax_inplace(&mut logits);
                for d in 0..dv {
                    let mut acc = 0.0;
                    for (wp, &a) in logits.iter().enumerate() {
                        acc += a * v.data[vb + d * l + wp];
                    }
                    mixed.data[vb + d * l + j] = acc;
                }
            }
        }
    }
    conv_layer(&attn.wout, None, &mixed)
}

pub fn axial_block(block: &AxialBlock, x: &Arr, train: bool) -> Arr {
    let h = conv_layer(&block.reduce, None, x);
    let h = batchnorm(&block.bn_in, &h, train);
    let h = relu(&h);
    let h = axial_attention(&block.attn_h, &h);
    let h = axial_attention(&block.attn_w, &h);
    let o = conv_layer(&block.restore, None, &h);
    let o = batchnorm(&block.bn_out, &o, train);
    relu(&add(&o, x))
}

pub fn full2d_block(block: &Full2dBlock, x: &Arr, train: bool) -> Arr {
    let h = conv_layer(&block.reduce, None, x);
    let h = batchnorm(&block.bn_in, &h, train);
    let h = relu(&h);
    let h = full2d_attention(&block.attn, &h);
    let o = conv_layer(&block.restore, None, &h);
    let o = batchnorm(&block.bn_out, &o, train);
    relu(&add(&o, x))
}

pub fn residual_block(block: &ResidualBlock, x: &Arr, train: bool) -> Arr {
    let h = sn_conv_layer(&block.conv1, x);
    let h = batchnorm(&block.bn1, &h, train);
    let h = relu(&h);
    let h = sn_conv_layer(&block.conv2, &h);
    let h = batchnorm(&block.bn2, &h, train);
    add(&h, x)
}

fn attn_stage(stage: &AttnStage, x: &Arr, train: bool) -> Arr {
    match stage {
        AttnStage::Axial(b) => axial_block(b, x, train),
        AttnStage::Full(b) => full2d_block(b, x, train),
        AttnStage::Skip => x.clone(),
    }
}

pub fn generator(g: &Generator, x: &Arr, train: bool) -> Result<Arr> {
    let base = g.cfg.base_resolution;
    if x.shape.len() != 4
        || x.shape[1] != g.cfg.thermal_channels
        || x.shape[2] != base
        || x.shape[3] != base
    {
        return Err(Error::dim("generator_reference", format!("bad input {:?}", x.shape)));
    }
    let mut h = x.clone();
    for stage in &g.stages {
        h = match stage {
            GenStage::Conv(conv, bn) => relu(&batchnorm(bn, &sn_conv_layer(conv, &h), train)),
            GenStage::Up(deconv, bn) => relu(&batchnorm(bn, &sn_deconv_layer(deconv, &h), train)),
            GenStage::Attn(attn) => attn_stage(attn, &h, train),
            GenStage::Res(res) => residual_block(res, &h, train),
        };
    }
    Ok(tanh(&conv_layer(&g.output, None, &h)))
}

pub fn discriminator(d: &Discriminator, thermal_up: &Arr, visible: &Arr, train: bool) -> Result<(Arr, Vec<Arr>)> {
    let hr = d.cfg.output_resolution();
    if thermal_up.shape[2..] != [hr, hr] || visible.shape[2..] != [hr, hr] {
        return Err(Error::dim("discriminator_reference", "bad input extents".to_string()));
    }
    let x = concat_channels(thermal_up, visible);
    let mut feats = Vec::with_capacity(4);
    let h = leaky_relu(&sn_conv_layer(&d.c1, &x), 0.2);
    feats.push(h.clone());
    let h = leaky_relu(&sn_conv_layer(&d.c2, &h), 0.2);
    let h = attn_stage(&d.a1, &h, train);
    feats.push(h.clone());
    let h = leaky_relu(&sn_conv_layer(&d.c3, &h), 0.2);
    let h = attn_stage(&d.a2, &h, train);
    feats.push(h.clone());
    let h = leaky_relu(&sn_conv_layer(&d.c4, &h), 0.2);
    feats.push(h.clone());
    let patch = conv_layer(&d.output, None, &h);
    Ok((patch, feats))
}

// ── training objectives ──

pub fn hinge_d(d_real: &Arr, d_fake: &Arr) -> f64 {
    let real: f64 = d_real.data.iter().map(|&v| (1.0 - v).max(0.0)).sum::<f64>()
        / d_real.data.len() as f64;
    let fake: f64 = d_fake.data.iter().map(|&v| (1.0 + v).max(0.0)).sum::<f64>()
        / d_fake.data.len() as f64;
    real + fake
}

pub fn hinge_g(d_fake: &Arr) -> f64 {
    -d_fake.data.iter().sum::<f64>() / d_fake.data.len() as f64
}

pub fn huber(pred: &Arr, target: &Arr) -> f64 {
    let total: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = (p - t).abs();
            if d < 1.0 { 0.5 * d * d } else { d - 0.5 }
        })
        .sum();
    total / pred.data.len() as f64
}

fn mean_abs_diff(a: &Arr, b: &Arr) -> f64 {
    a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64
}

pub fn feature_matching(real: &[Arr], fake: &[Arr]) -> f64 {
    real.iter().zip(fake).map(|(r, f)| mean_abs_diff(r, f)).sum()
}

pub fn perceptual_features(extractor: &PerceptualExtractor, x: &Arr) -> Vec<Arr> {
    let mut taps = Vec::with_capacity(extractor.stages.len());
    let mut h = x.clone();
    for (c1, c2) in &extractor.stages {
        h = relu(&conv_layer(c1, None, &h));
        h = relu(&conv_layer(c2, None, &h));
        taps.push(h.clone());
    }
    taps
}

pub fn perceptual(extractor: &PerceptualExtractor, pred: &Arr, target: &Arr) -> f64 {
    let fp = perceptual_features(extractor, pred);
    let ft = perceptual_features(extractor, target);
    fp.iter().zip(&ft).map(|(a, b)| mean_abs_diff(a, b)).sum()
}

pub fn total_generator(l_g: f64, l_h: f64, l_p: f64, l_fm: f64, w: &LossWeights) -> f64 {
    l_g + w.lambda_h as f64 * l_h + w.lambda_p as f64 * l_p + w.lambda_fm as f64 * l_fm
}
