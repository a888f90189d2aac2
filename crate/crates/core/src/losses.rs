//! Training objectives: hinge adversarial terms, Huber reconstruction,
//! perceptual distance through a fixed feature pyramid, discriminator
//! feature matching, and their weighted combination.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fwd, Pad};
use crate::tensor::{Param, Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Weights of the non-adversarial generator terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_h: f32,
    pub lambda_p: f32,
    pub lambda_fm: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_h: 100.0, lambda_p: 10.0, lambda_fm: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_h, self.lambda_p, self.lambda_fm];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Margin objective for the discriminator:
/// mean(max(0, 1 − d_real)) + mean(max(0, 1 + d_fake)).
/// The two maps may have different shapes; each is averaged on its own.
pub fn hinge_d_loss(tape: &mut Tape, d_real: TensorId, d_fake: TensorId) -> Result<TensorId> {
    let r = tape.scale(d_real, -1.0)?;
    let r = tape.add_scalar(r, 1.0)?;
    let r = tape.relu(r)?;
    let real_term = tape.mean(r)?;
    let f = tape.add_scalar(d_fake, 1.0)?;
    let f = tape.relu(f)?;
    let fake_term = tape.mean(f)?;
    tape.add(real_term, fake_term)
}

/// Adversarial term for the generator: −mean(d_fake).
pub fn hinge_g_loss(tape: &mut Tape, d_fake: TensorId) -> Result<TensorId> {
    let m = tape.mean(d_fake)?;
    tape.scale(m, -1.0)
}

/// Smooth-L1 reconstruction: 0.5·d² inside the unit band, |d| − 0.5 outside,
/// averaged over every element. Written as 0.5·d² − 0.5·relu(|d| − 1)²,
/// which agrees on both branches and differentiates to clamp(d, −1, 1).
pub fn huber_loss(tape: &mut Tape, pred: TensorId, target: TensorId) -> Result<TensorId> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(
            "huber_loss",
            format!("pred {:?} vs target {:?}", tape.shape(pred), tape.shape(target)),
        ));
    }
    let d = tape.sub(pred, target)?;
    let q = tape.square(d)?;
    let q = tape.scale(q, 0.5)?;
    let t = tape.abs(d)?;
    let t = tape.add_scalar(t, -1.0)?;
    let t = tape.relu(t)?;
    let t = tape.square(t)?;
    let t = tape.scale(t, 0.5)?;
    let h = tape.sub(q, t)?;
    tape.mean(h)
}

/// Mean absolute difference per scale, summed. The real-branch features are
/// re-inserted as constants, so no gradient ever reaches whatever produced
/// them — only the fake branch trains.
pub fn feature_matching_loss(tape: &mut Tape, real: &[TensorId], fake: &[TensorId]) -> Result<TensorId> {
    if real.len() != fake.len() {
        return Err(Error::contract(format!(
            "feature lists differ in length: {} real vs {} fake",
            real.len(),
            fake.len()
        )));
    }
    let mut total: Option<TensorId> = None;
    for (&r, &f) in real.iter().zip(fake) {
        let frozen = tape.val(r).clone();
        let rc = tape.constant(frozen);
        let d = tape.sub(f, rc)?;
        let d = tape.abs(d)?;
        let m = tape.mean(d)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::contract("feature matching needs at least one scale"))
}

const PYRAMID_CHANNELS: [usize; 5] = [16, 32, 64, 128, 128];

/// Fixed five-scale feature pyramid over RGB images. Two 3×3 convolutions
/// per scale with the first of every scale past the first downsampling by 2;
/// features are tapped after each scale's second convolution. Weights are
/// seeded buffers: they never receive gradients, and the same seed always
/// yields the same features.
pub struct PerceptualExtractor {
    pub(crate) stages: Vec<(Conv2d, Conv2d)>,
}

fn frozen_conv(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Conv2d {
    // Variance-preserving scale for relu stacks; the 0.02 default used by the
    // trainable layers would collapse activations after ten layers without
    // batch norm in between.
    let std = (2.0 / (in_ch * 9) as f32).sqrt();
    Conv2d {
        kernel: Param::buffer(Tensor::randn(&[out_ch, in_ch, 3, 3], std, rng)),
        bias: Some(Param::buffer(Tensor::zeros(&[out_ch]))),
        stride,
        pad: Pad::uniform(1),
    }
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(PYRAMID_CHANNELS.len());
        let mut in_ch = 3;
        for (i, &ch) in PYRAMID_CHANNELS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let c1 = frozen_conv(in_ch, ch, stride, &mut rng);
            let c2 = frozen_conv(ch, ch, 1, &mut rng);
            stages.push((c1, c2));
            in_ch = ch;
        }
        PerceptualExtractor { stages }
    }

    /// Activations after each scale's second convolution, shallowest first.
    pub fn features(&self, fw: &mut Fwd, x: TensorId) -> Result<Vec<TensorId>> {
        let shape = fw.tape.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dim("perceptual_features", format!("need [n,3,h,w], got {shape:?}")));
        }
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (c1, c2) in &self.stages {
            h = c1.forward(fw, h)?;
            h = fw.tape.relu(h)?;
            h = c2.forward(fw, h)?;
            h = fw.tape.relu(h)?;
            taps.push(h);
        }
        Ok(taps)
    }

    /// Named weights, exposed so an externally trained set can be loaded in
    /// place of the seeded ones.
    pub fn weights(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        for (i, (c1, c2)) in self.stages.iter().enumerate() {
            for (j, c) in [c1, c2].into_iter().enumerate() {
                let prefix = format!("pe.s{}.c{}", i + 1, j + 1);
                out.push((format!("{prefix}.kernel"), c.kernel.clone()));
                if let Some(b) = &c.bias {
                    out.push((format!("{prefix}.bias"), b.clone()));
                }
            }
        }
        out
    }
}

/// Sum over pyramid scales of mean absolute feature difference.
pub fn perceptual_loss(
    fw: &mut Fwd,
    extractor: &PerceptualExtractor,
    pred: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    if fw.tape.shape(pred) != fw.tape.shape(target) {
        return Err(Error::dim(
            "perceptual_loss",
            format!("pred {:?} vs target {:?}", fw.tape.shape(pred), fw.tape.shape(target)),
        ));
    }
    let fp = extractor.features(fw, pred)?;
    let ft = extractor.features(fw, target)?;
    let mut total: Option<TensorId> = None;
    for (&a, &b) in fp.iter().zip(&ft) {
        let d = fw.tape.sub(a, b)?;
        let d = fw.tape.abs(d)?;
        let m = fw.tape.mean(d)?;
        total = Some(match total {
            Some(t) => fw.tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::contract("extractor produced no scales"))
}

/// L_G + λ_H·L_H + λ_P·L_P + λ_FM·L_FM. Zero-weight terms are skipped
/// entirely, contributing neither value nor gradient.
pub fn total_generator_loss(
    tape: &mut Tape,
    l_g: TensorId,
    l_h: TensorId,
    l_p: TensorId,
    l_fm: TensorId,
    weights: &LossWeights,
) -> Result<TensorId> {
    weights.validate()?;
    let mut total = l_g;
    for (lambda, term) in [
        (weights.lambda_h, l_h),
        (weights.lambda_p, l_p),
        (weights.lambda_fm, l_fm),
    ] {
        if lambda != 0.0 {
            let s = tape.scale(term, lambda)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}
