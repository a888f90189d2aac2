//! Generator and discriminator assembled from the fixed layer strings:
//! generator C64-C128-C256-C512-D256-A256-C256-D128-A128-C128-D64-R64-F,
//! discriminator C64-C128-A128-C256-A256-C512-F. Widths can be divided down
//! for desk-scale runs and the attention stages swapped (axial / none /
//! all-pairs) without touching the surrounding stack.

use crate::error::{Error, Result};
use crate::nn::{
    AxialBlock, BatchNorm2d, Conv2d, Full2dBlock, Fwd, Pad, ResidualBlock, SnConv2d, SnDeconv2d,
    TransposedConv2d,
};
use crate::tensor::{Param, TensorId};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttentionKind {
    /// Height-then-width factorized attention blocks (the default).
    Axial,
    /// Attention stages removed entirely.
    None,
    /// All-pairs attention over flattened positions (quadratic ablation).
    Full2d,
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(AttentionKind::Axial),
            "none" => Ok(AttentionKind::None),
            "full2d" => Ok(AttentionKind::Full2d),
            other => Err(Error::config(format!(
                "unknown attention mode {other:?} (expected axial, none or full2d)"
            ))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Axial => "axial",
            AttentionKind::None => "none",
            AttentionKind::Full2d => "full2d",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    /// Thermal input channels: 1 conventional, 3 polarimetric (Stokes).
    pub thermal_channels: usize,
    /// Low-resolution input edge length; the generator emits 8× this.
    pub base_resolution: usize,
    /// Divisor applied to every layer width (1 = full-size network).
    pub channel_div: usize,
    pub attention: AttentionKind,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            thermal_channels: 1,
            base_resolution: 16,
            channel_div: 1,
            attention: AttentionKind::Axial,
            heads: 8,
        }
    }
}

impl ModelConfig {
    pub fn output_resolution(&self) -> usize {
        self.base_resolution * 8
    }

    /// Channel width after desk-scale division, never collapsing to zero.
    pub fn width(&self, paper_width: usize) -> usize {
        (paper_width / self.channel_div).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thermal_channels != 1 && self.thermal_channels != 3 {
            return Err(Error::config(format!(
                "thermal_channels must be 1 or 3, got {}",
                self.thermal_channels
            )));
        }
        if self.base_resolution < 2 {
            return Err(Error::config(format!(
                "base_resolution must be at least 2, got {}",
                self.base_resolution
            )));
        }
        if self.channel_div == 0 || self.heads == 0 {
            return Err(Error::config("channel_div and heads must be positive".to_string()));
        }
        Ok(())
    }
}

/// One attention stage, shaped by the configured mode. `Skip` keeps the
/// surrounding stack intact while contributing zero parameters.
pub(crate) enum AttnStage {
    Axial(AxialBlock),
    Full(Full2dBlock),
    Skip,
}

impl AttnStage {
    fn new(kind: AttentionKind, channels: usize, heads: usize, extent: usize, rng: &mut impl Rng) -> Result<Self> {
        match kind {
            AttentionKind::Axial => {
                Ok(AttnStage::Axial(AxialBlock::new(channels, heads, extent, extent, rng)?))
            }
            AttentionKind::Full2d => {
                Ok(AttnStage::Full(Full2dBlock::new(channels, heads, extent * extent, rng)?))
            }
            AttentionKind::None => Ok(AttnStage::Skip),
        }
    }

    fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        match self {
            AttnStage::Axial(b) => b.forward(fw, x),
            AttnStage::Full(b) => b.forward(fw, x),
            AttnStage::Skip => Ok(x),
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        let inner = match self {
            AttnStage::Axial(b) => b.parameters(),
            AttnStage::Full(b) => b.parameters(),
            AttnStage::Skip => Vec::new(),
        };
        for (name, p) in inner {
            out.push((format!("{prefix}.{name}"), p));
        }
    }

    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        match self {
            AttnStage::Axial(b) => {
                push_bn_buffers(&format!("{prefix}.bn_in"), &b.bn_in, out);
                push_bn_buffers(&format!("{prefix}.bn_out"), &b.bn_out, out);
            }
            AttnStage::Full(b) => {
                push_bn_buffers(&format!("{prefix}.bn_in"), &b.bn_in, out);
                push_bn_buffers(&format!("{prefix}.bn_out"), &b.bn_out, out);
            }
            AttnStage::Skip => {}
        }
    }
}

fn push_plain_conv_params(prefix: &str, conv: &Conv2d, out: &mut Vec<(String, Param)>) {
    out.push((format!("{prefix}.kernel"), conv.kernel.clone()));
    if let Some(b) = &conv.bias {
        out.push((format!("{prefix}.bias"), b.clone()));
    }
}

fn push_conv_params(prefix: &str, conv: &SnConv2d, out: &mut Vec<(String, Param)>) {
    push_plain_conv_params(prefix, &conv.conv, out);
}

fn push_conv_buffers(prefix: &str, conv: &SnConv2d, out: &mut Vec<(String, Param)>) {
    if let Some(sn) = &conv.sn {
        out.push((format!("{prefix}.sn_u"), sn.u.clone()));
        out.push((format!("{prefix}.sn_v"), sn.v.clone()));
    }
}

fn push_deconv_params(prefix: &str, conv: &SnDeconv2d, out: &mut Vec<(String, Param)>) {
    out.push((format!("{prefix}.kernel"), conv.conv.kernel.clone()));
    if let Some(b) = &conv.conv.bias {
        out.push((format!("{prefix}.bias"), b.clone()));
    }
}

fn push_deconv_buffers(prefix: &str, conv: &SnDeconv2d, out: &mut Vec<(String, Param)>) {
    if let Some(sn) = &conv.sn {
        out.push((format!("{prefix}.sn_u"), sn.u.clone()));
        out.push((format!("{prefix}.sn_v"), sn.v.clone()));
    }
}

fn push_bn_params(prefix: &str, bn: &BatchNorm2d, out: &mut Vec<(String, Param)>) {
    out.push((format!("{prefix}.gamma"), bn.gamma.clone()));
    out.push((format!("{prefix}.beta"), bn.beta.clone()));
}

fn push_bn_buffers(prefix: &str, bn: &BatchNorm2d, out: &mut Vec<(String, Param)>) {
    out.push((format!("{prefix}.running_mean"), bn.running_mean.clone()));
    out.push((format!("{prefix}.running_var"), bn.running_var.clone()));
}

/// One entry in the generator's ordered stack.
pub(crate) enum GenStage {
    /// 3×3 conv (stride 1, pad 1) + batch norm + ReLU.
    Conv(SnConv2d, BatchNorm2d),
    /// 3×3 transposed conv doubling the extent + batch norm + ReLU.
    Up(SnDeconv2d, BatchNorm2d),
    Attn(AttnStage),
    Res(ResidualBlock),
}

/// LR thermal → HR visible synthesis network. Spectral normalization wraps
/// every conv except those inside attention stages and the final output conv.
pub struct Generator {
    pub cfg: ModelConfig,
    pub(crate) stages: Vec<GenStage>,
    /// 1×1 conv to 3 channels, followed by tanh; deliberately un-normalized.
    pub(crate) output: Conv2d,
}

impl Generator {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = |k| cfg.width(k);
        let base = cfg.base_resolution;
        let heads = cfg.heads;
        let mut stages = Vec::new();
        let conv = |i, o, rng: &mut _| SnConv2d::spectral(Conv2d::new(i, o, 3, 1, 1, false, rng), rng);
        let up = |i, o, rng: &mut _| {
            SnDeconv2d::spectral(TransposedConv2d::new(i, o, 3, 2, 1, 1, false, rng), rng)
        };
        // C64 - C128 - C256 - C512 at the input extent
        stages.push(GenStage::Conv(conv(cfg.thermal_channels, w(64), rng), BatchNorm2d::new(w(64), rng)));
        stages.push(GenStage::Conv(conv(w(64), w(128), rng), BatchNorm2d::new(w(128), rng)));
        stages.push(GenStage::Conv(conv(w(128), w(256), rng), BatchNorm2d::new(w(256), rng)));
        stages.push(GenStage::Conv(conv(w(256), w(512), rng), BatchNorm2d::new(w(512), rng)));
        // D256 - A256 - C256 at 2× extent
        stages.push(GenStage::Up(up(w(512), w(256), rng), BatchNorm2d::new(w(256), rng)));
        stages.push(GenStage::Attn(AttnStage::new(cfg.attention, w(256), heads, base * 2, rng)?));
        stages.push(GenStage::Conv(conv(w(256), w(256), rng), BatchNorm2d::new(w(256), rng)));
        // D128 - A128 - C128 at 4× extent
        stages.push(GenStage::Up(up(w(256), w(128), rng), BatchNorm2d::new(w(128), rng)));
        stages.push(GenStage::Attn(AttnStage::new(cfg.attention, w(128), heads, base * 4, rng)?));
        stages.push(GenStage::Conv(conv(w(128), w(128), rng), BatchNorm2d::new(w(128), rng)));
        // D64 - R64 at the output extent
        stages.push(GenStage::Up(up(w(128), w(64), rng), BatchNorm2d::new(w(64), rng)));
        stages.push(GenStage::Res(ResidualBlock::new(w(64), true, rng)));
        let output = Conv2d::new(w(64), 3, 1, 1, 0, true, rng);
        Ok(Generator { cfg, stages, output })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let base = self.cfg.base_resolution;
        let ok = shape.len() == 4
            && shape[1] == self.cfg.thermal_channels
            && shape[2] == base
            && shape[3] == base;
        if !ok {
            return Err(Error::dim(
                "generator",
                format!(
                    "expected [b, {}, {base}, {base}] input, got {shape:?}",
                    self.cfg.thermal_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        self.check_input(&fw.tape.shape(x))?;
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                GenStage::Conv(conv, bn) => {
                    let c = conv.forward(fw, h)?;
                    let n = bn.forward(fw, c)?;
                    fw.tape.relu(n)?
                }
                GenStage::Up(deconv, bn) => {
                    let c = deconv.forward(fw, h)?;
                    let n = bn.forward(fw, c)?;
                    fw.tape.relu(n)?
                }
                GenStage::Attn(attn) => attn.forward(fw, h)?,
                GenStage::Res(res) => res.forward(fw, h)?,
            };
        }
        let o = self.output.forward(fw, h)?;
        fw.tape.tanh(o)
    }

    pub fn parameters(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let p = format!("g.s{i:02}");
            match stage {
                GenStage::Conv(conv, bn) => {
                    push_conv_params(&format!("{p}.conv"), conv, &mut out);
                    push_bn_params(&format!("{p}.bn"), bn, &mut out);
                }
                GenStage::Up(deconv, bn) => {
                    push_deconv_params(&format!("{p}.deconv"), deconv, &mut out);
                    push_bn_params(&format!("{p}.bn"), bn, &mut out);
                }
                GenStage::Attn(attn) => attn.collect_params(&format!("{p}.attn"), &mut out),
                GenStage::Res(res) => {
                    push_conv_params(&format!("{p}.res.conv1"), &res.conv1, &mut out);
                    push_bn_params(&format!("{p}.res.bn1"), &res.bn1, &mut out);
                    push_conv_params(&format!("{p}.res.conv2"), &res.conv2, &mut out);
                    push_bn_params(&format!("{p}.res.bn2"), &res.bn2, &mut out);
                }
            }
        }
        push_plain_conv_params("g.out", &self.output, &mut out);
        out
    }

    pub fn buffers(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let p = format!("g.s{i:02}");
            match stage {
                GenStage::Conv(conv, bn) => {
                    push_conv_buffers(&format!("{p}.conv"), conv, &mut out);
                    push_bn_buffers(&format!("{p}.bn"), bn, &mut out);
                }
                GenStage::Up(deconv, bn) => {
                    push_deconv_buffers(&format!("{p}.deconv"), deconv, &mut out);
                    push_bn_buffers(&format!("{p}.bn"), bn, &mut out);
                }
                GenStage::Attn(attn) => attn.collect_buffers(&format!("{p}.attn"), &mut out),
                GenStage::Res(res) => {
                    push_conv_buffers(&format!("{p}.res.conv1"), &res.conv1, &mut out);
                    push_bn_buffers(&format!("{p}.res.bn1"), &res.bn1, &mut out);
                    push_conv_buffers(&format!("{p}.res.conv2"), &res.conv2, &mut out);
                    push_bn_buffers(&format!("{p}.res.bn2"), &res.bn2, &mut out);
                }
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }
}

/// Patch discriminator over the concatenated (upsampled thermal, visible)
/// pair. Four conv scales, each exposed as a feature map for the
/// feature-matching loss; attention stages augment the middle two scales.
pub struct Discriminator {
    pub cfg: ModelConfig,
    pub(crate) c1: SnConv2d,
    pub(crate) c2: SnConv2d,
    pub(crate) a1: AttnStage,
    pub(crate) c3: SnConv2d,
    pub(crate) a2: AttnStage,
    pub(crate) c4: SnConv2d,
    /// 1×1 conv to one channel of patch logits; un-normalized.
    pub(crate) output: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = |k| cfg.width(k);
        let base = cfg.base_resolution;
        let in_ch = cfg.thermal_channels + 3;
        let halve =
            |i, o, rng: &mut _| SnConv2d::spectral(Conv2d::new(i, o, 4, 2, 1, true, rng), rng);
        Ok(Discriminator {
            cfg,
            c1: halve(in_ch, w(64), rng),
            c2: halve(w(64), w(128), rng),
            a1: AttnStage::new(cfg.attention, w(128), cfg.heads, base * 2, rng)?,
            c3: halve(w(128), w(256), rng),
            a2: AttnStage::new(cfg.attention, w(256), cfg.heads, base, rng)?,
            // stride-1 4×4 with uneven padding keeps the patch extent intact
            c4: SnConv2d::spectral(
                Conv2d::with_pad(w(256), w(512), 4, 1, Pad::asym(1, 2), true, rng),
                rng,
            ),
            output: Conv2d::new(w(512), 1, 1, 1, 0, true, rng),
        })
    }

    fn check_inputs(&self, xs: &[usize], ys: &[usize]) -> Result<()> {
        let hr = self.cfg.output_resolution();
        let ok = xs.len() == 4
            && ys.len() == 4
            && xs[0] == ys[0]
            && xs[1] == self.cfg.thermal_channels
            && ys[1] == 3
            && xs[2..] == [hr, hr]
            && ys[2..] == [hr, hr];
        if !ok {
            return Err(Error::dim(
                "discriminator",
                format!(
                    "expected thermal [b, {}, {hr}, {hr}] and visible [b, 3, {hr}, {hr}], got {xs:?} and {ys:?}",
                    self.cfg.thermal_channels
                ),
            ));
        }
        Ok(())
    }

    /// Returns the patch logit map plus the four per-scale feature maps
    /// (after each scale's activation and attention stage).
    pub fn forward(
        &self,
        fw: &mut Fwd,
        thermal_up: TensorId,
        visible: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        self.check_inputs(&fw.tape.shape(thermal_up), &fw.tape.shape(visible))?;
        let x = fw.tape.concat_channels(thermal_up, visible)?;
        let mut feats = Vec::with_capacity(4);
        let h = self.c1.forward(fw, x)?;
        let h = fw.tape.leaky_relu(h, 0.2)?;
        feats.push(h);
        let h = self.c2.forward(fw, h)?;
        let h = fw.tape.leaky_relu(h, 0.2)?;
        let h = self.a1.forward(fw, h)?;
        feats.push(h);
        let h = self.c3.forward(fw, h)?;
        let h = fw.tape.leaky_relu(h, 0.2)?;
        let h = self.a2.forward(fw, h)?;
        feats.push(h);
        let h = self.c4.forward(fw, h)?;
        let h = fw.tape.leaky_relu(h, 0.2)?;
        feats.push(h);
        let patch = self.output.forward(fw, h)?;
        Ok((patch, feats))
    }

    pub fn parameters(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        push_conv_params("d.c1", &self.c1, &mut out);
        push_conv_params("d.c2", &self.c2, &mut out);
        self.a1.collect_params("d.a1", &mut out);
        push_conv_params("d.c3", &self.c3, &mut out);
        self.a2.collect_params("d.a2", &mut out);
        push_conv_params("d.c4", &self.c4, &mut out);
        push_plain_conv_params("d.out", &self.output, &mut out);
        out
    }

    pub fn buffers(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        push_conv_buffers("d.c1", &self.c1, &mut out);
        push_conv_buffers("d.c2", &self.c2, &mut out);
        self.a1.collect_buffers("d.a1", &mut out);
        push_conv_buffers("d.c3", &self.c3, &mut out);
        self.a2.collect_buffers("d.a2", &mut out);
        push_conv_buffers("d.c4", &self.c4, &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }
}
