use serde::{Deserialize, Serialize};

use super::{Ctx, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Every backbone downsamples by this factor; other sizes are padded.
pub const GENERATOR_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Encoder-decoder with skip connections.
    TinyUnet,
    /// Residual encoder with up-projection decoder.
    FcrnLike,
    /// Residual encoder with channel attention, up-projection decoder and
    /// multi-scale feature fusion.
    HuLike,
}

impl Backbone {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny_unet" => Ok(Self::TinyUnet),
            "fcrn_like" => Ok(Self::FcrnLike),
            "hu_like" => Ok(Self::HuLike),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// `min + (max - min) * sigmoid(x)`.
    ScaledSigmoid,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub backbone: Backbone,
    pub base_channels: usize,
    pub depth_range: (f64, f64),
    /// Learned stride-2 deconvolution as the last layer; nearest upsampling
    /// followed by a 3×3 convolution otherwise.
    pub final_upsample: bool,
    pub output: OutputActivation,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self::tiny_unet(16)
    }
}

impl GeneratorSpec {
    pub fn tiny_unet(base_channels: usize) -> Self {
        Self {
            backbone: Backbone::TinyUnet,
            base_channels,
            depth_range: (0.0, 10.0),
            final_upsample: true,
            output: OutputActivation::ScaledSigmoid,
        }
    }

    pub fn with_backbone(mut self, backbone: Backbone) -> Self {
        self.backbone = backbone;
        self
    }

    pub fn with_depth_range(mut self, min_m: f64, max_m: f64) -> Self {
        self.depth_range = (min_m, max_m);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("generator needs at least one base channel".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid depth range ({lo}, {hi})")));
        }
        Ok(())
    }
}

pub fn build_generator(spec: &GeneratorSpec) -> Result<Network> {
    spec.validate()?;
    let s = spec.clone();
    let dummy = Tensor::zeros(&[1, 3, 2 * GENERATOR_STRIDE, 2 * GENERATOR_STRIDE]);
    Network::declare(NetworkSpec::Generator(spec.clone()), vec![dummy], move |ctx, ins| {
        forward(&s, ctx, ins)
    })
}

pub(super) fn forward(spec: &GeneratorSpec, ctx: &mut Ctx<'_>, inputs: &[Var]) -> Result<Var> {
    let [x] = inputs else {
        return Err(Error::Shape("generator takes one image batch".into()));
    };
    let (_, c, h, w) = ctx.g.value(*x).dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("generator expects 3 channels, got {c}")));
    }
    // pad to the backbone stride and crop the prediction back
    let ph = h.div_ceil(GENERATOR_STRIDE) * GENERATOR_STRIDE;
    let pw = w.div_ceil(GENERATOR_STRIDE) * GENERATOR_STRIDE;
    let x = ctx.g.pad_replicate(*x, ph - h, pw - w)?;
    let feat = match spec.backbone {
        Backbone::TinyUnet => tiny_unet(ctx, x, spec.base_channels)?,
        Backbone::FcrnLike => fcrn_like(ctx, x, spec.base_channels, false)?,
        Backbone::HuLike => fcrn_like(ctx, x, spec.base_channels, true)?,
    };
    let logits = if spec.final_upsample {
        ctx.deconv("final.deconv", feat, 1, 4, 2, 1, true)?
    } else {
        let up = ctx.g.upsample_nearest(feat, 2)?;
        ctx.conv("final.conv", up, 1, 3, 1, 1, true)?
    };
    let logits = ctx.g.crop(logits, h, w)?;
    Ok(match spec.output {
        OutputActivation::ScaledSigmoid => {
            let (lo, hi) = spec.depth_range;
            let s = ctx.g.sigmoid(logits);
            ctx.g.affine(s, hi - lo, lo)
        }
        OutputActivation::Linear => logits,
    })
}

/// Returns half-resolution features with `c` channels.
fn tiny_unet(ctx: &mut Ctx<'_>, x: Var, c: usize) -> Result<Var> {
    let e1 = ctx.conv_bn_relu("enc1.down", x, c, 2)?;
    let skip1 = ctx.conv_bn_relu("enc1.conv", e1, c, 1)?;
    let e2 = ctx.conv_bn_relu("enc2.down", skip1, 2 * c, 2)?;
    let skip2 = ctx.conv_bn_relu("enc2.conv", e2, 2 * c, 1)?;
    let e3 = ctx.conv_bn_relu("enc3.down", skip2, 4 * c, 2)?;
    let bottleneck = ctx.conv_bn_relu("enc3.conv", e3, 4 * c, 1)?;

    let u2 = up_deconv(ctx, "dec2", bottleneck, 2 * c)?;
    let u2 = ctx.g.concat_channels(&[u2, skip2])?;
    let d2 = ctx.conv_bn_relu("dec2.conv", u2, 2 * c, 1)?;
    let u1 = up_deconv(ctx, "dec1", d2, c)?;
    let u1 = ctx.g.concat_channels(&[u1, skip1])?;
    ctx.conv_bn_relu("dec1.conv", u1, c, 1)
}

fn up_deconv(ctx: &mut Ctx<'_>, name: &str, x: Var, out: usize) -> Result<Var> {
    let y = ctx.deconv(&format!("{name}.deconv"), x, out, 4, 2, 1, false)?;
    let y = ctx.bn(&format!("{name}.deconv.bn"), y)?;
    Ok(ctx.g.relu(y))
}

/// Squeeze-and-excitation style channel reweighting.
fn channel_attention(ctx: &mut Ctx<'_>, name: &str, x: Var) -> Result<Var> {
    let (_, c, _, _) = ctx.g.value(x).dims4()?;
    let squeezed = ctx.g.global_avg_pool(x)?;
    let hidden = ctx.conv(&format!("{name}.fc1"), squeezed, (c / 4).max(1), 1, 1, 0, true)?;
    let hidden = ctx.g.relu(hidden);
    let gate = ctx.conv(&format!("{name}.fc2"), hidden, c, 1, 1, 0, true)?;
    let gate = ctx.g.sigmoid(gate);
    ctx.g.scale_channels(x, gate)
}

fn res_block(ctx: &mut Ctx<'_>, name: &str, x: Var, out: usize, stride: usize, attention: bool) -> Result<Var> {
    let (_, c, _, _) = ctx.g.value(x).dims4()?;
    let y = ctx.conv_bn_relu(&format!("{name}.conv1"), x, out, stride)?;
    let y = ctx.conv(&format!("{name}.conv2"), y, out, 3, 1, 1, false)?;
    let mut y = ctx.bn(&format!("{name}.conv2.bn"), y)?;
    if attention {
        y = channel_attention(ctx, &format!("{name}.se"), y)?;
    }
    let shortcut = if stride != 1 || c != out {
        let s = ctx.conv(&format!("{name}.proj"), x, out, 1, stride, 0, false)?;
        ctx.bn(&format!("{name}.proj.bn"), s)?
    } else {
        x
    };
    let sum = ctx.g.add(y, shortcut)?;
    Ok(ctx.g.relu(sum))
}

/// Nearest ×2 upsampling followed by a two-branch residual projection.
fn up_projection(ctx: &mut Ctx<'_>, name: &str, x: Var, out: usize) -> Result<Var> {
    let up = ctx.g.upsample_nearest(x, 2)?;
    let a = ctx.conv_bn_relu(&format!("{name}.conv1"), up, out, 1)?;
    let a = ctx.conv(&format!("{name}.conv2"), a, out, 3, 1, 1, false)?;
    let a = ctx.bn(&format!("{name}.conv2.bn"), a)?;
    let b = ctx.conv(&format!("{name}.skip"), up, out, 3, 1, 1, false)?;
    let b = ctx.bn(&format!("{name}.skip.bn"), b)?;
    let sum = ctx.g.add(a, b)?;
    Ok(ctx.g.relu(sum))
}

fn fcrn_like(ctx: &mut Ctx<'_>, x: Var, c: usize, hu: bool) -> Result<Var> {
    let stem = ctx.conv_bn_relu("stem", x, c, 2)?;
    let r1 = res_block(ctx, "res1", stem, c, 1, hu)?;
    let r2 = res_block(ctx, "res2", r1, 2 * c, 2, hu)?;
    let r3 = res_block(ctx, "res3", r2, 4 * c, 2, hu)?;
    let mid = ctx.conv("mid", r3, 4 * c, 1, 1, 0, false)?;
    let mid = ctx.bn("mid.bn", mid)?;
    let u2 = up_projection(ctx, "up2", mid, 2 * c)?;
    let u1 = up_projection(ctx, "up1", u2, c)?;
    if !hu {
        return Ok(u1);
    }
    // multi-scale fusion of encoder features at half resolution
    let half = (c / 2).max(1);
    let f1 = ctx.conv_bn_relu("mff.f1", r1, half, 1)?;
    let f2 = ctx.g.upsample_nearest(r2, 2)?;
    let f2 = ctx.conv_bn_relu("mff.f2", f2, half, 1)?;
    let f3 = ctx.g.upsample_nearest(r3, 4)?;
    let f3 = ctx.conv_bn_relu("mff.f3", f3, half, 1)?;
    let fused = ctx.g.concat_channels(&[f1, f2, f3])?;
    let fused = ctx.conv_bn_relu("mff.fuse", fused, c, 1)?;
    let joined = ctx.g.concat_channels(&[u1, fused])?;
    ctx.conv_bn_relu("refine", joined, c, 1)
}
