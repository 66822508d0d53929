//! Cross-path exchanges, the feature aggregation module and the
//! segmentation head.

use bafnet_tensor::{Real, Var};

use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm, Conv, ConvBn, ConvSpec};
use crate::params::{Ctx, ParamBuilder};

/// Aligns a feature map to another path: 1x1 conv + norm for channels, then
/// bilinear upsampling or a chain of stride-2 3x3 convs for resolution.
#[derive(Clone, Debug)]
pub enum ExchangeAdapter {
    Up { proj: ConvBn, factor: usize },
    Down { proj: ConvBn, chain: Vec<ConvBn> },
}

fn log2_exact(ratio: usize) -> Result<usize> {
    if ratio < 2 || !ratio.is_power_of_two() {
        return Err(shape_err(format!("resolution ratio {ratio} is not a power of two >= 2")));
    }
    Ok(ratio.trailing_zeros() as usize)
}

impl ExchangeAdapter {
    /// Into the remote-local path: `cin` channels at 1/`ratio` of the target resolution.
    pub fn up(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        ratio: usize,
        zero_init: bool,
    ) -> Result<Self> {
        log2_exact(ratio)?;
        let scale = if zero_init { 0.0 } else { 1.0 };
        Ok(ExchangeAdapter::Up {
            proj: ConvBn::with_bn_scale(b, &format!("{name}.proj"), ConvSpec::new(cin, cout, 1), scale)?,
            factor: ratio,
        })
    }

    /// Into the dependency path: `ratio` times finer than the target.
    pub fn down(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        ratio: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let steps = log2_exact(ratio)?;
        let proj = ConvBn::new(b, &format!("{name}.proj"), ConvSpec::new(cin, cout, 1))?;
        let chain = (0..steps)
            .map(|i| {
                let last = i + 1 == steps;
                let scale = if last && zero_init { 0.0 } else { 1.0 };
                ConvBn::with_bn_scale(b, &format!("{name}.down{i}"), ConvSpec::new(cout, cout, 3).stride(2), scale)
            })
            .collect::<Result<_>>()?;
        Ok(ExchangeAdapter::Down { proj, chain })
    }

    pub fn stride2_convs(&self) -> usize {
        match self {
            ExchangeAdapter::Up { .. } => 0,
            ExchangeAdapter::Down { chain, .. } => chain.len(),
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            ExchangeAdapter::Up { proj, factor } => {
                let y = proj.forward(ctx, x)?;
                let (h, w) = (y.shape()[2] * factor, y.shape()[3] * factor);
                Ok(y.bilinear_resize(h, w)?)
            }
            ExchangeAdapter::Down { proj, chain } => {
                let mut y = proj.forward(ctx, x)?;
                for (i, c) in chain.iter().enumerate() {
                    if i > 0 {
                        y = y.relu()?;
                    }
                    y = c.forward(ctx, &y)?;
                }
                Ok(y)
            }
        }
    }
}

/// Bidirectional additive exchange between a dependency-path stage output
/// and a remote-local stage output.
#[derive(Clone, Debug)]
pub struct Exchange {
    pub name: String,
    pub into_rl: ExchangeAdapter,
    pub into_dep: ExchangeAdapter,
}

impl Exchange {
    /// `ratio`: how many times coarser the dependency feature is.
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        dep_c: usize,
        rl_c: usize,
        ratio: usize,
        zero_init: bool,
    ) -> Result<Self> {
        Ok(Exchange {
            name: name.to_string(),
            into_rl: ExchangeAdapter::up(b, &format!("{name}.up"), dep_c, rl_c, ratio, zero_init)?,
            into_dep: ExchangeAdapter::down(b, &format!("{name}.down"), rl_c, dep_c, ratio, zero_init)?,
        })
    }

    /// Returns `(dep + down(proj(rl)), rl + up(proj(dep)))`.
    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        dep: &Var<'g, T>,
        rl: &Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let _s = ctx.graph.scope(&self.name);
        let to_rl = self.into_rl.forward(ctx, dep)?;
        let to_dep = self.into_dep.forward(ctx, rl)?;
        if to_rl.shape() != rl.shape() || to_dep.shape() != dep.shape() {
            return Err(shape_err(format!(
                "{}: aligned shapes {:?}/{:?} vs targets {:?}/{:?}",
                self.name,
                to_dep.shape(),
                to_rl.shape(),
                dep.shape(),
                rl.shape()
            )));
        }
        Ok((dep.add(&to_dep)?, rl.add(&to_rl)?))
    }
}

/// Channel-aligns the coarse dependency output and upsamples it by 4.
#[derive(Clone, Debug)]
pub struct LowProjection {
    pub conv: Conv,
    pub factor: usize,
}

impl LowProjection {
    pub fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(LowProjection { conv: ConvSpec::new(cin, cout, 1).build(b, name)?, factor: 4 })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, low: &Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.conv.forward(ctx, low)?;
        let (h, w) = (y.shape()[2] * self.factor, y.shape()[3] * self.factor);
        Ok(y.bilinear_resize(h, w)?)
    }
}

/// Feature aggregation: `sigmoid(BN(conv5x5(GAP(W * F)))) * F` with
/// `F = concat(U4(conv1x1(low)), high)`. The 5x5 conv is depthwise and acts
/// on the 1x1 pooled map with padding 2.
#[derive(Clone, Debug)]
pub struct Fam {
    pub low_proj: LowProjection,
    pub linear: Conv,
    pub gate_conv: Conv,
    pub gate_bn: BatchNorm,
    pub channels: usize,
}

impl Fam {
    pub const GATE_KERNEL: usize = 5;

    pub fn new(b: &mut ParamBuilder, low_c: usize, high_c: usize) -> Result<Self> {
        let c = 2 * high_c;
        Ok(Fam {
            low_proj: LowProjection::new(b, "fam.low_proj", low_c, high_c)?,
            linear: ConvSpec::new(c, c, 1).build(b, "fam.linear")?,
            gate_conv: ConvSpec::depthwise(c, Self::GATE_KERNEL).build(b, "fam.gate_conv")?,
            gate_bn: BatchNorm::new(b, "fam.gate_bn", c)?,
            channels: c,
        })
    }

    pub fn concat<'g, T: Real>(&self, ctx: &Ctx<'g, T>, low: &Var<'g, T>, high: &Var<'g, T>) -> Result<Var<'g, T>> {
        let low = self.low_proj.forward(ctx, low)?;
        if low.shape() != high.shape() {
            return Err(shape_err(format!("upsampled low {:?} does not match high {:?}", low.shape(), high.shape())));
        }
        Ok(Var::concat(&[&low, high], 1)?)
    }

    /// Channel weights in (0, 1), shape `(B, 2C, 1, 1)`.
    pub fn gate<'g, T: Real>(&self, ctx: &Ctx<'g, T>, fuse: &Var<'g, T>) -> Result<Var<'g, T>> {
        let g = self.linear.forward(ctx, fuse)?.global_avg_pool()?;
        let g = self.gate_conv.forward(ctx, &g)?;
        Ok(self.gate_bn.forward(ctx, &g)?.sigmoid()?)
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, low: &Var<'g, T>, high: &Var<'g, T>) -> Result<Var<'g, T>> {
        let _s = ctx.graph.scope("fam");
        let fuse = self.concat(ctx, low, high)?;
        let gate = self.gate(ctx, &fuse)?;
        Ok(fuse.mul(&gate)?)
    }
}

/// 3x3 conv halving the channels (+BN+ReLU), 1x1 classifier, bilinear x8.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub conv: ConvBn,
    pub cls: Conv,
    pub upsample: usize,
}

impl SegHead {
    pub fn new(b: &mut ParamBuilder, cin: usize, num_classes: usize) -> Result<Self> {
        let mid = cin / 2;
        Ok(SegHead {
            conv: ConvBn::new(b, "head.conv", ConvSpec::new(cin, mid, 3))?,
            cls: ConvSpec::new(mid, num_classes, 1).build(b, "head.cls")?,
            upsample: 8,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let _s = ctx.graph.scope("head");
        let y = self.conv.forward(ctx, x)?.relu()?;
        let y = self.cls.forward(ctx, &y)?;
        let (h, w) = (y.shape()[2] * self.upsample, y.shape()[3] * self.upsample);
        Ok(y.bilinear_resize(h, w)?)
    }
}
