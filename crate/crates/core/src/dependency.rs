//! Dependency path: a four-stage large-kernel-attention encoder (VAN-B0
//! layout) emitting features at 1/4, 1/8, 1/16 and 1/32 resolution, plus a
//! small residual baseline encoder for ablations.

use bafnet_tensor::{Real, Var};

use crate::config::{Backbone, ModelConfig};
use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm, Conv, ConvBn, ConvSpec, LayerNorm};
use crate::params::{Ctx, Init, ParamBuilder, ParamId};

/// Decomposed large-kernel attention: `1x1(dw-dilated-7x7(dw-5x5(F))) * F`.
#[derive(Clone, Debug)]
pub struct Lka {
    pub dw: Conv,
    pub dwd: Conv,
    pub pw: Conv,
}

impl Lka {
    pub const DW_KERNEL: usize = 5;
    pub const DWD_KERNEL: usize = 7;
    pub const DWD_DILATION: usize = 3;

    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Result<Self> {
        Ok(Lka {
            dw: ConvSpec::depthwise(c, Self::DW_KERNEL).build(b, &format!("{name}.dw"))?,
            dwd: ConvSpec::depthwise(c, Self::DWD_KERNEL)
                .dilation(Self::DWD_DILATION)
                .build(b, &format!("{name}.dwd"))?,
            pw: ConvSpec::new(c, c, 1).build(b, &format!("{name}.pw"))?,
        })
    }

    /// Side of the composed receptive field of the two depthwise convs.
    pub fn receptive_field() -> usize {
        (Self::DW_KERNEL - 1) + Self::DWD_DILATION * (Self::DWD_KERNEL - 1) + 1
    }

    pub fn attention<'g, T: Real>(&self, ctx: &Ctx<'g, T>, f: &Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.dw.forward(ctx, f)?;
        let a = self.dwd.forward(ctx, &a)?;
        self.pw.forward(ctx, &a)
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, f: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.attention(ctx, f)?.mul(f)?)
    }
}

#[derive(Clone, Debug)]
pub struct VanBlock {
    pub norm1: BatchNorm,
    pub proj1: Conv,
    pub lka: Lka,
    pub proj2: Conv,
    pub norm2: BatchNorm,
    pub fc1: Conv,
    pub dw: Conv,
    pub fc2: Conv,
    pub ls1: Option<ParamId>,
    pub ls2: Option<ParamId>,
}

impl VanBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, mlp_ratio: usize, layer_scale: f64) -> Result<Self> {
        let hidden = c * mlp_ratio;
        let ls = |b: &mut ParamBuilder, n: &str| -> Result<Option<ParamId>> {
            if layer_scale > 0.0 {
                Ok(Some(b.param(&format!("{name}.{n}"), &[1, c, 1, 1], Init::Const(layer_scale), false)?))
            } else {
                Ok(None)
            }
        };
        Ok(VanBlock {
            norm1: BatchNorm::new(b, &format!("{name}.norm1"), c)?,
            proj1: ConvSpec::new(c, c, 1).build(b, &format!("{name}.attn.proj1"))?,
            lka: Lka::new(b, &format!("{name}.attn.lka"), c)?,
            proj2: ConvSpec::new(c, c, 1).build(b, &format!("{name}.attn.proj2"))?,
            ls1: ls(b, "ls1")?,
            norm2: BatchNorm::new(b, &format!("{name}.norm2"), c)?,
            fc1: ConvSpec::new(c, hidden, 1).build(b, &format!("{name}.mlp.fc1"))?,
            dw: ConvSpec::depthwise(hidden, 3).build(b, &format!("{name}.mlp.dw"))?,
            fc2: ConvSpec::new(hidden, c, 1).build(b, &format!("{name}.mlp.fc2"))?,
            ls2: ls(b, "ls2")?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let scaled = |y: Var<'g, T>, ls: Option<ParamId>| -> Result<Var<'g, T>> {
            Ok(match ls {
                Some(p) => y.mul(ctx.p(p))?,
                None => y,
            })
        };
        let a = self.norm1.forward(ctx, x)?;
        let a = self.proj1.forward(ctx, &a)?.gelu()?;
        let a = self.lka.forward(ctx, &a)?;
        let a = self.proj2.forward(ctx, &a)?;
        let x = x.add(&scaled(a, self.ls1)?)?;
        let m = self.norm2.forward(ctx, &x)?;
        let m = self.fc1.forward(ctx, &m)?;
        let m = self.dw.forward(ctx, &m)?.gelu()?;
        let m = self.fc2.forward(ctx, &m)?;
        Ok(x.add(&scaled(m, self.ls2)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct VanStage {
    /// Stage 1: two stride-2 convs; later stages: one stride-2 patch embedding.
    pub embed: Vec<ConvBn>,
    pub blocks: Vec<VanBlock>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct VanB0 {
    pub stages: Vec<VanStage>,
}

impl VanB0 {
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let ch = cfg.dep_channels;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let name = format!("dep.stage{}", i + 1);
            let embed = if i == 0 {
                let mid = (ch[0] / 2).max(1);
                vec![
                    ConvBn::new(b, &format!("{name}.stem1"), ConvSpec::new(cfg.in_channels, mid, 3).stride(2))?,
                    ConvBn::new(b, &format!("{name}.stem2"), ConvSpec::new(mid, ch[0], 3).stride(2))?,
                ]
            } else {
                vec![ConvBn::new(b, &format!("{name}.embed"), ConvSpec::new(ch[i - 1], ch[i], 3).stride(2))?]
            };
            let blocks = (0..cfg.dep_depths[i])
                .map(|j| {
                    VanBlock::new(b, &format!("{name}.block{j}"), ch[i], cfg.dep_mlp_ratios[i], cfg.layer_scale_init)
                })
                .collect::<Result<_>>()?;
            let norm = LayerNorm::new(b, &format!("{name}.norm"), ch[i])?;
            stages.push(VanStage { embed, blocks, norm });
        }
        Ok(VanB0 { stages })
    }

    fn stage<'g, T: Real>(&self, i: usize, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let s = &self.stages[i];
        let mut x = x.clone();
        for (k, e) in s.embed.iter().enumerate() {
            x = e.forward(ctx, &x)?;
            if i == 0 && k == 0 {
                x = x.gelu()?;
            }
        }
        for blk in &s.blocks {
            x = blk.forward(ctx, &x)?;
        }
        s.norm.forward(ctx, &x)
    }
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub down: Option<ConvBn>,
}

impl BasicBlock {
    fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let down = if stride != 1 || cin != cout {
            Some(ConvBn::new(b, &format!("{name}.down"), ConvSpec::new(cin, cout, 1).stride(stride))?)
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: ConvBn::new(b, &format!("{name}.conv1"), ConvSpec::new(cin, cout, 3).stride(stride))?,
            conv2: ConvBn::new(b, &format!("{name}.conv2"), ConvSpec::new(cout, cout, 3))?,
            down,
        })
    }

    fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.conv1.forward(ctx, x)?.relu()?;
        let y = self.conv2.forward(ctx, &y)?;
        let skip = match &self.down {
            Some(d) => d.forward(ctx, x)?,
            None => x.clone(),
        };
        Ok(y.add(&skip)?.relu()?)
    }
}

/// ResNet-18 layout (2 basic blocks per stage, widths 64..512) behind a
/// two-conv stride-4 stem, used only as the ablation baseline.
#[derive(Clone, Debug)]
pub struct ResNet18Stub {
    pub stem: Vec<ConvBn>,
    pub stages: Vec<Vec<BasicBlock>>,
}

impl ResNet18Stub {
    pub const CHANNELS: [usize; 4] = [64, 128, 256, 512];

    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let ch = Self::CHANNELS;
        let stem = vec![
            ConvBn::new(b, "dep.stem1", ConvSpec::new(cfg.in_channels, 32, 3).stride(2))?,
            ConvBn::new(b, "dep.stem2", ConvSpec::new(32, ch[0], 3).stride(2))?,
        ];
        let mut stages = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(vec![
                BasicBlock::new(b, &format!("dep.stage{}.block0", i + 1), cin, ch[i], stride)?,
                BasicBlock::new(b, &format!("dep.stage{}.block1", i + 1), ch[i], ch[i], 1)?,
            ]);
        }
        Ok(ResNet18Stub { stem, stages })
    }

    fn stage<'g, T: Real>(&self, i: usize, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let mut x = x.clone();
        if i == 0 {
            for s in &self.stem {
                x = s.forward(ctx, &x)?.relu()?;
            }
        }
        for blk in &self.stages[i] {
            x = blk.forward(ctx, &x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum DependencyPath {
    Van(VanB0),
    Resnet(ResNet18Stub),
}

impl DependencyPath {
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg.backbone {
            Backbone::VanB0 => DependencyPath::Van(VanB0::new(b, cfg)?),
            Backbone::Resnet18Stub => DependencyPath::Resnet(ResNet18Stub::new(b, cfg)?),
        })
    }

    pub fn channels(cfg: &ModelConfig) -> [usize; 4] {
        match cfg.backbone {
            Backbone::VanB0 => cfg.dep_channels,
            Backbone::Resnet18Stub => ResNet18Stub::CHANNELS,
        }
    }

    /// Runs stage `i` (0-based) on the previous stage output (the image for stage 0).
    pub fn stage<'g, T: Real>(&self, i: usize, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let _s = ctx.graph.scope(&format!("dep.stage{}", i + 1));
        match self {
            DependencyPath::Van(v) => v.stage(i, ctx, x),
            DependencyPath::Resnet(r) => r.stage(i, ctx, x),
        }
    }

    /// All four stage outputs for a `(B, C, H, W)` image with H, W divisible by 32.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, image: &Var<'g, T>) -> Result<[Var<'g, T>; 4]> {
        check_divisible(image.shape(), 32)?;
        let s1 = self.stage(0, ctx, image)?;
        let s2 = self.stage(1, ctx, &s1)?;
        let s3 = self.stage(2, ctx, &s2)?;
        let s4 = self.stage(3, ctx, &s3)?;
        Ok([s1, s2, s3, s4])
    }
}

pub(crate) fn check_divisible(shape: &[usize], m: usize) -> Result<()> {
    if shape.len() != 4 {
        return Err(shape_err(format!("expected (B, C, H, W), got {shape:?}")));
    }
    if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) || shape[2] == 0 || shape[3] == 0 {
        return Err(shape_err(format!("spatial size {}x{} is not a positive multiple of {m}", shape[2], shape[3])));
    }
    Ok(())
}
