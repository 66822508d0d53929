//! Parameterized layers. Each layer only stores parameter ids; values live in
//! the [`ParamStore`](crate::params::ParamStore) and are bound per forward pass.

use bafnet_tensor::{Conv2dParams, Real, Var};

use crate::error::Result;
use crate::params::{Ctx, Init, ParamBuilder, ParamId, StatsId};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
    pub init: Init,
}

impl ConvSpec {
    /// Stride 1, "same" padding, bias, He-normal weights.
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec { cin, cout, k, stride: 1, padding: k / 2, dilation: 1, groups: 1, bias: true, init: Init::HeNormal }
    }

    /// Depthwise `k x k` conv on `c` channels.
    pub fn depthwise(c: usize, k: usize) -> Self {
        ConvSpec { groups: c, ..ConvSpec::new(c, c, k) }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    /// Sets dilation and the matching "same" padding.
    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self.padding = d * (self.k - 1) / 2;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn build(self, b: &mut ParamBuilder, name: &str) -> Result<Conv> {
        let weight =
            b.param(&format!("{name}.weight"), &[self.cout, self.cin / self.groups, self.k, self.k], self.init, true)?;
        let bias =
            if self.bias { Some(b.param(&format!("{name}.bias"), &[self.cout], Init::Zeros, false)?) } else { None };
        Ok(Conv {
            weight,
            bias,
            params: Conv2dParams::new(self.stride, self.padding, self.dilation, self.groups),
            cout: self.cout,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: Conv2dParams,
    pub cout: usize,
}

impl Conv {
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.params)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Result<Self> {
        Self::with_scale(b, name, c, 1.0)
    }

    /// `scale_init = 0` makes the layer output its shift (zero) initially.
    pub fn with_scale(b: &mut ParamBuilder, name: &str, c: usize, scale_init: f64) -> Result<Self> {
        Ok(BatchNorm {
            scale: b.param(&format!("{name}.scale"), &[c], Init::Const(scale_init), false)?,
            shift: b.param(&format!("{name}.shift"), &[c], Init::Zeros, false)?,
            stats: b.running_stats(&format!("{name}.running"), c)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        ctx.batch_norm(x, self.scale, self.shift, self.stats)
    }
}

/// Normalization over the channel axis (axis 1) at every spatial position.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Result<Self> {
        Ok(LayerNorm {
            scale: b.param(&format!("{name}.scale"), &[c], Init::Const(1.0), false)?,
            shift: b.param(&format!("{name}.shift"), &[c], Init::Zeros, false)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.layer_norm(ctx.p(self.scale), ctx.p(self.shift), 1)?)
    }
}

/// Conv followed by batch norm (bias-free conv).
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn new(b: &mut ParamBuilder, name: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_bn_scale(b, name, spec, 1.0)
    }

    pub fn with_bn_scale(b: &mut ParamBuilder, name: &str, spec: ConvSpec, scale: f64) -> Result<Self> {
        Ok(ConvBn {
            conv: spec.no_bias().build(b, &format!("{name}.conv"))?,
            bn: BatchNorm::with_scale(b, &format!("{name}.bn"), spec.cout, scale)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.bn.forward(ctx, &self.conv.forward(ctx, x)?)
    }
}
