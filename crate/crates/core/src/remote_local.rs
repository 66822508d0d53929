//! Remote-local path: constant 1/8-resolution stack of blocks that sum a
//! multi-scale local branch and a shift-free windowed-attention branch.

use bafnet_tensor::{Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm, Conv, ConvBn, ConvSpec, LayerNorm};
use crate::params::{Ctx, Init, ParamBuilder, ParamId};

/// Multi-scale local attention: expand to 2c, sum depthwise 3/5/7 branches,
/// reduce to c, gate a linear value projection, project out.
#[derive(Clone, Debug)]
pub struct Mslam {
    pub expand: Conv,
    pub branches: [Conv; 3],
    pub reduce: Conv,
    pub value: Conv,
    pub out: Conv,
}

impl Mslam {
    pub const EXPANSION: usize = 2;
    pub const KERNELS: [usize; 3] = [3, 5, 7];

    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Result<Self> {
        let e = c * Self::EXPANSION;
        let [k0, k1, k2] = Self::KERNELS;
        Ok(Mslam {
            expand: ConvSpec::new(c, e, 1).build(b, &format!("{name}.expand"))?,
            branches: [
                ConvSpec::depthwise(e, k0).build(b, &format!("{name}.dw{k0}"))?,
                ConvSpec::depthwise(e, k1).build(b, &format!("{name}.dw{k1}"))?,
                ConvSpec::depthwise(e, k2).build(b, &format!("{name}.dw{k2}"))?,
            ],
            reduce: ConvSpec::new(e, c, 1).build(b, &format!("{name}.reduce"))?,
            value: ConvSpec::new(c, c, 1).build(b, &format!("{name}.value"))?,
            out: ConvSpec::new(c, c, 1).build(b, &format!("{name}.out"))?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let xh = self.expand.forward(ctx, x)?;
        let mut acc = self.branches[0].forward(ctx, &xh)?;
        for br in &self.branches[1..] {
            acc = acc.add(&br.forward(ctx, &xh)?)?;
        }
        let attention = self.reduce.forward(ctx, &acc)?;
        let value = self.value.forward(ctx, x)?;
        self.out.forward(ctx, &attention.mul(&value)?)
    }
}

fn window_dims(shape: &[usize], w: usize) -> Result<(usize, usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err(format!("expected (B, C, H, W), got {shape:?}")));
    }
    let (b, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(shape_err(format!("window {w} does not divide {h}x{wd}")));
    }
    Ok((b, c, h / w, wd / w, w))
}

/// `(B, C, H, W)` -> `(B * H/w * W/w, w*w, C)`, windows in row-major order,
/// tokens row-major inside each window.
pub fn window_partition<'g, T: Real>(x: &Var<'g, T>, w: usize) -> Result<Var<'g, T>> {
    let (b, c, nh, nw, w) = window_dims(x.shape(), w)?;
    Ok(x.reshape(&[b, c, nh, w, nw, w])?.permute(&[0, 2, 4, 3, 5, 1])?.reshape(&[b * nh * nw, w * w, c])?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'g, T: Real>(windows: &Var<'g, T>, h: usize, wd: usize) -> Result<Var<'g, T>> {
    let s = windows.shape();
    if s.len() != 3 {
        return Err(shape_err(format!("expected (N, w*w, C) windows, got {s:?}")));
    }
    let w = (s[1] as f64).sqrt().round() as usize;
    if w * w != s[1]
        || w == 0
        || !h.is_multiple_of(w)
        || !wd.is_multiple_of(w)
        || !s[0].is_multiple_of((h / w) * (wd / w))
    {
        return Err(shape_err(format!("windows {s:?} do not tile {h}x{wd}")));
    }
    let (nh, nw, c) = (h / w, wd / w, s[2]);
    let b = s[0] / (nh * nw);
    Ok(windows.reshape(&[b, nh, nw, w, w, c])?.permute(&[0, 5, 1, 3, 2, 4])?.reshape(&[b, c, h, wd])?)
}

/// Relative-position lookup: entry `i * w*w + j` is the bias-table row for
/// query token `i` attending to key token `j`.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let n = w * w;
    let side = 2 * w - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / w, i % w);
        for j in 0..n {
            let (yj, xj) = (j / w, j % w);
            let dy = yi + w - 1 - yj;
            let dx = xi + w - 1 - xj;
            idx.push(dy * side + dx);
        }
    }
    idx
}

/// Multi-head self-attention inside non-overlapping windows with a learned
/// relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub bias_table: ParamId,
    pub window: usize,
    pub heads: usize,
    pub channels: usize,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, window: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(shape_err(format!("{heads} heads do not divide {c} channels")));
        }
        let side = 2 * window - 1;
        Ok(WindowAttention {
            qkv_weight: b.param(&format!("{name}.qkv.weight"), &[3 * c, c], Init::HeNormal, true)?,
            qkv_bias: b.param(&format!("{name}.qkv.bias"), &[3 * c], Init::Zeros, false)?,
            proj_weight: b.param(&format!("{name}.proj.weight"), &[c, c], Init::HeNormal, true)?,
            proj_bias: b.param(&format!("{name}.proj.bias"), &[c], Init::Zeros, false)?,
            bias_table: b.param(&format!("{name}.rel_bias"), &[side * side, heads], Init::Zeros, false)?,
            window,
            heads,
            channels: c,
            rel_index: relative_position_index(window),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Attention weights `(N, heads, w*w, w*w)` and values `(N*heads, w*w, hd)`.
    fn weights_and_values<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        tokens: &Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = tokens.shape();
        let (n, t, c) = (s[0], s[1], s[2]);
        if c != self.channels || t != self.window * self.window {
            return Err(shape_err(format!("tokens {s:?} vs {} channels, window {}", self.channels, self.window)));
        }
        let (nh, hd) = (self.heads, self.head_dim());
        let qkv = tokens
            .matmul_t(ctx.p(self.qkv_weight), false, true)?
            .add(ctx.p(self.qkv_bias))?
            .reshape(&[n, t, 3, nh, hd])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var<'g, T>> { Ok(qkv.narrow(0, i, 1)?.reshape(&[n * nh, t, hd])?) };
        let scale = T::from_f64c(1.0 / (hd as f64).sqrt());
        let q = part(0)?.scale(scale)?;
        let (k, v) = (part(1)?, part(2)?);
        let bias = ctx
            .p(self.bias_table)
            .index_select(&self.rel_index)?
            .reshape(&[t, t, nh])?
            .permute(&[2, 0, 1])?
            .reshape(&[1, nh, t, t])?;
        let attn = q.matmul_t(&k, false, true)?.reshape(&[n, nh, t, t])?.add(&bias)?.softmax(3)?;
        Ok((attn, v))
    }

    pub fn attention_weights<'g, T: Real>(&self, ctx: &Ctx<'g, T>, tokens: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.weights_and_values(ctx, tokens)?.0)
    }

    /// `(N, w*w, C)` -> `(N, w*w, C)`.
    pub fn forward_tokens<'g, T: Real>(&self, ctx: &Ctx<'g, T>, tokens: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (n, t) = (tokens.shape()[0], tokens.shape()[1]);
        let (nh, hd) = (self.heads, self.head_dim());
        let (attn, v) = self.weights_and_values(ctx, tokens)?;
        let out = attn
            .reshape(&[n * nh, t, t])?
            .matmul(&v)?
            .reshape(&[n, nh, t, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, t, self.channels])?;
        Ok(out.matmul_t(ctx.p(self.proj_weight), false, true)?.add(ctx.p(self.proj_bias))?)
    }

    /// Windowed attention on a `(B, C, H, W)` map.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let tokens = window_partition(x, self.window)?;
        window_reverse(&self.forward_tokens(ctx, &tokens)?, h, w)
    }
}

/// Efficient remote attention: windowed attention without shifts; a 7x7
/// depthwise conv over the block output carries information across windows.
#[derive(Clone, Debug)]
pub struct Eram {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Conv,
    pub fc2: Conv,
    pub mix: Conv,
}

impl Eram {
    pub const MIX_KERNEL: usize = 7;

    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.rl_channels;
        Ok(Eram {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), c)?,
            attn: WindowAttention::new(b, &format!("{name}.attn"), c, cfg.window_size, cfg.num_heads)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), c)?,
            fc1: ConvSpec::new(c, c * cfg.rl_mlp_ratio, 1).build(b, &format!("{name}.mlp.fc1"))?,
            fc2: ConvSpec::new(c * cfg.rl_mlp_ratio, c, 1).build(b, &format!("{name}.mlp.fc2"))?,
            mix: ConvSpec::depthwise(c, Self::MIX_KERNEL)
                .no_bias()
                .init(Init::Delta)
                .build(b, &format!("{name}.mix"))?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, h: &Var<'g, T>, probe: Option<&str>) -> Result<Var<'g, T>> {
        let a = self.attn.forward(ctx, &self.norm1.forward(ctx, h)?)?;
        if let Some(p) = probe {
            ctx.probe(&format!("{p}.window"), &a);
        }
        let hh = a.add(h)?;
        let m = self.fc1.forward(ctx, &self.norm2.forward(ctx, &hh)?)?.gelu()?;
        let m = self.fc2.forward(ctx, &m)?;
        self.mix.forward(ctx, &m.add(&hh)?)
    }
}

/// Remote-local attention block: `x + local(n(x)) + remote(n(x))` with a
/// shared pre-norm `n`; either branch may be disabled for ablations.
#[derive(Clone, Debug)]
pub struct Rlab {
    pub norm: BatchNorm,
    pub local: Option<Mslam>,
    pub remote: Option<Eram>,
}

impl Rlab {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.rl_channels;
        Ok(Rlab {
            norm: BatchNorm::new(b, &format!("{name}.norm"), c)?,
            local: if cfg.use_rl_local { Some(Mslam::new(b, &format!("{name}.local"), c)?) } else { None },
            remote: if cfg.use_rl_remote { Some(Eram::new(b, &format!("{name}.remote"), cfg)?) } else { None },
        })
    }

    /// `probe` names this block in feature dumps.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: &Var<'g, T>, probe: &str) -> Result<Var<'g, T>> {
        let n = self.norm.forward(ctx, x)?;
        let local = match &self.local {
            Some(m) => Some(m.forward(ctx, &n)?),
            None => None,
        };
        let remote = match &self.remote {
            Some(e) => Some(e.forward(ctx, &n, ctx.probing().then_some(probe))?),
            None => None,
        };
        let context = match (local, remote) {
            (Some(l), Some(r)) => {
                ctx.probe(&format!("{probe}.local"), &l);
                ctx.probe(&format!("{probe}.remote"), &r);
                l.add(&r)?
            }
            (Some(l), None) => {
                ctx.probe(&format!("{probe}.local"), &l);
                l
            }
            (None, Some(r)) => {
                ctx.probe(&format!("{probe}.remote"), &r);
                r
            }
            (None, None) => return Ok(x.clone()),
        };
        ctx.probe(&format!("{probe}.remote_local"), &context);
        Ok(x.add(&context)?)
    }
}

pub const STAGE_NAMES: [&str; 3] = ["A", "B", "C"];

#[derive(Clone, Debug)]
pub struct RemoteLocalPath {
    pub entry: ConvBn,
    pub stages: Vec<Vec<Rlab>>,
    pub channels: usize,
}

impl RemoteLocalPath {
    /// `entry_channels`: width of the dependency-path 1/8 feature the path starts from.
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig, entry_channels: usize) -> Result<Self> {
        let entry = ConvBn::new(b, "rl.entry", ConvSpec::new(entry_channels, cfg.rl_channels, 1))?;
        let stages = STAGE_NAMES
            .iter()
            .zip(cfg.rl_depths)
            .map(|(s, d)| {
                (0..d).map(|j| Rlab::new(b, &format!("rl.stage{s}.block{j}"), cfg)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(RemoteLocalPath { entry, stages, channels: cfg.rl_channels })
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn enter<'g, T: Real>(&self, ctx: &Ctx<'g, T>, dep_s2: &Var<'g, T>) -> Result<Var<'g, T>> {
        let _s = ctx.graph.scope("rl.entry");
        self.entry.forward(ctx, dep_s2)
    }

    pub fn stage<'g, T: Real>(&self, i: usize, ctx: &Ctx<'g, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let name = format!("rl.stage{}", STAGE_NAMES[i]);
        let _s = ctx.graph.scope(&name);
        let mut x = x.clone();
        for (j, blk) in self.stages[i].iter().enumerate() {
            x = blk.forward(ctx, &x, &format!("{name}.block{j}"))?;
        }
        Ok(x)
    }

    /// Runs the three stages, adding `injected[i]` (if any) to the input of
    /// stage `i + 1`. Returns the three stage outputs.
    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        entry: &Var<'g, T>,
        injected: &[Option<Var<'g, T>>],
    ) -> Result<[Var<'g, T>; 3]> {
        let a = self.stage(0, ctx, entry)?;
        let add = |x: &Var<'g, T>, i: usize| -> Result<Var<'g, T>> {
            match injected.get(i).and_then(Option::as_ref) {
                Some(inj) if inj.shape() != x.shape() => {
                    Err(shape_err(format!("injected feature {:?} does not match {:?}", inj.shape(), x.shape())))
                }
                Some(inj) => Ok(x.add(inj)?),
                None => Ok(x.clone()),
            }
        };
        let b = self.stage(1, ctx, &add(&a, 0)?)?;
        let c = self.stage(2, ctx, &add(&b, 1)?)?;
        Ok([a, b, c])
    }
}

/// Channel mean of a `(1, C, H, W)` probe, min-max scaled to [0, 1].
pub fn context_map<T: Real>(t: &Tensor<T>) -> Result<Vec<f64>> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(shape_err(format!("context map needs (1, C, H, W), got {s:?}")));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut m = vec![0.0f64; hw];
    for ch in 0..c {
        for (acc, v) in m.iter_mut().zip(&t.data()[ch * hw..(ch + 1) * hw]) {
            *acc += v.to_f64c();
        }
    }
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(m.into_iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect())
}
