//! Assembly of both paths, the exchanges, fusion and head.

use bafnet_tensor::{FlopCounter, Graph, NormMode, Real, Tensor, Var};

use crate::config::{Fusion, ModelConfig};
use crate::dependency::{check_divisible, DependencyPath};
use crate::error::Result;
use crate::fusion::{Exchange, Fam, LowProjection, SegHead};
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::remote_local::RemoteLocalPath;

#[derive(Clone, Debug)]
pub enum FusionStage {
    /// Concatenation gated by channel weights.
    Fam(Fam),
    /// `U4(conv1x1(low)) + high`, or just the first term without a remote-local path.
    Sum(LowProjection),
}

#[derive(Clone, Debug)]
pub struct Bafnet {
    pub cfg: ModelConfig,
    pub dep: DependencyPath,
    pub rl: Option<RemoteLocalPath>,
    pub exchanges: Vec<Exchange>,
    pub fusion: FusionStage,
    pub head: SegHead,
}

/// Intermediate features of one forward pass.
pub struct FeatureBundle<'g, T: Real> {
    /// Dependency stage outputs before any exchange.
    pub dep: [Var<'g, T>; 4],
    /// Remote-local stage outputs (A, B, C) before exchanges.
    pub rl: Option<[Var<'g, T>; 3]>,
    pub low: Var<'g, T>,
    pub high: Option<Var<'g, T>>,
    pub fused: Var<'g, T>,
    pub logits: Var<'g, T>,
}

impl Bafnet {
    pub fn new(cfg: &ModelConfig, b: &mut ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let dep = DependencyPath::new(b, cfg)?;
        let ch = DependencyPath::channels(cfg);
        let c = cfg.rl_channels;
        let (rl, exchanges) = if cfg.has_rl_path() {
            let rl = RemoteLocalPath::new(b, cfg, ch[1])?;
            let z = cfg.exchange_zero_init;
            let x1 = Exchange::new(b, "xch1", ch[2], c, 2, z)?;
            let x2 = Exchange::new(b, "xch2", ch[3], c, 4, z)?;
            (Some(rl), vec![x1, x2])
        } else {
            (None, Vec::new())
        };
        let (fusion, head_in) = match (cfg.fusion, cfg.has_rl_path()) {
            (Fusion::Fam, true) => (FusionStage::Fam(Fam::new(b, ch[3], c)?), 2 * c),
            _ => (FusionStage::Sum(LowProjection::new(b, "fuse.low_proj", ch[3], c)?), c),
        };
        let head = SegHead::new(b, head_in, cfg.num_classes)?;
        Ok(Bafnet { cfg: cfg.clone(), dep, rl, exchanges, fusion, head })
    }

    /// Builds the model and its initial parameters from `seed`.
    pub fn build<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut b = ParamBuilder::new(seed);
        let m = Bafnet::new(cfg, &mut b)?;
        Ok((m, b.finish()))
    }

    pub fn forward_features<'g, T: Real>(&self, ctx: &Ctx<'g, T>, image: &Var<'g, T>) -> Result<FeatureBundle<'g, T>> {
        check_divisible(image.shape(), self.cfg.size_multiple())?;
        let s1 = self.dep.stage(0, ctx, image)?;
        let s2 = self.dep.stage(1, ctx, &s1)?;
        let s3 = self.dep.stage(2, ctx, &s2)?;
        let (s4, rl_out, low, high) = match &self.rl {
            Some(rl) => {
                let e = rl.enter(ctx, &s2)?;
                let a = rl.stage(0, ctx, &e)?;
                let (s3f, af) = self.exchanges[0].forward(ctx, &s3, &a)?;
                let s4 = self.dep.stage(3, ctx, &s3f)?;
                let b = rl.stage(1, ctx, &af)?;
                let (s4f, bf) = self.exchanges[1].forward(ctx, &s4, &b)?;
                let c = rl.stage(2, ctx, &bf)?;
                (s4, Some([a, b, c.clone()]), s4f, Some(c))
            }
            None => {
                let s4 = self.dep.stage(3, ctx, &s3)?;
                (s4.clone(), None, s4, None)
            }
        };
        let fused = match (&self.fusion, &high) {
            (FusionStage::Fam(f), Some(h)) => f.forward(ctx, &low, h)?,
            (FusionStage::Sum(p), h) => {
                let _s = ctx.graph.scope("fuse");
                let l = p.forward(ctx, &low)?;
                match h {
                    Some(h) => l.add(h)?,
                    None => l,
                }
            }
            (FusionStage::Fam(_), None) => unreachable!("FAM is only built with a remote-local path"),
        };
        let logits = self.head.forward(ctx, &fused)?;
        Ok(FeatureBundle { dep: [s1, s2, s3, s4], rl: rl_out, low, high, fused, logits })
    }

    /// Logits `(B, num_classes, H, W)`.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, image: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.forward_features(ctx, image)?.logits)
    }

    /// Eval-mode logits without recording a tape.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, store, NormMode::Eval);
        let x = ctx.input(image.clone());
        Ok(self.forward(&ctx, &x)?.to_tensor())
    }

    /// Per-scope multiply-accumulate counts for one eval forward at `(1, C, h, w)`.
    pub fn count_flops(&self, store: &ParamStore<f32>, h: usize, w: usize) -> Result<FlopCounter> {
        let g = Graph::no_grad();
        g.set_check_finite(false);
        g.enable_flop_counter();
        let ctx = Ctx::new(&g, store, NormMode::Eval);
        let x = ctx.input(Tensor::zeros(&[1, self.cfg.in_channels, h, w]));
        self.forward(&ctx, &x)?;
        Ok(g.take_flop_counter().unwrap_or_default())
    }
}
