//! Self-checks and feature inspection.

use bafnet_tensor::gradcheck::{gradcheck, probe_tensor, GradcheckOptions, GradcheckReport};
use bafnet_tensor::suite::{op_suite, OP_TOLERANCE};
use bafnet_tensor::{Graph, NormMode, Real, Tensor};

use crate::config::ModelConfig;
use crate::data::spatial;
use crate::error::{shape_err, Result};
use crate::model::Bafnet;
use crate::params::{Ctx, ParamStore};

/// Relative tolerance of the whole-model check.
pub const MODEL_TOLERANCE: f64 = 1e-2;

/// Parameters perturbed by the whole-model check: one from every module
/// kind on the path from image to logits.
pub const MODEL_CHECK_PARAMS: [&str; 10] = [
    "dep.stage1.stem1.conv.weight",
    "dep.stage2.block0.attn.lka.dwd.weight",
    "dep.stage4.block1.mlp.fc2.weight",
    "rl.entry.conv.weight",
    "rl.stageA.block0.local.dw5.weight",
    "rl.stageB.block0.remote.attn.qkv.weight",
    "rl.stageC.block0.remote.mix.weight",
    "xch2.down.down1.conv.weight",
    "fam.gate_conv.weight",
    "head.cls.weight",
];

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// Pulls running statistics toward `x`'s batch statistics with repeated
/// train-mode passes.
///
/// With fresh statistics (mean 0, variance 1) the multiplicative local
/// branches grow quadratically per block in eval mode, so an untrained
/// network produces huge logits; calibrated statistics keep the check at
/// ordinary magnitudes.
pub fn calibrate_stats<T: Real>(model: &Bafnet, store: &mut ParamStore<T>, x: &Tensor<T>, passes: usize) -> Result<()> {
    for _ in 0..passes {
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, store, NormMode::Train);
        model.forward(&ctx, &ctx.input(x.clone()))?;
        let s = ctx.stats_snapshot();
        drop(ctx);
        store.set_stats(s);
    }
    Ok(())
}

/// Eval-mode finite-difference check of the default model at `(1, 3, 64, 64)`
/// with respect to the image and [`MODEL_CHECK_PARAMS`].
pub fn model_gradcheck(seed: u64) -> Result<CheckResult> {
    let (m, mut s) = Bafnet::build::<f64>(&ModelConfig::default(), seed)?;
    let x = probe_tensor(&[1, 3, 64, 64], seed.wrapping_add(1));
    calibrate_stats(&m, &mut s, &x, 80)?;
    let ids = MODEL_CHECK_PARAMS
        .iter()
        .map(|n| s.id(n).ok_or_else(|| shape_err(format!("no parameter {n}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| s.get(id).clone()));
    let report = gradcheck(
        &inputs,
        |g, v| {
            let mut ctx = Ctx::new(g, &s, NormMode::Eval);
            for (k, &id) in ids.iter().enumerate() {
                ctx.bind(id, v[k + 1].clone()).map_err(to_tensor_err)?;
            }
            let y = m.forward(&ctx, &v[0]).map_err(to_tensor_err)?;
            let w = g.constant(probe_tensor(y.shape(), seed.wrapping_add(2)));
            y.mul(&w)?.sum_all()
        },
        // Logits are large sums; a smaller step keeps truncation error down.
        GradcheckOptions { step: 1e-6, max_per_input: Some(3), ..GradcheckOptions::default() },
    )?;
    Ok(CheckResult { name: "end-to-end model (1, 3, 64, 64)".into(), report, tolerance: MODEL_TOLERANCE })
}

fn to_tensor_err(e: crate::error::BafnetError) -> bafnet_tensor::TensorError {
    match e {
        crate::error::BafnetError::Tensor(t) => t,
        e => bafnet_tensor::TensorError::InvalidArgument { op: "model", detail: e.to_string() },
    }
}

/// Every op-level check followed by the whole-model check.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out: Vec<CheckResult> = op_suite()?
        .into_iter()
        .map(|e| CheckResult { name: e.name, report: e.report, tolerance: OP_TOLERANCE })
        .collect();
    out.push(model_gradcheck(seed)?);
    Ok(out)
}

/// Channel-mean magnitude of a `(1, C, H, W)` or `(C, H, W)` map, rescaled
/// to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize_map<T: Real>(t: &Tensor<T>) -> Tensor<f32> {
    let (c, h, w) = spatial(t);
    let plane = h * w;
    let d = t.data();
    let mean: Vec<f64> =
        (0..plane).map(|p| (0..c).map(|k| d[k * plane + p].to_f64c().abs()).sum::<f64>() / c as f64).collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Tensor::from_fn(&[h, w], |i| if span > 0.0 { ((mean[i] - lo) / span) as f32 } else { 0.0 })
}

/// Context maps of every remote-local block for one image, as
/// `(block.kind, map)` with kinds `local`, `window`, `remote`,
/// `remote_local`.
pub fn context_maps<T: Real>(
    model: &Bafnet,
    store: &ParamStore<T>,
    image: &Tensor<T>,
) -> Result<Vec<(String, Tensor<f32>)>> {
    if image.ndim() != 4 || image.dim(0) != 1 {
        return Err(shape_err(format!("expected one (1, C, H, W) image, got {:?}", image.shape())));
    }
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, store, NormMode::Eval).with_probes();
    model.forward(&ctx, &ctx.input(image.clone()))?;
    Ok(ctx.take_probes().into_iter().map(|(n, t)| (n, normalize_map(&t))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_maps_span_unit_interval() {
        let t = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| (i as f64 - 7.0) * 0.3);
        let n = normalize_map(&t);
        assert_eq!(n.shape(), &[3, 3]);
        let lo = n.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = n.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(normalize_map(&Tensor::<f32>::full(&[2, 2, 2], 3.0)).data().iter().all(|&v| v == 0.0));
    }
}
