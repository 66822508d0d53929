//! Straight-line recomputations of the fused modules, shared by the module
//! tests and the acceptance run.

use bafnet::fusion::{Exchange, Fam};
use bafnet::params::Ctx;
use bafnet::remote_local::{Eram, Mslam, WindowAttention};
use bafnet::{ModelConfig, ParamStore};
use bafnet_tensor::{bilinear_resize_tensor, Graph, NormMode, Tensor};

use super::*;

/// 1x1 conv with explicit loops: `w` is (co, ci), `b` is (co).
pub fn pointwise(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (n, ci, h, wd) = (s[0], s[1], s[2], s[3]);
    let co = w.shape()[0];
    Tensor::from_fn(&[n, co, h, wd], |i| {
        let (bi, o, y, xx) = (i / (co * h * wd), (i / (h * wd)) % co, (i / wd) % h, i % wd);
        let mut acc = b.data()[o];
        for c in 0..ci {
            acc += w.data()[o * ci + c] * x.at(&[bi, c, y, xx]);
        }
        acc
    })
}

/// Depthwise "same" conv with explicit loops: `w` is (c, 1, k, k).
pub fn depthwise(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (c, h, wd) = (s[1], s[2], s[3]);
    let k = w.shape()[2];
    let r = (k / 2) as isize;
    Tensor::from_fn(s, |i| {
        let (bi, ch, y, xx) = (i / (c * h * wd), (i / (h * wd)) % c, (i / wd) % h, i % wd);
        let mut acc = b.data()[ch];
        for ki in 0..k {
            for kj in 0..k {
                let (iy, ix) = (y as isize + ki as isize - r, xx as isize + kj as isize - r);
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                    acc += w.data()[(ch * k + ki) * k + kj] * x.at(&[bi, ch, iy as usize, ix as usize]);
                }
            }
        }
        acc
    })
}

/// Max deviation of a single-branch MSLAM from its loop recomputation.
pub fn mslam_deviation(seed: u64) -> f64 {
    let (m, mut s) = build(seed, |b| Mslam::new(b, "m", 4));
    randomize(&mut s, "m.", seed * 10, 0.5);
    for br in ["m.dw5", "m.dw7"] {
        zero(&mut s, &format!("{br}.weight"));
        zero(&mut s, &format!("{br}.bias"));
    }
    let x = input(&[2, 4, 9, 8], seed + 1);
    let got = eval(&s, &x, |ctx, v| m.forward(ctx, v));
    let xh = pointwise(&x, param(&s, "m.expand.weight"), param(&s, "m.expand.bias"));
    let acc = depthwise(&xh, param(&s, "m.dw3.weight"), param(&s, "m.dw3.bias"));
    let att = pointwise(&acc, param(&s, "m.reduce.weight"), param(&s, "m.reduce.bias"));
    let val = pointwise(&x, param(&s, "m.value.weight"), param(&s, "m.value.bias"));
    let gated = att.zip_map(&val, |a, b| a * b).unwrap();
    let want = pointwise(&gated, param(&s, "m.out.weight"), param(&s, "m.out.bias"));
    got.max_abs_diff(&want)
}

pub fn run_exchange(
    m: &Exchange,
    s: &ParamStore<f64>,
    dep: &Tensor<f64>,
    rl: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, s, NormMode::Eval);
    let (d, r) = m.forward(&ctx, &ctx.input(dep.clone()), &ctx.input(rl.clone())).unwrap();
    (d.to_tensor(), r.to_tensor())
}

/// Max deviation of a 4x exchange (both directions) from its recomputation.
pub fn exchange_deviation(seed: u64) -> f64 {
    let (m, mut s) = build(seed, |b| Exchange::new(b, "x", 6, 4, 4, false));
    randomize(&mut s, "x.", seed * 10, 0.5);
    for st in s.stats.iter_mut() {
        let c = st.stats.mean.len();
        st.stats.mean = (0..c).map(|i| 0.1 * i as f64 - 0.2).collect();
        st.stats.var = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
    }
    let dep = input(&[1, 6, 2, 3], seed + 1);
    let rl = input(&[1, 4, 8, 12], seed + 2);
    let (d, r) = run_exchange(&m, &s, &dep, &rl);

    let bn = |x: &Tensor<f64>, name: &str| {
        let st = &s.stats[s.stats.iter().position(|e| e.name == format!("{name}.running")).unwrap()].stats;
        naive_bn(x, param(&s, &format!("{name}.scale")), param(&s, &format!("{name}.shift")), &st.mean, &st.var)
    };
    let conv_bn = |x: &Tensor<f64>, name: &str, stride: usize, pad: usize| {
        bn(&naive_conv(x, param(&s, &format!("{name}.conv.weight")), None, stride, pad), &format!("{name}.bn"))
    };

    let up = conv_bn(&dep, "x.up.proj", 1, 0);
    let up = bilinear_resize_tensor(&up, 8, 12).unwrap();
    let want_rl = rl.zip_map(&up, |a, b| a + b).unwrap();

    let mut down = conv_bn(&rl, "x.down.proj", 1, 0);
    down = conv_bn(&down, "x.down.down0", 2, 1);
    down = down.map(|v| v.max(0.0));
    down = conv_bn(&down, "x.down.down1", 2, 1);
    let want_dep = dep.zip_map(&down, |a, b| a + b).unwrap();
    r.max_abs_diff(&want_rl).max(d.max_abs_diff(&want_dep))
}

/// Max deviation of FAM from its recomputation.
pub fn fam_deviation(seed: u64) -> f64 {
    let (m, mut s) = build(seed, |b| Fam::new(b, 6, 4));
    randomize(&mut s, "fam.", seed * 10, 0.5);
    let st = &mut s.stats[0].stats;
    st.mean = (0..8).map(|i| 0.05 * i as f64 - 0.1).collect();
    st.var = (0..8).map(|i| 0.4 + 0.2 * i as f64).collect();
    let (mean, var) = (st.mean.clone(), st.var.clone());
    let low = input(&[2, 6, 2, 2], seed + 1);
    let high = input(&[2, 4, 8, 8], seed + 2);
    let out = {
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, &s, NormMode::Eval);
        m.forward(&ctx, &ctx.input(low.clone()), &ctx.input(high.clone())).unwrap().to_tensor()
    };

    let lp = naive_conv(&low, param(&s, "fam.low_proj.weight"), Some(param(&s, "fam.low_proj.bias")), 1, 0);
    let lp = bilinear_resize_tensor(&lp, 8, 8).unwrap();
    let fuse = Tensor::from_fn(&[2, 8, 8, 8], |i| {
        let (b, c, p) = (i / 512, (i / 64) % 8, i % 64);
        if c < 4 {
            lp.data()[(b * 4 + c) * 64 + p]
        } else {
            high.data()[(b * 4 + c - 4) * 64 + p]
        }
    });
    let lin = naive_conv(&fuse, param(&s, "fam.linear.weight"), Some(param(&s, "fam.linear.bias")), 1, 0);
    let gap = Tensor::from_fn(&[2, 8, 1, 1], |i| lin.data()[i * 64..(i + 1) * 64].iter().sum::<f64>() / 64.0);
    // Depthwise 5x5 with padding 2 on a 1x1 map: only the centre tap sees data.
    let (kw, kb) = (param(&s, "fam.gate_conv.weight"), param(&s, "fam.gate_conv.bias"));
    let conv = Tensor::from_fn(&[2, 8, 1, 1], |i| kw.data()[(i % 8) * 25 + 12] * gap.data()[i] + kb.data()[i % 8]);
    let bn = naive_bn(&conv, param(&s, "fam.gate_bn.scale"), param(&s, "fam.gate_bn.shift"), &mean, &var);
    let gate = bn.map(|v| 1.0 / (1.0 + (-v).exp()));
    let want = Tensor::from_fn(fuse.shape(), |i| fuse.data()[i] * gate.data()[i / 64]);
    out.max_abs_diff(&want)
}

/// Per-pixel recount of every score without going through the matrix:
/// (OA, per-class IoU, per-class F1, mIoU, mean F1) over classes that occur.
pub fn brute_force(pred: &[u8], reference: &[u8], c: usize) -> (f64, Vec<f64>, Vec<f64>, f64, f64) {
    let n = pred.len();
    let correct = pred.iter().zip(reference).filter(|(p, r)| p == r).count();
    let mut iou = Vec::new();
    let mut f1 = Vec::new();
    let mut present = Vec::new();
    for k in 0..c as u8 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &r) in pred.iter().zip(reference) {
            match (p == k, r == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        iou.push(if tp + fp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fp + fn_) as f64 });
        let f = if tp + fp == 0 || tp + fn_ == 0 || tp == 0 {
            0.0
        } else {
            let (pr, rc) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64);
            2.0 * pr * rc / (pr + rc)
        };
        f1.push(f);
        present.push(tp + fp + fn_ > 0);
    }
    let mean = |v: &[f64]| {
        let used: Vec<f64> = (0..c).filter(|&k| present[k]).map(|k| v[k]).collect();
        used.iter().sum::<f64>() / used.len() as f64
    };
    (correct as f64 / n as f64, iou.clone(), f1.clone(), mean(&iou), mean(&f1))
}

/// Indices of pixels whose value differs between two (1, C, H, W) maps.
pub fn changed_pixels(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<(usize, usize)> {
    let s = a.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (0..c).any(|ch| a.at(&[0, ch, y, x]) != b.at(&[0, ch, y, x])) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Adds 0.5 to every channel of one pixel.
pub fn perturb(x: &Tensor<f64>, y: usize, xx: usize) -> Tensor<f64> {
    let mut p = x.clone();
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    for ch in 0..c {
        p.data_mut()[(ch * h + y) * w + xx] += 0.5;
    }
    p
}

/// The pixel perturbed by the locality probes: window (1, 1) of a 4x4 grid.
pub const PROBE_PIXEL: (usize, usize) = (5, 7);

pub fn attention(c: usize, window: usize, seed: u64) -> (WindowAttention, ParamStore<f64>) {
    let (m, mut s) = build(seed, |b| WindowAttention::new(b, "attn", c, window, 4));
    randomize(&mut s, "attn.rel_bias", seed + 1, 1.0);
    (m, s)
}

/// Pixels changed by perturbing [`PROBE_PIXEL`] through 4x4 window attention.
pub fn attention_response(seed: u64) -> Vec<(usize, usize)> {
    let (m, s) = attention(8, 4, seed);
    let x = input(&[1, 8, 12, 12], seed + 1);
    let (py, px) = PROBE_PIXEL;
    let base = eval(&s, &x, |ctx, v| m.forward(ctx, v));
    let moved = eval(&s, &perturb(&x, py, px), |ctx, v| m.forward(ctx, v));
    changed_pixels(&base, &moved)
}

pub fn eram_cfg(c: usize, window: usize) -> ModelConfig {
    ModelConfig { rl_channels: c, window_size: window, num_heads: 4, ..ModelConfig::default() }
}

pub fn eram(c: usize, window: usize, seed: u64) -> (Eram, ParamStore<f64>) {
    let cfg = eram_cfg(c, window);
    let (m, mut s) = build(seed, |b| Eram::new(b, "e", &cfg));
    randomize(&mut s, "e.attn.rel_bias", seed + 100, 1.0);
    (m, s)
}

/// Pixels changed by perturbing [`PROBE_PIXEL`] through ERAM (4x4 windows),
/// first with the delta-initialized mixing conv, then with a generic one.
pub fn eram_responses(seed: u64) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let (m, mut s) = eram(8, 4, seed);
    let x = input(&[1, 8, 12, 12], seed + 1);
    let (py, px) = PROBE_PIXEL;
    let run = |s: &ParamStore<f64>| {
        let base = eval(s, &x, |ctx, v| m.forward(ctx, v, None));
        let moved = eval(s, &perturb(&x, py, px), |ctx, v| m.forward(ctx, v, None));
        changed_pixels(&base, &moved)
    };
    let delta = run(&s);
    randomize(&mut s, "e.mix.weight", seed + 2, 0.3);
    (delta, run(&s))
}
