mod common;

use bafnet::fusion::{Exchange, ExchangeAdapter, Fam, SegHead};
use bafnet::params::Ctx;
use bafnet::{BafnetError, ParamStore};
use bafnet_tensor::{bilinear_resize_tensor, Graph, NormMode, Tensor};
use common::reference::*;
use common::*;

#[test]
fn zero_initialized_exchange_is_identity() {
    for ratio in [2, 4] {
        let (m, s) = build(1, |b| Exchange::new(b, "x", 12, 8, ratio, true));
        let dep = input(&[2, 12, 2, 2], 2);
        let rl = input(&[2, 8, 2 * ratio, 2 * ratio], 3);
        let (d, r) = run_exchange(&m, &s, &dep, &rl);
        assert_eq!(d, dep);
        assert_eq!(r, rl);
    }
}

#[test]
fn downsampling_chain_length_is_log2_of_ratio() {
    let mut b = bafnet::params::ParamBuilder::new(0);
    for (ratio, convs) in [(2, 1), (4, 2), (8, 3)] {
        let a = ExchangeAdapter::down(&mut b, &format!("d{ratio}"), 8, 8, ratio, false).unwrap();
        assert_eq!(a.stride2_convs(), convs);
        let u = ExchangeAdapter::up(&mut b, &format!("u{ratio}"), 8, 8, ratio, false).unwrap();
        assert_eq!(u.stride2_convs(), 0);
    }
    assert!(matches!(ExchangeAdapter::down(&mut b, "bad", 8, 8, 3, false), Err(BafnetError::Shape(_))));
    assert!(ExchangeAdapter::up(&mut b, "bad1", 8, 8, 1, false).is_err());
}

#[test]
fn exchange_matches_straight_line_reference() {
    for seed in [4, 5] {
        let d = exchange_deviation(seed);
        assert!(d < 1e-5, "{d}");
    }
}

#[test]
fn exchange_rejects_misaligned_features() {
    let (m, s) = build::<_, f64>(7, |b| Exchange::new(b, "x", 6, 4, 2, false));
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &s, NormMode::Eval);
    let dep = ctx.input(Tensor::zeros(&[1, 6, 4, 4]));
    let rl = ctx.input(Tensor::zeros(&[1, 4, 4, 4]));
    assert!(matches!(m.forward(&ctx, &dep, &rl), Err(BafnetError::Shape(_))));
}

fn fam(low_c: usize, high_c: usize, seed: u64) -> (Fam, ParamStore<f64>) {
    build(seed, |b| Fam::new(b, low_c, high_c))
}

fn fam_parts(
    m: &Fam,
    s: &ParamStore<f64>,
    low: &Tensor<f64>,
    high: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, s, NormMode::Eval);
    let (l, h) = (ctx.input(low.clone()), ctx.input(high.clone()));
    let fuse = m.concat(&ctx, &l, &h).unwrap();
    let gate = m.gate(&ctx, &fuse).unwrap();
    let out = m.forward(&ctx, &l, &h).unwrap();
    (fuse.to_tensor(), gate.to_tensor(), out.to_tensor())
}

#[test]
fn zeroed_gate_halves_the_concatenation() {
    let (m, mut s) = fam(12, 8, 10);
    zero_prefix(&mut s, "fam.linear");
    zero_prefix(&mut s, "fam.gate");
    let (fuse, gate, out) = fam_parts(&m, &s, &input(&[2, 12, 2, 2], 11), &input(&[2, 8, 8, 8], 12));
    assert!(gate.data().iter().all(|&v| v == 0.5));
    assert_eq!(out, fuse.map(|v| 0.5 * v));
}

#[test]
fn saturated_gate_reduces_to_plain_concatenation() {
    let (m, mut s) = fam(12, 8, 13);
    zero(&mut s, "fam.gate_bn.scale");
    set(&mut s, "fam.gate_bn.shift", |_| 1e3);
    let low = input(&[1, 12, 2, 2], 14);
    let high = input(&[1, 8, 8, 8], 15);
    let (fuse, gate, out) = fam_parts(&m, &s, &low, &high);
    assert!(gate.data().iter().all(|&v| v == 1.0));
    assert_eq!(out, fuse);
    // The concatenation itself: upsampled projected low first, then high.
    let lp = naive_conv(&low, param(&s, "fam.low_proj.weight"), Some(param(&s, "fam.low_proj.bias")), 1, 0);
    let lp = bilinear_resize_tensor(&lp, 8, 8).unwrap();
    for c in 0..16 {
        for i in 0..64 {
            let want = if c < 8 { lp.data()[c * 64 + i] } else { high.data()[(c - 8) * 64 + i] };
            assert!((fuse.data()[c * 64 + i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn gate_shape_and_range_at_full_width() {
    let (m, s) = build::<_, f32>(16, |b| Fam::new(b, 256, 128));
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &s, NormMode::Eval);
    let low = ctx.input(Tensor::from_fn(&[2, 256, 4, 4], |i| ((i % 13) as f32) * 0.1 - 0.6));
    let high = ctx.input(Tensor::from_fn(&[2, 128, 16, 16], |i| ((i % 7) as f32) * 0.1 - 0.3));
    let fuse = m.concat(&ctx, &low, &high).unwrap();
    assert_eq!(fuse.shape(), &[2, 256, 16, 16]);
    let gate = m.gate(&ctx, &fuse).unwrap();
    assert_eq!(gate.shape(), &[2, 256, 1, 1]);
    assert!(gate.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(m.forward(&ctx, &low, &high).unwrap().shape(), &[2, 256, 16, 16]);
}

#[test]
fn fam_matches_straight_line_reference() {
    for seed in [17, 18] {
        let d = fam_deviation(seed);
        assert!(d < 1e-5, "{d}");
    }
}

#[test]
fn fam_rejects_resolution_mismatch() {
    let (m, s) = fam(6, 4, 20);
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &s, NormMode::Eval);
    let low = ctx.input(Tensor::zeros(&[1, 6, 2, 2]));
    let high = ctx.input(Tensor::zeros(&[1, 4, 4, 4]));
    assert!(matches!(m.forward(&ctx, &low, &high), Err(BafnetError::Shape(_))));
}

#[test]
fn head_halves_channels_and_upsamples_by_eight() {
    let (m, s) = build::<_, f32>(21, |b| SegHead::new(b, 256, 6));
    assert_eq!(s.by_name("head.conv.conv.weight").unwrap().shape(), &[128, 256, 3, 3]);
    assert_eq!(s.by_name("head.cls.weight").unwrap().shape(), &[6, 128, 1, 1]);
    assert_eq!(m.upsample, 8);
    let x = Tensor::<f32>::from_fn(&[1, 256, 64, 64], |i| ((i % 11) as f32) * 0.1 - 0.5);
    let y = eval(&s, &x, |ctx, v| m.forward(ctx, v));
    assert_eq!(y.shape(), &[1, 6, 512, 512]);
}
