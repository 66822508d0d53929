mod common;

use bafnet::complexity::{complexity, params_by_module};
use bafnet::config::{LossForm, MetricClasses};
use bafnet::loss::{ce_loss, dice_loss, hybrid_loss, probabilities, Targets, IGNORE_LABEL, PROB_CLAMP};
use bafnet::metrics::ConfusionMatrix;
use bafnet::nn::ConvSpec;
use bafnet::params::Ctx;
use bafnet::{Bafnet, ModelConfig};
use bafnet_tensor::gradcheck::{gradcheck, GradcheckOptions};
use bafnet_tensor::{Graph, NormMode, Tensor};
use common::reference::*;
use common::*;
use proptest::prelude::*;

fn one_pixel(p: &[f64], y: &[f64]) -> (Tensor<f64>, Targets<f64>) {
    let probs = Tensor::new(&[1, p.len(), 1, 1], p.to_vec()).unwrap();
    let t = Targets::from_onehot(Tensor::new(&[1, y.len(), 1, 1], y.to_vec()).unwrap()).unwrap();
    (probs, t)
}

fn losses(p: &Tensor<f64>, t: &Targets<f64>, form: LossForm) -> (f64, f64, f64) {
    let g = Graph::no_grad();
    let v = g.constant(p.clone());
    let ce = ce_loss(&v, t, form).unwrap().value().item();
    let dice = dice_loss(&v, t).unwrap().value().item();
    let (_, r) = hybrid_loss(&v, t, form).unwrap();
    assert_eq!(r.ce, ce);
    assert_eq!(r.dice, dice);
    (ce, dice, r.total)
}

#[test]
fn worked_two_class_example() {
    let (p, t) = one_pixel(&[0.8, 0.2], &[1.0, 0.0]);
    let (ce, dice, total) = losses(&p, &t, LossForm::Literal);
    assert!((ce - 0.4463).abs() < 1e-4, "{ce}");
    assert!((dice - 0.1111).abs() < 1e-4, "{dice}");
    assert!((total - 0.5574).abs() < 1e-4, "{total}");
    assert_eq!(total, ce + dice);
}

#[test]
fn uniform_prediction_cross_entropy() {
    let (p, t) = one_pixel(&[0.5, 0.5], &[1.0, 0.0]);
    let (ce, _, _) = losses(&p, &t, LossForm::Literal);
    assert!((ce - 1.3863).abs() < 1e-4, "{ce}");
}

#[test]
fn perfect_prediction_is_nearly_free() {
    let c = 6;
    let labels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i % c) as u8).collect();
    let t = Targets::<f64>::from_labels(&labels, [2, 4, 4], c, None).unwrap();
    let clamp = t.onehot.map(|v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
    for form in [LossForm::Literal, LossForm::Categorical] {
        let (ce, dice, total) = losses(&clamp, &t, form);
        assert!(ce <= c as f64 * 1e-6, "{ce}");
        assert!(dice.abs() < 1e-5, "{dice}");
        assert_eq!(total, ce + dice);
    }
    // Through the softmax with very confident logits the same holds.
    let g = Graph::no_grad();
    let logits = g.constant(t.onehot.map(|v| 40.0 * v));
    let (_, r) = hybrid_loss(&probabilities(&logits).unwrap(), &t, LossForm::Literal).unwrap();
    assert!(r.total < 1e-5, "{r:?}");
}

#[test]
fn ignored_pixels_do_not_contribute() {
    let labels = [0u8, 1, IGNORE_LABEL, 1];
    let t = Targets::<f64>::from_labels(&labels, [1, 2, 2], 2, None).unwrap();
    let p = Tensor::new(&[1, 2, 2, 2], vec![0.9, 0.3, 0.5, 0.2, 0.1, 0.7, 0.5, 0.8]).unwrap();
    let full = losses(&p, &t, LossForm::Literal);
    // Changing the ignored pixel's prediction changes nothing.
    let mut q = p.clone();
    q.data_mut()[2] = 0.01;
    q.data_mut()[6] = 0.99;
    assert_eq!(losses(&q, &t, LossForm::Literal), full);
    // Same as the three scored pixels on their own.
    let kept = Targets::<f64>::from_labels(&[0, 1, 1], [1, 1, 3], 2, None).unwrap();
    let kp = Tensor::new(&[1, 2, 1, 3], vec![0.9, 0.3, 0.2, 0.1, 0.7, 0.8]).unwrap();
    let sub = losses(&kp, &kept, LossForm::Literal);
    assert!((sub.0 - full.0).abs() < 1e-12 && (sub.1 - full.1).abs() < 1e-12);
}

#[test]
fn excluding_clutter_drops_its_pixels() {
    let labels = [0u8, 2, 1, 2];
    let with = Targets::<f64>::from_labels(&labels, [1, 2, 2], 3, None).unwrap();
    let without = Targets::<f64>::from_labels(&labels, [1, 2, 2], 3, Some(2)).unwrap();
    assert_eq!((with.count, without.count), (4, 2));
}

#[test]
fn hybrid_gradients_match_finite_differences() {
    let labels: Vec<u8> = (0..2 * 3 * 3).map(|i| if i == 4 { IGNORE_LABEL } else { (i * 7 % 4) as u8 }).collect();
    let t = Targets::<f64>::from_labels(&labels, [2, 3, 3], 4, None).unwrap();
    for form in [LossForm::Literal, LossForm::Categorical] {
        let logits = input(&[2, 4, 3, 3], 5).map(|v| 2.0 * v);
        let report = gradcheck(
            &[logits],
            |_, v| Ok(hybrid_loss(&probabilities(&v[0]).unwrap(), &t, form).unwrap().0),
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-3), "{form:?} {report:?}");
    }
}

#[test]
fn dice_decreases_towards_the_target() {
    let labels: Vec<u8> = (0..16).map(|i| (i * 5 % 3) as u8).collect();
    let t = Targets::<f64>::from_labels(&labels, [1, 4, 4], 3, None).unwrap();
    let g = Graph::no_grad();
    let start = g.constant(input(&[1, 3, 4, 4], 8)).softmax(1).unwrap().to_tensor();
    let mut last = f64::INFINITY;
    for step in 0..=20 {
        let a = step as f64 / 20.0;
        let p = start.zip_map(&t.onehot, |s, y| (1.0 - a) * s + a * y).unwrap();
        let d = dice_loss(&g.constant(p), &t).unwrap().value().item();
        assert!(d < last, "step {step}: {d} !< {last}");
        last = d;
    }
    assert!(last.abs() < 1e-5);
}

fn prob_maps() -> impl Strategy<Value = (usize, Vec<u8>, Vec<f64>)> {
    (2usize..6, 1usize..12).prop_flat_map(|(c, n)| {
        (Just(c), prop::collection::vec(0..c as u8, n), prop::collection::vec(1e-3f64..1.0, c * n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_stays_in_unit_interval((c, labels, raw) in prob_maps()) {
        let n = labels.len();
        let t = Targets::<f64>::from_labels(&labels, [1, 1, n], c, None).unwrap();
        // Normalize each pixel's column onto the simplex.
        let col: Vec<f64> = (0..n).map(|p| (0..c).map(|k| raw[k * n + p]).sum()).collect();
        let p = Tensor::from_fn(&[1, c, 1, n], |i| raw[i] / col[i % n]);
        let (ce, dice, total) = losses(&p, &t, LossForm::Literal);
        prop_assert!((0.0..=1.0).contains(&dice), "{}", dice);
        prop_assert!(ce >= 0.0);
        prop_assert_eq!(total, ce + dice);
    }
}

fn masks(max_side: usize) -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
    (2usize..7, 1usize..=max_side, 1usize..=max_side).prop_flat_map(|(c, h, w)| {
        let v = prop::collection::vec(0..c as u8, h * w);
        (Just(c), v.clone(), v)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_match_brute_force_recount((c, pred, reference) in masks(32)) {
        let mut cm = ConfusionMatrix::with_classes(c);
        cm.accumulate(&pred, &reference).unwrap();
        prop_assert_eq!(cm.total(), pred.len() as u64);
        let (oa, iou, f1, miou, mf1) = brute_force(&pred, &reference, c);
        prop_assert_eq!(cm.oa().unwrap(), oa);
        let scores = cm.class_scores().unwrap();
        prop_assert_eq!(scores.iter().map(|s| s.iou).collect::<Vec<_>>(), iou);
        prop_assert_eq!(cm.per_class_f1().unwrap(), f1);
        prop_assert_eq!(cm.miou(MetricClasses::All).unwrap(), miou);
        prop_assert_eq!(cm.mean_f1(MetricClasses::All).unwrap(), mf1);
    }

    #[test]
    fn merge_is_order_independent((c, pred, reference) in masks(16), split in any::<prop::sample::Index>()) {
        let cut = split.index(pred.len() + 1);
        let part = |r: std::ops::Range<usize>| {
            let mut m = ConfusionMatrix::with_classes(c);
            m.accumulate(&pred[r.clone()], &reference[r]).unwrap();
            m
        };
        let (a, b) = (part(0..cut), part(cut..pred.len()));
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        let mut ba = b.clone();
        ba.merge(&a).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert_eq!(&ab, &part(0..pred.len()));
        // Accumulating sequentially equals accumulating the concatenation.
        let mut seq = a.clone();
        seq.accumulate(&pred[cut..], &reference[cut..]).unwrap();
        prop_assert_eq!(seq, ab);
    }

    #[test]
    fn class_permutation_only_permutes_scores((c, pred, reference) in masks(16), rot in 1usize..6) {
        let perm = |v: &[u8]| v.iter().map(|&x| ((x as usize + rot) % c) as u8).collect::<Vec<_>>();
        let mut a = ConfusionMatrix::with_classes(c);
        a.accumulate(&pred, &reference).unwrap();
        let mut b = ConfusionMatrix::with_classes(c);
        b.accumulate(&perm(&pred), &perm(&reference)).unwrap();
        let (sa, sb) = (a.class_scores().unwrap(), b.class_scores().unwrap());
        for k in 0..c {
            prop_assert_eq!(sa[k].iou, sb[(k + rot) % c].iou);
            prop_assert_eq!(sa[k].f1, sb[(k + rot) % c].f1);
        }
        prop_assert_eq!(a.oa().unwrap(), b.oa().unwrap());
        prop_assert!((a.miou(MetricClasses::All).unwrap() - b.miou(MetricClasses::All).unwrap()).abs() < 1e-12);
        prop_assert!((a.mean_f1(MetricClasses::All).unwrap() - b.mean_f1(MetricClasses::All).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let labels: Vec<u8> = (0..100).map(|i| (i % 6) as u8).collect();
    let mut cm = ConfusionMatrix::with_classes(6);
    cm.accumulate(&labels, &labels).unwrap();
    for which in [MetricClasses::All, MetricClasses::Foreground] {
        assert_eq!(cm.miou(which).unwrap(), 1.0);
        assert_eq!(cm.mean_f1(which).unwrap(), 1.0);
    }
    assert_eq!(cm.oa().unwrap(), 1.0);
}

#[test]
fn conv_accounting_example() {
    let (conv, s) = build::<_, f32>(0, |b| ConvSpec::new(16, 32, 3).build(b, "c"));
    assert_eq!(s.count(), 4640);
    let g = Graph::no_grad();
    g.enable_flop_counter();
    let ctx = Ctx::new(&g, &s, NormMode::Eval);
    let y = conv.forward(&ctx, &ctx.input(Tensor::zeros(&[1, 16, 8, 8]))).unwrap();
    assert_eq!(y.shape(), &[1, 32, 8, 8]);
    let total = g.take_flop_counter().unwrap().total();
    assert_eq!(total.flops, 591_872);
    assert_eq!(total.macs, 3 * 3 * 16 * 32 * 64);
}

#[test]
fn model_breakdown_sums_to_totals() {
    let cfg = ModelConfig::default();
    let (m, s) = Bafnet::build::<f32>(&cfg, 0).unwrap();
    let c = complexity(&m, &s, 128, 128).unwrap();
    let names: Vec<&str> = c.params_by_module.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(names, ["dep", "rl", "xch1", "xch2", "fam", "head"]);
    assert_eq!(c.params_by_module.iter().map(|(_, n)| n).sum::<usize>(), c.params);
    assert_eq!(c.flops_by_module.iter().map(|(_, t)| t.macs).sum::<u64>(), c.total.macs);
    assert_eq!(params_by_module(&s), c.params_by_module);
    // Deterministic.
    assert_eq!(complexity(&m, &s, 128, 128).unwrap(), c);
    // Compute scales with the pixel count, up to the gate conv on the
    // pooled 1x1 map (256 channels x 25 taps), which is size-independent.
    let big = complexity(&m, &s, 256, 256).unwrap();
    assert_eq!(big.total.macs, 4 * c.total.macs - 3 * 256 * 25);
}
