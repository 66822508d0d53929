use bafnet::config::{Ablation, ModelConfig};
use bafnet::data::augment::Augmenter;
use bafnet::data::dataset::{read_image, read_label, write_image, write_label};
use bafnet::data::palette::ClassPalette;
use bafnet::data::synth::{self, CAR};
use bafnet::data::tile::{argmax, tile, Stitcher};
use bafnet::data::tta::{predict_scene, tta_predict, tta_size, tta_variant_outputs};
use bafnet::data::{Dataset, Mask, ModelPredictor, Orientation, Predictor, TtaConfig};
use bafnet::loss::IGNORE_LABEL;
use bafnet::{Bafnet, Result};
use bafnet_tensor::{bilinear_resize_tensor, softmax_tensor, Real, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn labels(h: usize, w: usize, seed: u64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|i| ((i as u64 * 2654435761 + seed) % 6) as u8).collect()).unwrap()
}

fn ramp_image(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[3, h, w], |i| (i % 251) as f32 / 251.0)
}

fn onehot(m: &Mask, classes: usize) -> Tensor<f32> {
    let n = m.h * m.w;
    Tensor::from_fn(&[classes, m.h, m.w], |i| if m.data[i % n] as usize == i / n { 1.0 } else { 0.0 })
}

// ---- palette ----

proptest! {
    #[test]
    fn palette_roundtrip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| {
            let v: u8 = rand::Rng::gen_range(&mut rng, 0..7);
            if v == 6 { IGNORE_LABEL } else { v }
        }).collect();
        let m = Mask::new(h, w, data).unwrap();
        let p = ClassPalette::isprs();
        prop_assert_eq!(p.decode(&p.encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn orientation_inverse_roundtrip(h in 1usize..7, w in 1usize..7, hf: bool, vf: bool, k in 0u8..4) {
        let t = Tensor::<f64>::from_fn(&[2, h, w], |i| i as f64);
        let o = Orientation { hflip: hf, vflip: vf, rot90: k };
        prop_assert_eq!(o.inverse().apply_tensor(&o.apply_tensor(&t).unwrap()).unwrap(), t);
    }
}

#[test]
fn zero_mask_encodes_to_class_zero_color() {
    let p = ClassPalette::isprs();
    let img = p.encode(&Mask::filled(5, 7, 0)).unwrap();
    assert!(img.pixels().all(|px| px.0 == p.colors[0]));
}

#[test]
fn unknown_color_is_reported_with_location() {
    let p = ClassPalette::isprs();
    let mut img = p.encode(&labels(4, 4, 1)).unwrap();
    img.put_pixel(3, 2, image::Rgb([1, 2, 3]));
    let e = p.decode(&img).unwrap_err().to_string();
    assert!(e.contains("(3, 2)") && e.contains("[1, 2, 3]"), "{e}");
}

#[test]
fn png_files_roundtrip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = ClassPalette::isprs();
    let m = labels(9, 13, 4);
    write_label(&dir.path().join("l.png"), &m, &p).unwrap();
    assert_eq!(read_label(&dir.path().join("l.png"), &p).unwrap(), m);
    let img = Tensor::from_fn(&[3, 9, 13], |i| ((i * 31) % 256) as f32 / 255.0);
    write_image(&dir.path().join("i.png"), &img).unwrap();
    assert_eq!(read_image(&dir.path().join("i.png")).unwrap(), img);
}

#[test]
fn dataset_save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dataset::synthetic(9, 3, 48).unwrap();
    d.save(dir.path(), "val").unwrap();
    let back = Dataset::load(dir.path(), "val", ClassPalette::isprs()).unwrap();
    assert_eq!(back, d);
    std::fs::remove_file(dir.path().join("val/manifest.txt")).unwrap();
    assert_eq!(Dataset::load(dir.path(), "val", ClassPalette::isprs()).unwrap(), d);
}

// ---- tiling ----

#[test]
fn exact_grid_gives_four_tiles() {
    let t = tile(&ramp_image(1024, 1024), None, 512, 512, "a").unwrap();
    assert_eq!(t.len(), 4);
    assert!(t.iter().all(|s| s.valid == (512, 512) && s.mask.data.iter().all(|&v| v == IGNORE_LABEL)));
    let offs: Vec<_> = t.iter().map(|s| s.offset).collect();
    assert_eq!(offs, vec![(0, 0), (0, 512), (512, 0), (512, 512)]);
}

#[test]
fn padded_grid_covers_every_pixel_once() {
    let m = labels(600, 600, 2);
    let t = tile(&ramp_image(600, 600), Some(&m), 512, 512, "b").unwrap();
    assert_eq!(t.len(), 4);
    let mut st = Stitcher::new(6, 600, 600);
    for s in &t {
        assert_eq!(s.image.shape(), &[3, 512, 512]);
        st.add(&onehot(&s.mask, 6), s.offset, s.valid).unwrap();
    }
    assert!(st.coverage().iter().all(|&n| n == 1));
    // Scored pixels across tiles equal the source pixel count.
    let scored: usize = t.iter().map(|s| s.mask.data.iter().filter(|&&v| v != IGNORE_LABEL).count()).sum();
    assert_eq!(scored, 600 * 600);
}

#[test]
fn tile_then_stitch_reproduces_the_mask() {
    for (h, w, size, stride) in [(600, 600, 512, 512), (70, 45, 32, 24), (33, 33, 16, 16)] {
        let m = labels(h, w, 3);
        let mut st = Stitcher::new(6, h, w);
        for s in tile(&ramp_image(h, w), Some(&m), size, stride, "c").unwrap() {
            st.add(&onehot(&s.mask, 6), s.offset, s.valid).unwrap();
        }
        assert_eq!(st.argmax().unwrap(), m, "{h}x{w} size {size} stride {stride}");
    }
}

#[test]
fn overlapping_probabilities_are_averaged() {
    let mut st = Stitcher::new(2, 1, 3);
    st.add(&Tensor::new(&[2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap(), (0, 0), (1, 2)).unwrap();
    st.add(&Tensor::new(&[2, 1, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(), (0, 1), (1, 2)).unwrap();
    assert_eq!(st.probabilities().unwrap().data(), &[1.0, 0.5, 0.0, 0.0, 0.5, 1.0]);
    assert!(Stitcher::new(2, 2, 2).probabilities().is_err());
    assert!(tile(&Tensor::zeros(&[3, 0, 4]), None, 4, 4, "e").is_err());
}

// ---- augmentation ----

#[test]
fn zero_probabilities_are_identity() {
    let m = labels(32, 32, 5);
    let img = ramp_image(32, 32);
    let a = Augmenter { scales: vec![0.5, 1.5], ..Augmenter::identity(32) };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..8 {
        assert_eq!(a.apply(&img, &m, &mut rng).unwrap(), (img.clone(), m.clone()));
    }
}

#[test]
fn flips_are_involutions() {
    let m = labels(5, 8, 6);
    for o in [
        Orientation { hflip: true, ..Default::default() },
        Orientation { vflip: true, ..Default::default() },
        Orientation { hflip: true, vflip: true, rot90: 0 },
    ] {
        assert_eq!(o.apply_mask(&o.apply_mask(&m)), m);
    }
}

#[test]
fn flips_and_turns_preserve_the_class_histogram() {
    let m = labels(24, 24, 7);
    let img = ramp_image(24, 24);
    let a = Augmenter { hflip: 0.5, vflip: 0.5, rot90: 1.0, ..Augmenter::identity(24) };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..40 {
        let d = a.draw(24, 24, &mut rng);
        seen.insert((d.orientation.hflip, d.orientation.vflip, d.orientation.rot90));
        let (_, m2) = a.apply_draw(&img, &m, &d).unwrap();
        assert_eq!(m2.histogram(6), m.histogram(6));
    }
    assert!(seen.len() > 8, "orientations drawn: {seen:?}");
}

/// Image channel 0 encodes the label of 8x8 blocks; wherever the augmented
/// mask is locally uniform, the image must still carry that label.
#[test]
fn augmentation_keeps_image_and_mask_aligned() {
    let n = 64;
    let m = Mask::new(n, n, (0..n * n).map(|i| (((i / n) / 8 + (i % n) / 8) % 6) as u8).collect()).unwrap();
    let img = Tensor::from_fn(&[3, n, n], |i| if i < n * n { m.data[i] as f32 / 8.0 } else { 0.5 });
    let a =
        Augmenter { scales: vec![0.5, 0.75, 1.25, 1.5], scale_prob: 0.8, hflip: 0.5, vflip: 0.5, rot90: 1.0, size: 48 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..20 {
        let (i2, m2) = a.apply(&img, &m, &mut rng).unwrap();
        assert_eq!((m2.h, m2.w, i2.shape()), (48, 48, &[3usize, 48, 48][..]));
        for y in 1..47 {
            for x in 1..47 {
                let v = m2.at(y, x);
                let uniform = (0..3).all(|dy| (0..3).all(|dx| m2.at(y + dy - 1, x + dx - 1) == v));
                if v != IGNORE_LABEL && uniform {
                    assert!((i2.data()[y * 48 + x] - v as f32 / 8.0).abs() < 1e-5, "({y}, {x})");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 10_000);
}

#[test]
fn augmentation_is_seeded() {
    let m = labels(40, 40, 8);
    let img = ramp_image(40, 40);
    let a = Augmenter {
        scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
        scale_prob: 1.0,
        hflip: 0.5,
        vflip: 0.5,
        rot90: 1.0,
        size: 32,
    };
    let run = |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        (0..5).map(|_| a.apply(&img, &m, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

// ---- test-time augmentation ----

fn small_model() -> (Bafnet, bafnet::ParamStore<f32>) {
    Bafnet::build::<f32>(&ModelConfig::ablation(Ablation::CpVanB0), 11).unwrap()
}

#[test]
fn singleton_tta_is_plain_inference() {
    let (m, s) = small_model();
    let p = ModelPredictor::new(&m, &s);
    let x = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 7) % 13) as f32 / 13.0);
    let plain = softmax_tensor(&m.infer(&s, &x).unwrap(), 1).unwrap();
    assert_eq!(tta_predict(&p, &x, &TtaConfig::identity()).unwrap(), plain);
}

/// Logits are a fixed per-class constant whatever the input.
struct ConstantPredictor(Vec<f64>);

impl Predictor<f64> for ConstantPredictor {
    fn num_classes(&self) -> usize {
        self.0.len()
    }

    fn size_multiple(&self) -> usize {
        8
    }

    fn logits(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = image.shape();
        let plane = s[2] * s[3];
        let k = self.0.len();
        Ok(Tensor::from_fn(&[s[0], k, s[2], s[3]], |i| self.0[(i / plane) % k]))
    }
}

#[test]
fn equivariant_toy_is_unchanged_by_tta() {
    let p = ConstantPredictor(vec![0.3, -1.0, 2.0]);
    let x = Tensor::from_fn(&[2, 3, 32, 40], |i| (i % 17) as f64);
    let plain = tta_predict(&p, &x, &TtaConfig::identity()).unwrap();
    let full = tta_predict(&p, &x, &TtaConfig { scales: vec![0.5, 0.75, 1.0, 1.25, 1.5], flips: true }).unwrap();
    assert!(plain.max_abs_diff(&full) < 1e-12);
}

fn flip_w<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let w = t.dim(-1);
    Tensor::from_fn(t.shape(), |i| t.data()[i - i % w + (w - 1 - i % w)])
}

fn flip_h<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (t.dim(-2), t.dim(-1));
    Tensor::from_fn(t.shape(), |i| {
        let (p, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.data()[(p * h + h - 1 - y) * w + x]
    })
}

#[test]
fn tta_equals_the_mean_of_hand_built_variants() {
    let (m, s) = small_model();
    let p = ModelPredictor::new(&m, &s);
    let x = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 5) % 23) as f32 / 23.0);
    let cfg = TtaConfig { scales: vec![0.5, 1.0, 1.5], flips: true };
    let probs = |t: &Tensor<f32>| softmax_tensor(&m.infer(&s, t).unwrap(), 1).unwrap();
    let mut stored = Vec::new();
    for sc in [0.5, 1.0, 1.5] {
        let side = tta_size(64, sc, 32);
        let xs = if side == 64 { x.clone() } else { bilinear_resize_tensor(&x, side, side).unwrap() };
        let back = |t: Tensor<f32>| if side == 64 { t } else { bilinear_resize_tensor(&t, 64, 64).unwrap() };
        stored.push(back(probs(&xs)));
        stored.push(back(flip_w(&probs(&flip_w(&xs)))));
        stored.push(back(flip_h(&probs(&flip_h(&xs)))));
    }
    let n = stored.len() as f32;
    let mean = Tensor::from_fn(stored[0].shape(), |i| stored.iter().map(|t| t.data()[i]).sum::<f32>() / n);
    let got = tta_predict(&p, &x, &cfg).unwrap();
    assert!(got.max_abs_diff(&mean) < 1e-6, "{}", got.max_abs_diff(&mean));
    let variants = tta_variant_outputs(&p, &x, &cfg).unwrap();
    assert_eq!(variants.len(), 9);
    for (a, b) in variants.iter().zip(&stored) {
        assert!(a.max_abs_diff(b) < 1e-6);
    }
}

#[test]
fn scene_prediction_stitches_tiles() {
    let p = ConstantPredictor(vec![0.0, 1.0]);
    let img = ramp_image(40, 50);
    let probs = predict_scene(&p, &img, &TtaConfig::identity(), 32, 32).unwrap();
    assert_eq!(probs.shape(), &[2, 40, 50]);
    assert!(argmax(&probs).unwrap().data.iter().all(|&v| v == 1));
}

// ---- synthetic scenes ----

#[test]
fn synthetic_generation_is_deterministic() {
    let a = Dataset::synthetic(21, 4, 64).unwrap();
    assert_eq!(a, Dataset::synthetic(21, 4, 64).unwrap());
    assert_ne!(a, Dataset::synthetic(22, 4, 64).unwrap());
}

#[test]
fn synthetic_class_statistics() {
    let scenes = synth::generate(2024, 40, 256).unwrap();
    let mut present = [0usize; 6];
    let mut total = [0usize; 6];
    for s in &scenes {
        for (k, &c) in s.mask.histogram(6).iter().enumerate() {
            present[k] += (c > 0) as usize;
            total[k] += c;
        }
    }
    for (k, &n) in present.iter().enumerate() {
        assert!(n * 10 >= scenes.len() * 9, "class {k} in {n} of {} scenes", scenes.len());
    }
    let all: usize = total.iter().sum();
    let car = total[CAR as usize] as f64 / all as f64;
    assert!(car > 0.0 && car < 0.05, "car fraction {car}");
    assert!(scenes.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
}
