//! Plain and test-time-augmented prediction, whole scenes via tiling.

use bafnet_tensor::{bilinear_resize_tensor, softmax_tensor, Real, Tensor};

use crate::config::TrainConfig;
use crate::data::tile::{tile, Stitcher};
use crate::data::{spatial, Orientation};
use crate::error::{shape_err, Result};
use crate::model::Bafnet;
use crate::params::ParamStore;

/// Anything mapping `(B, C, H, W)` images to `(B, K, H, W)` logits.
pub trait Predictor<T: Real> {
    fn num_classes(&self) -> usize;
    /// Input sides must be multiples of this.
    fn size_multiple(&self) -> usize;
    fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>>;

    fn probabilities(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(softmax_tensor(&self.logits(image)?, 1)?)
    }
}

/// Eval-mode network.
pub struct ModelPredictor<'a, T: Real> {
    pub model: &'a Bafnet,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Real> ModelPredictor<'a, T> {
    pub fn new(model: &'a Bafnet, store: &'a ParamStore<T>) -> Self {
        ModelPredictor { model, store }
    }
}

impl<T: Real> Predictor<T> for ModelPredictor<'_, T> {
    fn num_classes(&self) -> usize {
        self.model.cfg.num_classes
    }

    fn size_multiple(&self) -> usize {
        self.model.cfg.size_multiple()
    }

    fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.model.infer(self.store, image)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaConfig {
    pub scales: Vec<f64>,
    /// Adds a horizontally and a vertically flipped pass per scale.
    pub flips: bool,
}

impl TtaConfig {
    /// Single unflipped pass at the original size.
    pub fn identity() -> Self {
        TtaConfig { scales: vec![1.0], flips: false }
    }

    pub fn from_config(t: &TrainConfig) -> Self {
        if t.tta {
            TtaConfig { scales: t.tta_scales.clone(), flips: t.tta_flips }
        } else {
            TtaConfig::identity()
        }
    }

    /// `(scale, orientation)` of every pass, in evaluation order.
    pub fn variants(&self) -> Vec<(f64, Orientation)> {
        let mut orients = vec![Orientation::default()];
        if self.flips {
            orients.push(Orientation { hflip: true, ..Default::default() });
            orients.push(Orientation { vflip: true, ..Default::default() });
        }
        self.scales.iter().flat_map(|&s| orients.iter().map(move |&o| (s, o))).collect()
    }
}

/// `n·s` rounded to the nearest positive multiple of `m`.
pub fn tta_size(n: usize, s: f64, m: usize) -> usize {
    (((n as f64 * s) / m as f64).round() as usize).max(1) * m
}

/// Probabilities of each pass, mapped back to the input frame and size.
pub fn tta_variant_outputs<T: Real, P: Predictor<T> + ?Sized>(
    p: &P,
    image: &Tensor<T>,
    cfg: &TtaConfig,
) -> Result<Vec<Tensor<T>>> {
    if image.ndim() != 4 {
        return Err(shape_err(format!("expected (B, C, H, W) image, got {:?}", image.shape())));
    }
    let (_, h, w) = spatial(image);
    let m = p.size_multiple();
    let mut out = Vec::new();
    for (s, o) in cfg.variants() {
        let (sh, sw) = (tta_size(h, s, m), tta_size(w, s, m));
        let x = if (sh, sw) == (h, w) { image.clone() } else { bilinear_resize_tensor(image, sh, sw)? };
        let probs = o.inverse().apply_tensor(&p.probabilities(&o.apply_tensor(&x)?)?)?;
        out.push(if (sh, sw) == (h, w) { probs } else { bilinear_resize_tensor(&probs, h, w)? });
    }
    Ok(out)
}

/// Mean class probabilities over all passes; a single pass is returned as is.
pub fn tta_predict<T: Real, P: Predictor<T> + ?Sized>(p: &P, image: &Tensor<T>, cfg: &TtaConfig) -> Result<Tensor<T>> {
    let mut outs = tta_variant_outputs(p, image, cfg)?.into_iter();
    let mut acc = outs.next().ok_or_else(|| shape_err("test-time augmentation without any scale"))?;
    let mut n = 1usize;
    for o in outs {
        acc.add_assign(&o)?;
        n += 1;
    }
    if n > 1 {
        let inv = T::from_f64c(1.0 / n as f64);
        acc = acc.map(|v| v * inv);
    }
    Ok(acc)
}

/// Tiles a `(C, H, W)` scene, predicts every tile and stitches `(K, H, W)`
/// probabilities.
pub fn predict_scene<T: Real, P: Predictor<T> + ?Sized>(
    p: &P,
    image: &Tensor<f32>,
    cfg: &TtaConfig,
    size: usize,
    stride: usize,
) -> Result<Tensor<f32>> {
    let (_, h, w) = spatial(image);
    let mut st = Stitcher::new(p.num_classes(), h, w);
    for t in tile(image, None, size, stride, "scene")? {
        let mut shape = vec![1];
        shape.extend_from_slice(t.image.shape());
        let x = t.image.cast::<T>().reshape(&shape)?;
        let probs = tta_predict(p, &x, cfg)?;
        let k = probs.dim(1);
        st.add(&probs.cast::<f32>().reshape(&[k, size, size])?, t.offset, t.valid)?;
    }
    st.probabilities()
}
