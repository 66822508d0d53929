//! Random scale, crop/pad, flips and quarter turns applied jointly to an
//! image and its mask.

use bafnet_tensor::{bilinear_resize_tensor, Tensor};
use rand::Rng;

use crate::config::TrainConfig;
use crate::data::tile::reflect;
use crate::data::{remap_planes, spatial, Mask, Orientation};
use crate::error::{shape_err, Result};
use crate::loss::IGNORE_LABEL;

#[derive(Clone, Debug, PartialEq)]
pub struct Augmenter {
    pub scales: Vec<f64>,
    pub scale_prob: f64,
    pub hflip: f64,
    pub vflip: f64,
    pub rot90: f64,
    /// Output side.
    pub size: usize,
}

/// The random choices of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    /// Top-left of the crop in the scaled image (0 when padding).
    pub crop: (usize, usize),
    pub orientation: Orientation,
}

impl Augmenter {
    pub fn from_config(t: &TrainConfig) -> Self {
        Augmenter {
            scales: t.aug_scales.clone(),
            scale_prob: t.aug_scale_prob,
            hflip: t.aug_hflip,
            vflip: t.aug_vflip,
            rot90: t.aug_rot90,
            size: t.crop_size,
        }
    }

    /// No scaling, flips or turns; only cropping/padding to `size`.
    pub fn identity(size: usize) -> Self {
        Augmenter { scales: vec![1.0], scale_prob: 0.0, hflip: 0.0, vflip: 0.0, rot90: 0.0, size }
    }

    /// Draws every random number in a fixed order, whatever the
    /// probabilities, so the stream position only depends on the call count.
    pub fn draw(&self, h: usize, w: usize, rng: &mut impl Rng) -> AugmentDraw {
        let (u_scale, i_scale): (f64, usize) = (rng.gen(), rng.gen_range(0..self.scales.len().max(1)));
        let (u_h, u_v, u_r): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let k: u8 = rng.gen_range(0..4);
        let (cy, cx): (f64, f64) = (rng.gen(), rng.gen());
        let scale = if u_scale < self.scale_prob { self.scales[i_scale] } else { 1.0 };
        let (sh, sw) = scaled(h, w, scale);
        let pick = |u: f64, n: usize| {
            if n > self.size {
                ((u * (n - self.size + 1) as f64) as usize).min(n - self.size)
            } else {
                0
            }
        };
        AugmentDraw {
            scale,
            crop: (pick(cy, sh), pick(cx, sw)),
            orientation: Orientation {
                hflip: u_h < self.hflip,
                vflip: u_v < self.vflip,
                rot90: if u_r < self.rot90 { k } else { 0 },
            },
        }
    }

    pub fn apply(&self, image: &Tensor<f32>, mask: &Mask, rng: &mut impl Rng) -> Result<(Tensor<f32>, Mask)> {
        let (_, h, w) = spatial(image);
        let d = self.draw(h, w, rng);
        self.apply_draw(image, mask, &d)
    }

    pub fn apply_draw(&self, image: &Tensor<f32>, mask: &Mask, d: &AugmentDraw) -> Result<(Tensor<f32>, Mask)> {
        let (c, h, w) = spatial(image);
        if (mask.h, mask.w) != (h, w) {
            return Err(shape_err(format!("mask {}x{} vs image {h}x{w}", mask.h, mask.w)));
        }
        let (img, m) = if d.scale == 1.0 {
            (image.clone(), mask.clone())
        } else {
            let (sh, sw) = scaled(h, w, d.scale);
            (bilinear_resize_tensor(image, sh, sw)?, resize_nearest(mask, sh, sw))
        };
        let (img, m) = crop_or_pad(&img, c, &m, self.size, d.crop)?;
        Ok((d.orientation.apply_tensor(&img)?, d.orientation.apply_mask(&m)))
    }
}

fn scaled(h: usize, w: usize, s: f64) -> (usize, usize) {
    (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1))
}

/// Nearest-neighbor resampling on pixel centers.
pub fn resize_nearest(m: &Mask, oh: usize, ow: usize) -> Mask {
    let src = |d: usize, n: usize, o: usize| (((d as f64 + 0.5) * n as f64 / o as f64) as usize).min(n - 1);
    let data = remap_planes(&m.data, 1, (m.h, m.w), (oh, ow), |y, x| (src(y, m.h, oh), src(x, m.w, ow)));
    Mask { h: oh, w: ow, data }
}

/// `size × size` window at `crop`; parts past the source are filled by
/// reflection in the image and `IGNORE_LABEL` in the mask.
fn crop_or_pad(
    img: &Tensor<f32>,
    c: usize,
    m: &Mask,
    size: usize,
    crop: (usize, usize),
) -> Result<(Tensor<f32>, Mask)> {
    let (h, w) = (m.h, m.w);
    if (h, w) == (size, size) {
        return Ok((img.clone(), m.clone()));
    }
    let src = |y: usize, x: usize| (reflect(crop.0 + y, h), reflect(crop.1 + x, w));
    let data = remap_planes(img.data(), c, (h, w), (size, size), src);
    let mut labels = remap_planes(&m.data, 1, (h, w), (size, size), src);
    for y in 0..size {
        for x in 0..size {
            if crop.0 + y >= h || crop.1 + x >= w {
                labels[y * size + x] = IGNORE_LABEL;
            }
        }
    }
    Ok((Tensor::new(&[c, size, size], data)?, Mask::new(size, size, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize) -> (Tensor<f32>, Mask) {
        let img = Tensor::from_fn(&[3, n, n], |i| (i % 97) as f32 / 97.0);
        let m = Mask::new(n, n, (0..n * n).map(|i| ((i * 7) % 6) as u8).collect()).unwrap();
        (img, m)
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let (img, m) = sample(8);
        let a = Augmenter { scale_prob: 0.0, ..Augmenter::identity(8) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(a.apply(&img, &m, &mut rng).unwrap(), (img.clone(), m.clone()));
        }
    }

    #[test]
    fn nearest_resize_halves_and_doubles() {
        let m = Mask::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let up = resize_nearest(&m, 4, 4);
        assert_eq!(up.data, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        assert_eq!(resize_nearest(&up, 2, 2), m);
    }

    #[test]
    fn downscaling_pads_with_ignored_labels() {
        let (img, m) = sample(8);
        let a = Augmenter { scales: vec![0.5], scale_prob: 1.0, ..Augmenter::identity(8) };
        let (i2, m2) = a.apply(&img, &m, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(i2.shape(), &[3, 8, 8]);
        assert_eq!(m2.data.iter().filter(|&&v| v == IGNORE_LABEL).count(), 64 - 16);
    }

    #[test]
    fn upscaling_crops_inside_the_scaled_image() {
        let (img, m) = sample(8);
        let a = Augmenter { scales: vec![1.5], scale_prob: 1.0, ..Augmenter::identity(8) };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let d = a.draw(8, 8, &mut rng);
            assert!(d.crop.0 <= 4 && d.crop.1 <= 4);
            let (_, m2) = a.apply_draw(&img, &m, &d).unwrap();
            assert!(m2.data.iter().all(|&v| v < 6));
        }
    }
}
