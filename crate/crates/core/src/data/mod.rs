//! Scenes, label codecs, tiling, augmentation, test-time augmentation and
//! the synthetic scene generator.

pub mod augment;
pub mod dataset;
pub mod palette;
pub mod synth;
pub mod tile;
pub mod tta;

use bafnet_tensor::{Real, Tensor};

use crate::error::{shape_err, Result};

pub use augment::Augmenter;
pub use dataset::{Dataset, Scene};
pub use palette::ClassPalette;
pub use tile::{Stitcher, TileSample};
pub use tta::{ModelPredictor, Predictor, TtaConfig};

/// Row-major class-index map; `IGNORE_LABEL` marks unscored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err(format!("{} labels for a {h}x{w} mask", data.len())));
        }
        Ok(Mask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        Mask { h, w, data: vec![v; h * w] }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Pixel count per class index `0..n`; other values are not counted.
    pub fn histogram(&self, n: usize) -> Vec<usize> {
        let mut h = vec![0; n];
        for &v in &self.data {
            if (v as usize) < n {
                h[v as usize] += 1;
            }
        }
        h
    }
}

/// `(C, H, W)` or `(B, C, H, W)`: the last two axes are spatial.
pub(crate) fn spatial<T: Real>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (t.numel() / (h * w).max(1), h, w)
}

/// Applies a per-plane index map: output `(oh, ow)` pixel `(y, x)` reads
/// input pixel `src(y, x)` in every plane.
pub(crate) fn remap_planes<E: Copy>(
    data: &[E],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Vec<E> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

/// Mirror flips and quarter turns of the last two axes, shared by images,
/// probability maps and masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Orientation {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, applied after the flips.
    pub rot90: u8,
}

impl Orientation {
    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rot90.is_multiple_of(4)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rot90 % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    fn apply_raw<E: Copy>(&self, data: &[E], planes: usize, h: usize, w: usize) -> (Vec<E>, usize, usize) {
        let (hf, vf) = (self.hflip, self.vflip);
        let flip = |y: usize, x: usize| (if vf { h - 1 - y } else { y }, if hf { w - 1 - x } else { x });
        let k = self.rot90 % 4;
        let (oh, ow) = self.output_size(h, w);
        // Counter-clockwise by k: output (y, x) reads the flipped input at
        // the position that rotates onto it.
        let out = remap_planes(data, planes, (h, w), (oh, ow), |y, x| {
            let (fy, fx) = match k {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            flip(fy, fx)
        });
        (out, oh, ow)
    }

    /// The transform undoing this one.
    pub fn inverse(&self) -> InverseOrientation {
        InverseOrientation(*self)
    }

    pub fn apply_tensor<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        if self.is_identity() {
            return Ok(t.clone());
        }
        let (planes, h, w) = spatial(t);
        let (data, oh, ow) = self.apply_raw(t.data(), planes, h, w);
        let mut shape = t.shape().to_vec();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        Ok(Tensor::new(&shape, data)?)
    }

    pub fn apply_mask(&self, m: &Mask) -> Mask {
        let (data, h, w) = self.apply_raw(&m.data, 1, m.h, m.w);
        Mask { h, w, data }
    }
}

/// Undoes an [`Orientation`]: rotate back first, then flip.
#[derive(Clone, Copy, Debug)]
pub struct InverseOrientation(Orientation);

impl InverseOrientation {
    pub fn apply_tensor<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let o = self.0;
        let unrot = Orientation { rot90: (4 - o.rot90 % 4) % 4, ..Orientation::default() };
        let unflip = Orientation { hflip: o.hflip, vflip: o.vflip, rot90: 0 };
        unflip.apply_tensor(&unrot.apply_tensor(t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[2, h, w], |i| i as f32)
    }

    #[test]
    fn quarter_turn_moves_top_right_to_top_left() {
        let t = Tensor::<f32>::new(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = Orientation { rot90: 1, ..Default::default() }.apply_tensor(&t).unwrap();
        assert_eq!(r.shape(), &[1, 3, 2]);
        assert_eq!(r.data(), &[3., 6., 2., 5., 1., 4.]);
        let f = Orientation { hflip: true, ..Default::default() }.apply_tensor(&t).unwrap();
        assert_eq!(f.data(), &[3., 2., 1., 6., 5., 4.]);
    }

    #[test]
    fn every_orientation_is_undone_by_its_inverse() {
        let t = ramp(3, 5);
        for k in 0..4 {
            for (hf, vf) in [(false, false), (true, false), (false, true), (true, true)] {
                let o = Orientation { hflip: hf, vflip: vf, rot90: k };
                let there = o.apply_tensor(&t).unwrap();
                assert_eq!(o.inverse().apply_tensor(&there).unwrap(), t, "{o:?}");
            }
        }
    }

    #[test]
    fn four_quarter_turns_and_double_flips_are_identity() {
        let t = ramp(4, 4);
        let q = Orientation { rot90: 1, ..Default::default() };
        let mut r = t.clone();
        for _ in 0..4 {
            r = q.apply_tensor(&r).unwrap();
        }
        assert_eq!(r, t);
        let f = Orientation { hflip: true, vflip: true, rot90: 0 };
        assert_eq!(f.apply_tensor(&f.apply_tensor(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn masks_follow_the_same_map_as_images() {
        let m = Mask::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let t = Tensor::<f32>::from_fn(&[1, 2, 3], |i| i as f32);
        let o = Orientation { hflip: true, vflip: false, rot90: 3 };
        let mm = o.apply_mask(&m);
        let tt = o.apply_tensor(&t).unwrap();
        assert_eq!((mm.h, mm.w), (3, 2));
        assert!(mm.data.iter().zip(tt.data()).all(|(&a, &b)| a as f32 == b));
        assert_eq!(m.histogram(6), mm.histogram(6));
    }
}
