//! Fixed-grid tiling with reflect padding, and probability stitching.

use bafnet_tensor::Tensor;

use crate::data::{remap_planes, spatial, Mask};
use crate::error::{data_err, shape_err, Result};
use crate::loss::IGNORE_LABEL;

#[derive(Clone, Debug, PartialEq)]
pub struct TileSample {
    /// `(C, size, size)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Pixels outside the source (padding) are `IGNORE_LABEL`.
    pub mask: Mask,
    pub source: String,
    /// Top-left corner `(y, x)` in the source.
    pub offset: (usize, usize),
    /// Rows and columns of the tile that lie inside the source.
    pub valid: (usize, usize),
}

/// Tile origins along one axis: multiples of `stride` until a tile reaches
/// the end. Origins never lie past the end, so with `stride == size` the
/// tiles partition the axis.
pub fn grid(len: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if len == 0 || size == 0 || stride == 0 || stride > size {
        return Err(shape_err(format!("cannot tile length {len} with size {size}, stride {stride}")));
    }
    let mut out = vec![0];
    while out.last().unwrap() + size < len {
        out.push(out.last().unwrap() + stride);
    }
    Ok(out)
}

/// Mirror index without repeating the edge pixel, periodic for long pads.
pub fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

pub fn tile(
    image: &Tensor<f32>,
    mask: Option<&Mask>,
    size: usize,
    stride: usize,
    source: &str,
) -> Result<Vec<TileSample>> {
    let (c, h, w) = spatial(image);
    if image.numel() == 0 {
        return Err(data_err(format!("{source}: empty image")));
    }
    if let Some(m) = mask {
        if (m.h, m.w) != (h, w) {
            return Err(shape_err(format!("{source}: mask {}x{} vs image {h}x{w}", m.h, m.w)));
        }
    }
    let mut out = Vec::new();
    for &y0 in &grid(h, size, stride)? {
        for &x0 in &grid(w, size, stride)? {
            let src = |y: usize, x: usize| (reflect(y0 + y, h), reflect(x0 + x, w));
            let data = remap_planes(image.data(), c, (h, w), (size, size), src);
            let valid = ((h - y0).min(size), (w - x0).min(size));
            let labels = match mask {
                Some(m) => remap_planes(&m.data, 1, (h, w), (size, size), src),
                None => vec![IGNORE_LABEL; size * size],
            };
            let mut labels = Mask::new(size, size, labels)?;
            for y in 0..size {
                for x in 0..size {
                    if y >= valid.0 || x >= valid.1 {
                        labels.data[y * size + x] = IGNORE_LABEL;
                    }
                }
            }
            out.push(TileSample {
                image: Tensor::new(&[c, size, size], data)?,
                mask: labels,
                source: source.to_string(),
                offset: (y0, x0),
                valid,
            });
        }
    }
    Ok(out)
}

/// Accumulates per-tile class probabilities; overlaps are averaged.
#[derive(Clone, Debug)]
pub struct Stitcher {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    sum: Vec<f32>,
    count: Vec<u32>,
}

impl Stitcher {
    pub fn new(classes: usize, h: usize, w: usize) -> Self {
        Stitcher { classes, h, w, sum: vec![0.0; classes * h * w], count: vec![0; h * w] }
    }

    /// Adds the valid region of a `(C, S, S)` probability tile.
    pub fn add(&mut self, probs: &Tensor<f32>, offset: (usize, usize), valid: (usize, usize)) -> Result<()> {
        let (c, th, tw) = spatial(probs);
        if c != self.classes
            || offset.0 + valid.0 > self.h
            || offset.1 + valid.1 > self.w
            || valid.0 > th
            || valid.1 > tw
        {
            return Err(shape_err(format!(
                "tile {:?} at {offset:?} (valid {valid:?}) does not fit {}x{}x{}",
                probs.shape(),
                self.classes,
                self.h,
                self.w
            )));
        }
        let (h, w) = (self.h, self.w);
        let d = probs.data();
        for k in 0..c {
            for y in 0..valid.0 {
                let src = &d[(k * th + y) * tw..(k * th + y) * tw + valid.1];
                let row = (k * h + offset.0 + y) * w + offset.1;
                for (s, &p) in self.sum[row..row + valid.1].iter_mut().zip(src) {
                    *s += p;
                }
            }
        }
        for y in 0..valid.0 {
            let row = (offset.0 + y) * w + offset.1;
            for n in &mut self.count[row..row + valid.1] {
                *n += 1;
            }
        }
        Ok(())
    }

    /// How many tiles covered each pixel.
    pub fn coverage(&self) -> &[u32] {
        &self.count
    }

    /// Averaged probabilities `(C, H, W)`; fails if a pixel was never covered.
    pub fn probabilities(&self) -> Result<Tensor<f32>> {
        if let Some(i) = self.count.iter().position(|&n| n == 0) {
            return Err(data_err(format!("pixel ({}, {}) not covered by any tile", i % self.w, i / self.w)));
        }
        let plane = self.h * self.w;
        let data = self
            .sum
            .iter()
            .enumerate()
            .map(|(i, &s)| if self.count[i % plane] == 1 { s } else { s / self.count[i % plane] as f32 })
            .collect();
        Ok(Tensor::new(&[self.classes, self.h, self.w], data)?)
    }

    pub fn argmax(&self) -> Result<Mask> {
        argmax(&self.probabilities()?)
    }
}

/// Per-pixel class with the highest score in a `(C, H, W)` map; ties go to
/// the lower index.
pub fn argmax(probs: &Tensor<f32>) -> Result<Mask> {
    let (c, h, w) = spatial(probs);
    let plane = h * w;
    let d = probs.data();
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(h, w, data)
}
