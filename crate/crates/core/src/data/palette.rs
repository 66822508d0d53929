//! Class index <-> RGB color codec for label images.

use std::collections::HashMap;

use image::{Rgb, RgbImage};

use crate::data::Mask;
use crate::error::{config_err, data_err, Result};
use crate::loss::IGNORE_LABEL;

/// Color used for `IGNORE_LABEL` pixels (unlabeled / no-data).
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPalette {
    pub names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
    lookup: HashMap<[u8; 3], u8>,
}

impl ClassPalette {
    pub fn new(names: &[&str], colors: &[[u8; 3]]) -> Result<Self> {
        if names.len() != colors.len() || names.is_empty() || names.len() >= IGNORE_LABEL as usize {
            return Err(config_err(format!("{} names for {} colors", names.len(), colors.len())));
        }
        let mut lookup = HashMap::new();
        for (k, c) in colors.iter().enumerate() {
            if *c == IGNORE_COLOR || lookup.insert(*c, k as u8).is_some() {
                return Err(config_err(format!("color {c:?} is reserved or used twice")));
            }
        }
        Ok(ClassPalette { names: names.iter().map(|s| s.to_string()).collect(), colors: colors.to_vec(), lookup })
    }

    /// The six-class aerial legend; clutter comes last.
    pub fn isprs() -> Self {
        ClassPalette::new(
            &["impervious_surface", "building", "low_vegetation", "tree", "car", "clutter"],
            &[[255, 255, 255], [0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]],
        )
        .expect("valid built-in palette")
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn name_refs(&self) -> Vec<&str> {
        self.names.iter().map(String::as_str).collect()
    }

    pub fn encode(&self, m: &Mask) -> Result<RgbImage> {
        let mut img = RgbImage::new(m.w as u32, m.h as u32);
        for (i, (&v, px)) in m.data.iter().zip(img.pixels_mut()).enumerate() {
            *px = Rgb(if v == IGNORE_LABEL {
                IGNORE_COLOR
            } else {
                *self
                    .colors
                    .get(v as usize)
                    .ok_or_else(|| data_err(format!("class {v} at ({}, {}) has no color", i % m.w, i / m.w)))?
            });
        }
        Ok(img)
    }

    /// Fails on colors outside the palette, naming up to five of the
    /// offending `(x, y)` locations.
    pub fn decode(&self, img: &RgbImage) -> Result<Mask> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Vec::with_capacity(w * h);
        let mut bad = Vec::new();
        let mut bad_count = 0;
        for (x, y, px) in img.enumerate_pixels() {
            match (px.0 == IGNORE_COLOR, self.lookup.get(&px.0)) {
                (true, _) => data.push(IGNORE_LABEL),
                (false, Some(&k)) => data.push(k),
                (false, None) => {
                    bad_count += 1;
                    if bad.len() < 5 {
                        bad.push(format!("{:?} at ({x}, {y})", px.0));
                    }
                    data.push(IGNORE_LABEL);
                }
            }
        }
        if bad_count > 0 {
            return Err(data_err(format!(
                "{bad_count} pixels with unknown colors: {}{}",
                bad.join(", "),
                if bad_count > bad.len() { ", ..." } else { "" }
            )));
        }
        Mask::new(h, w, data)
    }
}
