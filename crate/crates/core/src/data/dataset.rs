//! Scene collections, PNG IO and the seeded train/validation split.
//!
//! On disk a split is `{root}/{split}/images/*.png` (8-bit RGB) and
//! `{root}/{split}/labels/*.png` (palette colors), listed pairwise in
//! `{root}/{split}/manifest.txt`. Without a manifest, images are paired with
//! the label of the same file name.

use std::fs;
use std::path::{Path, PathBuf};

use bafnet_tensor::Tensor;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::palette::ClassPalette;
use crate::data::{spatial, synth, Mask};
use crate::error::{data_err, shape_err, BafnetError, Result};
use crate::loss::IGNORE_LABEL;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Scene {
    pub fn new(name: impl Into<String>, image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let name = name.into();
        let (_, h, w) = spatial(&image);
        if image.ndim() != 3 || (mask.h, mask.w) != (h, w) {
            return Err(shape_err(format!("{name}: image {:?} vs mask {}x{}", image.shape(), mask.h, mask.w)));
        }
        Ok(Scene { name, image, mask })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub palette: ClassPalette,
}

impl Dataset {
    pub fn new(scenes: Vec<Scene>, palette: ClassPalette) -> Result<Self> {
        let d = Dataset { scenes, palette };
        d.validate()?;
        Ok(d)
    }

    pub fn synthetic(seed: u64, count: usize, size: usize) -> Result<Self> {
        Dataset::new(synth::generate(seed, count, size)?, ClassPalette::isprs())
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes();
        for s in &self.scenes {
            if let Some(&v) = s.mask.data.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= n) {
                return Err(data_err(format!("{}: label {v} for {n} classes", s.name)));
            }
        }
        Ok(())
    }

    /// Pixel counts per class over all scenes.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for s in &self.scenes {
            for (a, b) in h.iter_mut().zip(s.mask.histogram(self.num_classes())) {
                *a += b;
            }
        }
        h
    }

    /// Seeded shuffle, then the first `round(n·fraction)` scenes (at least
    /// one when `n > 1` and `fraction > 0`) go to validation.
    pub fn split(self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(data_err(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut k = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 && n > 1 {
            k = k.clamp(1, n - 1);
        }
        let mut slots: Vec<Option<Scene>> = self.scenes.into_iter().map(Some).collect();
        let mut take = |idx: &[usize]| -> Vec<Scene> {
            let mut v: Vec<usize> = idx.to_vec();
            v.sort_unstable();
            v.into_iter().map(|i| slots[i].take().expect("each index once")).collect()
        };
        let val = take(&order[..k]);
        let train = take(&order[k..]);
        Ok((Dataset { scenes: train, palette: self.palette.clone() }, Dataset { scenes: val, palette: self.palette }))
    }

    pub fn load(root: &Path, split: &str, palette: ClassPalette) -> Result<Self> {
        let dir = root.join(split);
        let pairs = read_manifest(&dir)?;
        if pairs.is_empty() {
            return Err(data_err(format!("{}: no scenes", dir.display())));
        }
        let scenes = pairs
            .into_iter()
            .map(|(img, lbl)| {
                let name = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Scene::new(name, read_image(&img)?, read_label(&lbl, &palette)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(scenes, palette)
    }

    /// Writes images, labels and the manifest under `{root}/{split}`.
    pub fn save(&self, root: &Path, split: &str) -> Result<()> {
        let dir = root.join(split);
        for sub in ["images", "labels"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| BafnetError::io(&d, e))?;
        }
        let mut manifest = String::new();
        for s in &self.scenes {
            let (i, l) = (format!("images/{}.png", s.name), format!("labels/{}.png", s.name));
            write_image(&dir.join(&i), &s.image)?;
            write_label(&dir.join(&l), &s.mask, &self.palette)?;
            manifest.push_str(&format!("{i} {l}\n"));
        }
        let m = dir.join(MANIFEST);
        fs::write(&m, manifest).map_err(|e| BafnetError::io(&m, e))
    }
}

/// Image/label path pairs of a split directory.
pub fn read_manifest(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let m = dir.join(MANIFEST);
    if m.exists() {
        let text = fs::read_to_string(&m).map_err(|e| BafnetError::io(&m, e))?;
        return text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| match l.split_whitespace().collect::<Vec<_>>()[..] {
                [a, b] => Ok((dir.join(a), dir.join(b))),
                _ => Err(data_err(format!("{}: bad manifest line {l:?}", m.display()))),
            })
            .collect();
    }
    Ok(list_pngs(&dir.join("images"))?
        .into_iter()
        .map(|p| {
            let l = dir.join("labels").join(p.file_name().expect("listed file"));
            (p, l)
        })
        .collect())
}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| BafnetError::io(dir, e))? {
        let p = e.map_err(|e| BafnetError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => BafnetError::io(path, source),
        e => BafnetError::Image { path: path.to_path_buf(), detail: e.to_string() },
    })?;
    Ok(img.to_rgb8())
}

fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| BafnetError::io(d, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => BafnetError::io(path, source),
        e => BafnetError::Image { path: path.to_path_buf(), detail: e.to_string() },
    })
}

/// 8-bit RGB as a `(3, H, W)` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&open_rgb(path)?))
}

pub fn write_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    save_rgb(path, &tensor_to_rgb(t)?)
}

pub fn read_label(path: &Path, palette: &ClassPalette) -> Result<Mask> {
    palette.decode(&open_rgb(path)?).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

pub fn write_label(path: &Path, m: &Mask, palette: &ClassPalette) -> Result<()> {
    save_rgb(path, &palette.encode(m)?)
}

/// Single-channel `(H, W)` or `(1, H, W)` values in `[0, 1]` as gray PNG.
pub fn write_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = spatial(t);
    let px: Vec<u8> = t.data()[..h * w].iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches size");
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| BafnetError::io(d, e))?;
    }
    img.save(path).map_err(|e| BafnetError::Image { path: path.to_path_buf(), detail: e.to_string() })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Rounds to the nearest 8-bit level; values are clamped to `[0, 1]`.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = spatial(t);
    if c != 3 {
        return Err(shape_err(format!("RGB output needs 3 channels, got {:?}", t.shape())));
    }
    let d = t.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (p, px) in img.pixels_mut().enumerate() {
        *px = Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])]);
    }
    Ok(img)
}
