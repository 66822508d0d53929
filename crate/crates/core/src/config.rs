//! Model and training configuration with a flat `key = value` text form.

use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    VanB0,
    Resnet18Stub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Sum,
    Fam,
}

/// The six ablation rows: dependency path only (two backbones), remote-local
/// path with one or both branches fused by summation, and the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    CpResnet18,
    CpVanB0,
    CpLa,
    CpRa,
    CpRaLa,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] =
        [Ablation::CpResnet18, Ablation::CpVanB0, Ablation::CpLa, Ablation::CpRa, Ablation::CpRaLa, Ablation::Full];

    pub fn key(self) -> &'static str {
        match self {
            Ablation::CpResnet18 => "cp_resnet18",
            Ablation::CpVanB0 => "cp_van_b0",
            Ablation::CpLa => "cp_la",
            Ablation::CpRa => "cp_ra",
            Ablation::CpRaLa => "cp_ra_la",
            Ablation::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::CpResnet18 => "Cp (ResNet18)",
            Ablation::CpVanB0 => "Cp (VAN-B0)",
            Ablation::CpLa => "Cp+LA (sum)",
            Ablation::CpRa => "Cp+RA (sum)",
            Ablation::CpRaLa => "Cp+RA+LA (sum)",
            Ablation::Full => "Cp+RA+LA+FAM",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL.into_iter().find(|a| a.key() == s).ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub backbone: Backbone,
    pub use_rl_local: bool,
    pub use_rl_remote: bool,
    pub fusion: Fusion,
    pub dep_channels: [usize; 4],
    pub dep_depths: [usize; 4],
    pub dep_mlp_ratios: [usize; 4],
    /// Initial value of the per-channel residual scales in VAN blocks; 0 disables them.
    pub layer_scale_init: f64,
    pub rl_channels: usize,
    pub rl_depths: [usize; 3],
    pub window_size: usize,
    pub num_heads: usize,
    pub rl_mlp_ratio: usize,
    /// Zero the final norm scale of every exchange adapter so exchanges start as identities.
    pub exchange_zero_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 6,
            in_channels: 3,
            backbone: Backbone::VanB0,
            use_rl_local: true,
            use_rl_remote: true,
            fusion: Fusion::Fam,
            dep_channels: [32, 64, 160, 256],
            dep_depths: [3, 3, 5, 2],
            dep_mlp_ratios: [8, 8, 4, 4],
            layer_scale_init: 1e-2,
            rl_channels: 128,
            rl_depths: [2, 1, 1],
            window_size: 8,
            num_heads: 4,
            rl_mlp_ratio: 4,
            exchange_zero_init: false,
        }
    }
}

impl ModelConfig {
    pub fn ablation(a: Ablation) -> Self {
        let mut c = ModelConfig::default();
        c.apply_ablation(a);
        c
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        let (backbone, local, remote, fusion) = match a {
            Ablation::CpResnet18 => (Backbone::Resnet18Stub, false, false, Fusion::Sum),
            Ablation::CpVanB0 => (Backbone::VanB0, false, false, Fusion::Sum),
            Ablation::CpLa => (Backbone::VanB0, true, false, Fusion::Sum),
            Ablation::CpRa => (Backbone::VanB0, false, true, Fusion::Sum),
            Ablation::CpRaLa => (Backbone::VanB0, true, true, Fusion::Sum),
            Ablation::Full => (Backbone::VanB0, true, true, Fusion::Fam),
        };
        self.backbone = backbone;
        self.use_rl_local = local;
        self.use_rl_remote = remote;
        self.fusion = fusion;
    }

    /// The ablation row these flags correspond to, if any.
    pub fn ablation_kind(&self) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|&a| {
            let c = ModelConfig::ablation(a);
            c.backbone == self.backbone
                && c.use_rl_local == self.use_rl_local
                && c.use_rl_remote == self.use_rl_remote
                && (!self.has_rl_path() || c.fusion == self.fusion)
        })
    }

    pub fn has_rl_path(&self) -> bool {
        self.use_rl_local || self.use_rl_remote
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        if self.has_rl_path() {
            lcm(32, 8 * self.window_size)
        } else {
            32
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(config_err(m));
        if self.num_classes < 2 {
            return err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.rl_channels == 0 || self.window_size == 0 {
            return err("channel counts and window size must be positive".into());
        }
        if self.dep_channels.contains(&0) || self.dep_depths.contains(&0) || self.dep_mlp_ratios.contains(&0) {
            return err("dependency path widths, depths and ratios must be positive".into());
        }
        if self.num_heads == 0 || !self.rl_channels.is_multiple_of(self.num_heads) {
            return err(format!("num_heads {} must divide rl_channels {}", self.num_heads, self.rl_channels));
        }
        if self.rl_depths.contains(&0) {
            return err("remote-local stage depths must be positive".into());
        }
        if !self.layer_scale_init.is_finite() || self.layer_scale_init < 0.0 {
            return err("layer_scale_init must be finite and >= 0".into());
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    /// Binary cross-entropy summed over classes.
    Literal,
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricClasses {
    /// Every class except the last (clutter).
    Foreground,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: Option<u64>,
    pub loss_form: LossForm,
    pub loss_include_clutter: bool,
    pub metric_classes: MetricClasses,
    pub val_fraction: f64,
    pub aug_scales: Vec<f64>,
    pub aug_scale_prob: f64,
    pub aug_hflip: f64,
    pub aug_vflip: f64,
    pub aug_rot90: f64,
    pub tta: bool,
    pub tta_scales: Vec<f64>,
    pub tta_flips: bool,
    pub tile_size: usize,
    pub tile_stride: usize,
    pub double_precision: bool,
    pub synth_count: usize,
    pub synth_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 60,
            batch_size: 4,
            crop_size: 256,
            seed: None,
            loss_form: LossForm::Literal,
            loss_include_clutter: true,
            metric_classes: MetricClasses::Foreground,
            val_fraction: 0.1,
            aug_scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            aug_scale_prob: 1.0,
            aug_hflip: 0.5,
            aug_vflip: 0.5,
            aug_rot90: 1.0,
            tta: false,
            tta_scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            tta_flips: true,
            tile_size: 256,
            tile_stride: 256,
            double_precision: false,
            synth_count: 200,
            synth_size: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every recognised key with a one-line description, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("ablation", "preset: cp_resnet18 | cp_van_b0 | cp_la | cp_ra | cp_ra_la | full"),
    ("num_classes", "number of output classes (last one is clutter)"),
    ("in_channels", "input image channels"),
    ("backbone", "van_b0 | resnet18_stub"),
    ("use_rl_local", "multi-scale local branch in the remote-local path"),
    ("use_rl_remote", "windowed attention branch in the remote-local path"),
    ("fusion", "sum | fam"),
    ("dep_channels", "dependency path stage widths"),
    ("dep_depths", "dependency path blocks per stage"),
    ("dep_mlp_ratios", "dependency path MLP expansion per stage"),
    ("layer_scale_init", "initial residual scale in VAN blocks (0 disables)"),
    ("rl_channels", "remote-local path width"),
    ("rl_depths", "remote-local blocks in stages A, B, C"),
    ("window_size", "attention window side"),
    ("num_heads", "attention heads"),
    ("rl_mlp_ratio", "MLP expansion in the windowed attention block"),
    ("exchange_zero_init", "start path exchanges as identities"),
    ("lr", "initial learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("adam_eps", "AdamW epsilon"),
    ("epochs", "training epochs"),
    ("batch_size", "tiles per optimizer step"),
    ("crop_size", "training crop side"),
    ("seed", "RNG seed"),
    ("loss_form", "literal | categorical cross-entropy"),
    ("loss_include_clutter", "clutter pixels contribute to the loss"),
    ("metric_classes", "foreground | all classes in mean metrics"),
    ("val_fraction", "share of scenes held out for validation"),
    ("aug_scales", "random scale set"),
    ("aug_scale_prob", "probability of random scaling"),
    ("aug_hflip", "horizontal flip probability"),
    ("aug_vflip", "vertical flip probability"),
    ("aug_rot90", "probability of a random multiple-of-90 rotation"),
    ("tta", "test-time augmentation during evaluation"),
    ("tta_scales", "test-time scales"),
    ("tta_flips", "add horizontal and vertical flips at test time"),
    ("tile_size", "inference tile side"),
    ("tile_stride", "inference tile stride"),
    ("double_precision", "train in f64"),
    ("synth_count", "synthetic scenes to generate"),
    ("synth_size", "synthetic scene side"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| config_err(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let xs: Vec<usize> = parse_list(key, v)?;
    xs.try_into().map_err(|xs: Vec<usize>| config_err(format!("{key}: expected {N} values, got {}", xs.len())))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        let v = v.trim();
        match key {
            "ablation" => m.apply_ablation(v.parse().map_err(config_err)?),
            "num_classes" => m.num_classes = parse(key, v)?,
            "in_channels" => m.in_channels = parse(key, v)?,
            "backbone" => {
                m.backbone = match v {
                    "van_b0" => Backbone::VanB0,
                    "resnet18_stub" => Backbone::Resnet18Stub,
                    _ => return Err(config_err(format!("backbone: unknown {v:?}"))),
                }
            }
            "use_rl_local" => m.use_rl_local = parse(key, v)?,
            "use_rl_remote" => m.use_rl_remote = parse(key, v)?,
            "fusion" => {
                m.fusion = match v {
                    "sum" => Fusion::Sum,
                    "fam" => Fusion::Fam,
                    _ => return Err(config_err(format!("fusion: unknown {v:?}"))),
                }
            }
            "dep_channels" => m.dep_channels = parse_array(key, v)?,
            "dep_depths" => m.dep_depths = parse_array(key, v)?,
            "dep_mlp_ratios" => m.dep_mlp_ratios = parse_array(key, v)?,
            "layer_scale_init" => m.layer_scale_init = parse(key, v)?,
            "rl_channels" => m.rl_channels = parse(key, v)?,
            "rl_depths" => m.rl_depths = parse_array(key, v)?,
            "window_size" => m.window_size = parse(key, v)?,
            "num_heads" => m.num_heads = parse(key, v)?,
            "rl_mlp_ratio" => m.rl_mlp_ratio = parse(key, v)?,
            "exchange_zero_init" => m.exchange_zero_init = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "crop_size" => t.crop_size = parse(key, v)?,
            "seed" => t.seed = if v.is_empty() || v == "none" { None } else { Some(parse(key, v)?) },
            "loss_form" => {
                t.loss_form = match v {
                    "literal" => LossForm::Literal,
                    "categorical" => LossForm::Categorical,
                    _ => return Err(config_err(format!("loss_form: unknown {v:?}"))),
                }
            }
            "loss_include_clutter" => t.loss_include_clutter = parse(key, v)?,
            "metric_classes" => {
                t.metric_classes = match v {
                    "foreground" => MetricClasses::Foreground,
                    "all" => MetricClasses::All,
                    _ => return Err(config_err(format!("metric_classes: unknown {v:?}"))),
                }
            }
            "val_fraction" => t.val_fraction = parse(key, v)?,
            "aug_scales" => t.aug_scales = parse_list(key, v)?,
            "aug_scale_prob" => t.aug_scale_prob = parse(key, v)?,
            "aug_hflip" => t.aug_hflip = parse(key, v)?,
            "aug_vflip" => t.aug_vflip = parse(key, v)?,
            "aug_rot90" => t.aug_rot90 = parse(key, v)?,
            "tta" => t.tta = parse(key, v)?,
            "tta_scales" => t.tta_scales = parse_list(key, v)?,
            "tta_flips" => t.tta_flips = parse(key, v)?,
            "tile_size" => t.tile_size = parse(key, v)?,
            "tile_stride" => t.tile_stride = parse(key, v)?,
            "double_precision" => t.double_precision = parse(key, v)?,
            "synth_count" => t.synth_count = parse(key, v)?,
            "synth_size" => t.synth_size = parse(key, v)?,
            _ => return Err(config_err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical `(key, value)` pairs; `ablation` is implied by the flags and omitted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t) = (&self.model, &self.train);
        vec![
            ("num_classes", m.num_classes.to_string()),
            ("in_channels", m.in_channels.to_string()),
            (
                "backbone",
                match m.backbone {
                    Backbone::VanB0 => "van_b0",
                    Backbone::Resnet18Stub => "resnet18_stub",
                }
                .into(),
            ),
            ("use_rl_local", m.use_rl_local.to_string()),
            ("use_rl_remote", m.use_rl_remote.to_string()),
            (
                "fusion",
                match m.fusion {
                    Fusion::Sum => "sum",
                    Fusion::Fam => "fam",
                }
                .into(),
            ),
            ("dep_channels", join(&m.dep_channels)),
            ("dep_depths", join(&m.dep_depths)),
            ("dep_mlp_ratios", join(&m.dep_mlp_ratios)),
            ("layer_scale_init", m.layer_scale_init.to_string()),
            ("rl_channels", m.rl_channels.to_string()),
            ("rl_depths", join(&m.rl_depths)),
            ("window_size", m.window_size.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("rl_mlp_ratio", m.rl_mlp_ratio.to_string()),
            ("exchange_zero_init", m.exchange_zero_init.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("crop_size", t.crop_size.to_string()),
            ("seed", t.seed.map_or_else(|| "none".into(), |s| s.to_string())),
            (
                "loss_form",
                match t.loss_form {
                    LossForm::Literal => "literal",
                    LossForm::Categorical => "categorical",
                }
                .into(),
            ),
            ("loss_include_clutter", t.loss_include_clutter.to_string()),
            (
                "metric_classes",
                match t.metric_classes {
                    MetricClasses::Foreground => "foreground",
                    MetricClasses::All => "all",
                }
                .into(),
            ),
            ("val_fraction", t.val_fraction.to_string()),
            ("aug_scales", join(&t.aug_scales)),
            ("aug_scale_prob", t.aug_scale_prob.to_string()),
            ("aug_hflip", t.aug_hflip.to_string()),
            ("aug_vflip", t.aug_vflip.to_string()),
            ("aug_rot90", t.aug_rot90.to_string()),
            ("tta", t.tta.to_string()),
            ("tta_scales", join(&t.tta_scales)),
            ("tta_flips", t.tta_flips.to_string()),
            ("tile_size", t.tile_size.to_string()),
            ("tile_stride", t.tile_stride.to_string()),
            ("double_precision", t.double_precision.to_string()),
            ("synth_count", t.synth_count.to_string()),
            ("synth_size", t.synth_size.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| config_err(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Hash of the model-defining keys, used to match checkpoints to configs.
    pub fn model_hash(&self) -> String {
        let model_keys: Vec<&str> = KEYS.iter().take_while(|(k, _)| *k != "lr").map(|(k, _)| *k).collect();
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| model_keys.contains(k))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        sha256_hex(text.as_bytes())
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let err = |m: &str| Err(config_err(m.to_string()));
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return err("lr must be positive");
        }
        if t.weight_decay < 0.0 {
            return err("weight_decay must be >= 0");
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return err("epochs and batch_size must be positive");
        }
        if t.crop_size == 0 || !t.crop_size.is_multiple_of(self.model.size_multiple()) {
            return err("crop_size must be a positive multiple of the model's size multiple");
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return err("val_fraction must lie in [0, 1)");
        }
        if t.aug_scales.is_empty() || t.aug_scales.iter().any(|&s| !(s > 0.0)) {
            return err("aug_scales must be non-empty and positive");
        }
        if t.tta_scales.is_empty() || t.tta_scales.iter().any(|&s| !(s > 0.0)) {
            return err("tta_scales must be non-empty and positive");
        }
        for p in [t.aug_scale_prob, t.aug_hflip, t.aug_vflip, t.aug_rot90] {
            if !(0.0..=1.0).contains(&p) {
                return err("augmentation probabilities must lie in [0, 1]");
            }
        }
        if t.tile_size == 0 || t.tile_stride == 0 || t.tile_stride > t.tile_size {
            return err("need 0 < tile_stride <= tile_size");
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
