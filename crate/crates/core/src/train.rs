//! Seeded training loop, evaluation and checkpoints.
//!
//! Everything random (epoch order, augmentation) comes from one ChaCha
//! stream whose position is saved in checkpoints, so a resumed run
//! continues exactly where the interrupted one stopped.

use std::fs;
use std::path::Path;
use std::time::Instant;

use bafnet_tensor::{Archive, Graph, NormMode, Real, RunningStats, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, MetricClasses};
use crate::data::augment::Augmenter;
use crate::data::tile::argmax;
use crate::data::tta::predict_scene;
use crate::data::{Dataset, ModelPredictor, Predictor, TtaConfig};
use crate::error::{config_err, data_err, BafnetError, Result};
use crate::loss::{hybrid_loss, probabilities, LossReport, Targets};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::Bafnet;
use crate::optim::{cosine_lr, grad_norm, AdamW};
use crate::params::{Ctx, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "bafnet-checkpoint-1";

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossReport,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub grad_norm: f64,
    pub val_miou: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    fn to_line(&self) -> String {
        format!(
            "{} {:e} {:e} {:e} {:e} {:e} {} {:e}",
            self.epoch,
            self.loss.ce,
            self.loss.dice,
            self.loss.total,
            self.lr,
            self.grad_norm,
            self.val_miou.map_or("-".to_string(), |v| format!("{v:e}")),
            self.seconds
        )
    }

    fn from_line(l: &str) -> Result<Self> {
        let f: Vec<&str> = l.split_whitespace().collect();
        let bad = || BafnetError::Checkpoint(format!("bad history line {l:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            loss: LossReport { ce: num(1)?, dice: num(2)?, total: num(3)? },
            lr: num(4)?,
            grad_norm: num(5)?,
            val_miou: if f[6] == "-" { None } else { Some(num(6)?) },
            seconds: num(7)?,
        })
    }
}

pub struct Trainer<T: Real> {
    pub config: Config,
    pub model: Bafnet,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    last_grad_norm: f64,
}

impl<T: Real> Trainer<T> {
    /// Fresh model and optimizer; the config must carry a seed.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed.ok_or_else(|| config_err("training needs an explicit seed"))?;
        let (model, store) = Bafnet::build::<T>(&config.model, seed)?;
        let opt = AdamW::from_config(&store, &config.train);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Data randomness on its own stream, apart from initialization.
        rng.set_stream(1);
        Ok(Trainer { config, model, store, opt, rng, epoch: 0, history: Vec::new(), last_grad_norm: 0.0 })
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        train_len.div_ceil(self.config.train.batch_size) as u64
    }

    fn check_dataset(&self, d: &Dataset) -> Result<()> {
        if d.num_classes() != self.config.model.num_classes {
            return Err(data_err(format!(
                "dataset has {} classes, model {}",
                d.num_classes(),
                self.config.model.num_classes
            )));
        }
        Ok(())
    }

    /// Forward, loss, backward and update for one batch of scene indices.
    fn step(&mut self, train: &Dataset, idx: &[usize], aug: &Augmenter, lr: f64) -> Result<LossReport> {
        let s = aug.size;
        let c = self.config.model.in_channels;
        let k = self.config.model.num_classes;
        let mut images = Vec::with_capacity(idx.len() * c * s * s);
        let mut labels = Vec::with_capacity(idx.len() * s * s);
        for &i in idx {
            let sc = &train.scenes[i];
            let (img, m) = aug.apply(&sc.image, &sc.mask, &mut self.rng)?;
            images.extend(img.data().iter().map(|&v| T::from_f64c(v as f64)));
            labels.extend_from_slice(&m.data);
        }
        let b = idx.len();
        let exclude = (!self.config.train.loss_include_clutter).then_some(k - 1);
        let targets = Targets::<T>::from_labels(&labels, [b, s, s], k, exclude)?;
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.store, NormMode::Train);
        let x = ctx.input(Tensor::new(&[b, c, s, s], images)?);
        let logits = self.model.forward(&ctx, &x)?;
        let (loss, report) = hybrid_loss(&probabilities(&logits)?, &targets, self.config.train.loss_form)?;
        if !report.is_finite() {
            return Err(self.non_finite(lr));
        }
        let grads = ctx.param_grads(&g.backward(&loss)?);
        self.last_grad_norm = grad_norm(&grads);
        if !self.last_grad_norm.is_finite() {
            return Err(self.non_finite(lr));
        }
        let stats = ctx.stats_snapshot();
        drop(ctx);
        self.store.set_stats(stats);
        self.opt.update(&mut self.store, &grads, lr)?;
        Ok(report)
    }

    fn non_finite(&self, lr: f64) -> BafnetError {
        BafnetError::NonFiniteLoss {
            epoch: self.epoch + 1,
            step: self.opt.step as usize + 1,
            lr,
            grad_norm: self.last_grad_norm,
        }
    }

    /// One pass over `train` in a freshly shuffled order.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochLog> {
        self.check_dataset(train)?;
        if train.is_empty() {
            return Err(data_err("empty training set"));
        }
        let start = Instant::now();
        let per_epoch = self.steps_per_epoch(train.len());
        let total = per_epoch * self.config.train.epochs as u64;
        let aug = Augmenter::from_config(&self.config.train);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossReport::default();
        let mut lr = 0.0;
        let mut steps = 0;
        for batch in order.chunks(self.config.train.batch_size) {
            let t = self.opt.step.min(total);
            lr = cosine_lr(self.config.train.lr, t, total)?;
            let r = self.step(train, batch, &aug, lr).map_err(|e| match e {
                // Non-finite forward values surface as tensor errors.
                e if e.is_numeric() && !matches!(e, BafnetError::NonFiniteLoss { .. }) => self.non_finite(lr),
                e => e,
            })?;
            sum.ce += r.ce;
            sum.dice += r.dice;
            sum.total += r.total;
            steps += 1;
        }
        self.epoch += 1;
        let n = steps as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            loss: LossReport { ce: sum.ce / n, dice: sum.dice / n, total: sum.total / n },
            lr,
            grad_norm: self.last_grad_norm,
            val_miou: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains the remaining epochs, validating after each when `val` is given.
    /// `on_epoch` runs after the epoch's log is appended to `history`, so a
    /// checkpoint taken there is complete.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Self, &EpochLog),
    ) -> Result<()> {
        while self.epoch < self.config.train.epochs {
            let mut log = self.train_epoch(train)?;
            if let Some(v) = val.filter(|v| !v.is_empty()) {
                let start = Instant::now();
                let (_, r) = self.evaluate(v, false)?;
                log.val_miou = Some(r.miou);
                log.seconds += start.elapsed().as_secs_f64();
            }
            self.history.push(log);
            on_epoch(self, self.history.last().expect("just pushed"));
        }
        Ok(())
    }

    pub fn evaluate(&self, d: &Dataset, tta: bool) -> Result<(ConfusionMatrix, MetricsReport)> {
        let t = &self.config.train;
        let cfg =
            if tta { TtaConfig { scales: t.tta_scales.clone(), flips: t.tta_flips } } else { TtaConfig::identity() };
        let mut r = evaluate(
            &ModelPredictor::new(&self.model, &self.store),
            d,
            &cfg,
            t.tile_size,
            t.tile_stride,
            t.metric_classes,
        )?;
        r.1.params = Some(self.store.count());
        Ok(r)
    }

    pub fn checkpoint(&self) -> Result<Archive> {
        let mut man = format!(
            "format = {CHECKPOINT_FORMAT}\ndtype = {}\nepoch = {}\nadam_step = {}\nconfig_hash = {}\nmodel_hash = {}\n\
             rng_seed = {}\nrng_stream = {}\nrng_word_pos = {}\nlast_grad_norm = {:e}\n",
            T::DTYPE.name(),
            self.epoch,
            self.opt.step,
            self.config.hash(),
            self.config.model_hash(),
            hex::encode(self.rng.get_seed()),
            self.rng.get_stream(),
            self.rng.get_word_pos(),
            self.last_grad_norm,
        );
        for h in &self.history {
            man.push_str(&format!("history = {}\n", h.to_line()));
        }
        man.push_str("[config]\n");
        man.push_str(&self.config.to_text());
        let mut a = Archive::new(man);
        for (i, p) in self.store.params.iter().enumerate() {
            a.insert(format!("param/{}", p.name), &p.value)?;
            a.insert(format!("adam_m/{}", p.name), &self.opt.m[i])?;
            a.insert(format!("adam_v/{}", p.name), &self.opt.v[i])?;
        }
        for s in &self.store.stats {
            let n = s.stats.mean.len();
            a.insert(format!("stats/{}.mean", s.name), &Tensor::new(&[n], s.stats.mean.clone())?)?;
            a.insert(format!("stats/{}.var", s.name), &Tensor::new(&[n], s.stats.var.clone())?)?;
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let a = self.checkpoint()?;
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(|e| BafnetError::io(d, e))?;
        }
        fs::write(path, a.to_bytes()).map_err(|e| BafnetError::io(path, e))
    }

    /// Restores model, optimizer, RNG position and history. Values are
    /// converted if the checkpoint was written in the other precision.
    pub fn from_checkpoint(a: &Archive) -> Result<Self> {
        let ck = CheckpointInfo::parse(&a.manifest)?;
        let mut t = Trainer::<T>::new(ck.config.clone())?;
        for (i, p) in t.store.params.iter_mut().enumerate() {
            p.value = load(a, &format!("param/{}", p.name), p.value.shape())?;
            t.opt.m[i] = load(a, &format!("adam_m/{}", p.name), p.value.shape())?;
            t.opt.v[i] = load(a, &format!("adam_v/{}", p.name), p.value.shape())?;
        }
        let stats = t
            .store
            .stats
            .iter()
            .map(|s| {
                let n = [s.stats.mean.len()];
                Ok(RunningStats {
                    mean: load::<T>(a, &format!("stats/{}.mean", s.name), &n)?.into_data(),
                    var: load::<T>(a, &format!("stats/{}.var", s.name), &n)?.into_data(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        t.store.set_stats(stats);
        t.opt.step = ck.adam_step;
        t.epoch = ck.epoch;
        t.history = ck.history;
        t.last_grad_norm = ck.last_grad_norm;
        t.rng = ChaCha8Rng::from_seed(ck.rng_seed);
        t.rng.set_stream(ck.rng_stream);
        t.rng.set_word_pos(ck.rng_word_pos);
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trainer::from_checkpoint(&read_archive(path)?)
    }
}

fn load<T: Real>(a: &Archive, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t: Tensor<T> = a.get(name).map_err(|e| BafnetError::Checkpoint(format!("{name}: {e}")))?;
    if t.shape() != shape {
        return Err(BafnetError::Checkpoint(format!("{name}: shape {:?}, model expects {shape:?}", t.shape())));
    }
    Ok(t)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| BafnetError::io(path, e))?;
    Archive::from_bytes(&bytes).map_err(|e| BafnetError::Checkpoint(format!("{}: {e}", path.display())))
}

/// The manifest of a checkpoint archive.
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub dtype: String,
    pub epoch: usize,
    pub adam_step: u64,
    pub config_hash: String,
    pub model_hash: String,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub last_grad_norm: f64,
    pub history: Vec<EpochLog>,
    pub config: Config,
}

impl CheckpointInfo {
    pub fn parse(manifest: &str) -> Result<Self> {
        let bad = |m: String| BafnetError::Checkpoint(m);
        let (head, cfg_text) =
            manifest.split_once("[config]\n").ok_or_else(|| bad("manifest has no [config] section".into()))?;
        let mut kv = std::collections::HashMap::new();
        let mut history = Vec::new();
        for l in head.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = l.split_once(" = ").ok_or_else(|| bad(format!("bad manifest line {l:?}")))?;
            if k == "history" {
                history.push(EpochLog::from_line(v)?);
            } else {
                kv.insert(k, v);
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<u128> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format {}", get("format")?)));
        }
        let config = Config::from_text(cfg_text)?;
        let config_hash = get("config_hash")?.to_string();
        if config.hash() != config_hash {
            return Err(bad("config text does not match its recorded hash".into()));
        }
        let seed = hex::decode(get("rng_seed")?).map_err(|_| bad("bad rng_seed".into()))?;
        Ok(CheckpointInfo {
            dtype: get("dtype")?.to_string(),
            epoch: num("epoch")? as usize,
            adam_step: num("adam_step")? as u64,
            config_hash,
            model_hash: get("model_hash")?.to_string(),
            rng_seed: seed.try_into().map_err(|_| bad("rng_seed must be 32 bytes".into()))?,
            rng_stream: num("rng_stream")? as u64,
            rng_word_pos: num("rng_word_pos")?,
            last_grad_norm: get("last_grad_norm")?.parse().map_err(|_| bad("bad last_grad_norm".into()))?,
            history,
            config,
        })
    }
}

/// Tiles every scene, predicts (optionally with TTA), stitches, and scores
/// against the reference masks.
pub fn evaluate<T: Real, P: Predictor<T> + ?Sized>(
    p: &P,
    d: &Dataset,
    tta: &TtaConfig,
    tile_size: usize,
    tile_stride: usize,
    which: MetricClasses,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    if p.num_classes() != d.num_classes() {
        return Err(data_err(format!("model predicts {} classes, dataset has {}", p.num_classes(), d.num_classes())));
    }
    let mut cm = ConfusionMatrix::new(&d.palette.name_refs());
    for s in &d.scenes {
        let probs = predict_scene(p, &s.image, tta, tile_size, tile_stride)?;
        cm.accumulate(&argmax(&probs)?.data, &s.mask.data)?;
    }
    let r = cm.report(which)?;
    Ok((cm, r))
}
