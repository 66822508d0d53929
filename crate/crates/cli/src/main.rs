//! `bafnet` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
//! (non-finite loss or activations), 3 I/O or data error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bafnet::config::{Config, KEYS};
use bafnet::data::dataset::{list_pngs, read_image, write_gray, write_label};
use bafnet::data::tile::argmax;
use bafnet::data::tta::predict_scene;
use bafnet::data::{ClassPalette, Dataset, ModelPredictor, TtaConfig};
use bafnet::diagnostics::{context_maps, gradcheck_suite};
use bafnet::train::{read_archive, CheckpointInfo, EpochLog, Trainer};
use bafnet::{complexity, runtime, Bafnet, BafnetError};
use bafnet_tensor::{Archive, Real, Tensor};
use clap::{Arg, ArgAction, ArgMatches, Command};

const CHECKPOINT_FILE: &str = "checkpoint.bin";

fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("key = value config file"));
    KEYS.iter().fold(cmd, |c, &(k, help)| c.arg(Arg::new(k).long(k).value_name("VALUE").help(help)))
}

fn cli() -> Command {
    let ckpt = || Arg::new("checkpoint").long("checkpoint").value_name("FILE").help("checkpoint written by `train`");
    let data =
        || Arg::new("data").long("data").value_name("DIR").help("dataset root with {split}/images and {split}/labels");
    Command::new("bafnet")
        .about("Bilateral remote-sensing segmentation: train, evaluate, predict and inspect")
        .subcommand_required(true)
        .subcommand(
            with_config_flags(Command::new("train").about("train a model (synthetic scenes unless --data is given)"))
                .arg(data())
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("run").help("output directory"))
                .arg(Arg::new("resume").long("resume").value_name("FILE").help("continue from a checkpoint")),
        )
        .subcommand(
            with_config_flags(Command::new("eval").about("score a checkpoint on a labeled split"))
                .arg(ckpt().required(true))
                .arg(data())
                .arg(Arg::new("split").long("split").default_value("val").help("split directory under --data")),
        )
        .subcommand(
            with_config_flags(Command::new("predict").about("segment images into palette PNGs"))
                .arg(ckpt().required(true))
                .arg(
                    Arg::new("input")
                        .long("input")
                        .required(true)
                        .value_name("PATH")
                        .help("PNG file or directory of PNGs"),
                )
                .arg(Arg::new("out").long("out").required(true).value_name("DIR"))
                .arg(Arg::new("probs").long("probs").action(ArgAction::SetTrue).help("also write class probabilities")),
        )
        .subcommand(
            with_config_flags(Command::new("inspect").about("parameter and FLOP breakdown per module"))
                .arg(Arg::new("size").long("size").default_value("512").value_parser(clap::value_parser!(usize))),
        )
        .subcommand(
            with_config_flags(
                Command::new("inspect-features").about("dump normalized context maps of every remote-local block"),
            )
            .arg(ckpt())
            .arg(Arg::new("image").long("image").required(true).value_name("PNG"))
            .arg(Arg::new("out").long("out").required(true).value_name("DIR")),
        )
        .subcommand(with_config_flags(
            Command::new("gradcheck").about("finite-difference check of every op and the whole model"),
        ))
        .subcommand(
            with_config_flags(Command::new("synth").about("write a synthetic dataset (train and val splits)"))
                .arg(Arg::new("out").long("out").required(true).value_name("DIR")),
        )
}

/// Defaults, then the config file, then flags (the ablation preset first).
fn config_from(m: &ArgMatches, base: Config) -> Result<Config> {
    let mut c = base;
    if let Some(f) = m.get_one::<String>("config") {
        let text = fs::read_to_string(f).map_err(|e| BafnetError::io(f, e))?;
        c.apply_text(&text)?;
    }
    for &(k, _) in KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            c.set(k, v)?;
        }
    }
    c.validate()?;
    Ok(c)
}

/// `None` when the flag is absent or not defined for this subcommand.
fn path(m: &ArgMatches, k: &str) -> Option<PathBuf> {
    m.try_get_one::<String>(k).ok().flatten().map(PathBuf::from)
}

/// Train/val datasets: from disk when `data` is given (val split from disk
/// if present, else held out), otherwise freshly generated synthetic scenes.
fn datasets(cfg: &Config, data: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let t = &cfg.train;
    let seed = t.seed.unwrap_or(0);
    match data {
        Some(root) => {
            let train = Dataset::load(root, "train", ClassPalette::isprs())?;
            if root.join("val").is_dir() {
                Ok((train, Dataset::load(root, "val", ClassPalette::isprs())?))
            } else {
                Ok(train.split(t.val_fraction, seed)?)
            }
        }
        None => Ok(Dataset::synthetic(seed, t.synth_count, t.synth_size)?.split(t.val_fraction, seed)?),
    }
}

fn print_epoch(l: &EpochLog) {
    eprintln!(
        "epoch {:>3}  loss {:.4} (ce {:.4}, dice {:.4})  lr {:.3e}  |g| {:.3e}  val mIoU {}  {:.1}s",
        l.epoch,
        l.loss.total,
        l.loss.ce,
        l.loss.dice,
        l.lr,
        l.grad_norm,
        l.val_miou.map_or("-".into(), |v| format!("{v:.4}")),
        l.seconds
    );
}

fn train<T: Real>(m: &ArgMatches) -> Result<()> {
    let out = path(m, "out").expect("has default");
    let data = path(m, "data");
    let mut t = match path(m, "resume") {
        Some(ck) => {
            let mut t = Trainer::<T>::load(&ck)?;
            // Only the schedule length may change on resume.
            let c = config_from(m, t.config.clone())?;
            if c.model_hash() != t.config.model_hash() {
                bail!(BafnetError::Config("flags change the model of the resumed checkpoint".into()));
            }
            t.config.train.epochs = c.train.epochs;
            t
        }
        None => {
            let c = config_from(m, Config::default())?;
            if m.get_one::<String>("seed").is_none() {
                bail!(BafnetError::Config("train requires --seed".into()));
            }
            Trainer::<T>::new(c)?
        }
    };
    let (train, val) = datasets(&t.config, data.as_deref())?;
    fs::create_dir_all(&out).map_err(|e| BafnetError::io(&out, e))?;
    fs::write(out.join("config.txt"), t.config.to_text()).map_err(|e| BafnetError::io(out.join("config.txt"), e))?;
    eprintln!(
        "training {} scenes, validating on {}, {} parameters, {}",
        train.len(),
        val.len(),
        t.store.count(),
        T::DTYPE.name()
    );
    let ck = out.join(CHECKPOINT_FILE);
    let mut save_err = None;
    t.fit(&train, Some(&val), |tr, log| {
        print_epoch(log);
        if let Err(e) = tr.save(&ck) {
            save_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    t.save(&ck)?;
    let (_, report) = t.evaluate(&val, t.config.train.tta)?;
    let text = report.to_table();
    fs::write(out.join("report.tsv"), &text).map_err(|e| BafnetError::io(out.join("report.tsv"), e))?;
    println!("{text}");
    Ok(())
}

fn load_checkpoint<T: Real>(m: &ArgMatches) -> Result<Trainer<T>> {
    let ck = path(m, "checkpoint").expect("required");
    let mut t = Trainer::<T>::load(&ck)?;
    let c = config_from(m, t.config.clone())?;
    if c.model_hash() != t.config.model_hash() {
        bail!(BafnetError::Config("flags change the model stored in the checkpoint".into()));
    }
    t.config = c;
    Ok(t)
}

fn eval<T: Real>(m: &ArgMatches) -> Result<()> {
    let t = load_checkpoint::<T>(m)?;
    let d = match path(m, "data") {
        Some(root) => Dataset::load(&root, m.get_one::<String>("split").expect("default"), ClassPalette::isprs())?,
        None => datasets(&t.config, None)?.1,
    };
    let (_, report) = t.evaluate(&d, t.config.train.tta)?;
    println!("{}", report.to_table());
    println!("{}", report.to_key_values());
    Ok(())
}

fn predict<T: Real>(m: &ArgMatches) -> Result<()> {
    let t = load_checkpoint::<T>(m)?;
    let input = path(m, "input").expect("required");
    let out = path(m, "out").expect("required");
    let files = if input.is_dir() { list_pngs(&input)? } else { vec![input] };
    let palette = ClassPalette::isprs();
    let p = ModelPredictor::new(&t.model, &t.store);
    let cfg = TtaConfig::from_config(&t.config.train);
    for f in files {
        let img = read_image(&f)?;
        let probs = predict_scene(&p, &img, &cfg, t.config.train.tile_size, t.config.train.tile_stride)?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        write_label(&out.join(format!("{stem}.png")), &argmax(&probs)?, &palette)?;
        if m.get_flag("probs") {
            let mut a = Archive::new(format!("classes = {}\n", palette.names.join(",")));
            a.insert("probs", &probs)?;
            let pf = out.join(format!("{stem}.probs"));
            fs::write(&pf, a.to_bytes()).map_err(|e| BafnetError::io(&pf, e))?;
        }
        eprintln!("{}", f.display());
    }
    Ok(())
}

fn inspect(m: &ArgMatches) -> Result<()> {
    let c = config_from(m, Config::default())?;
    let size = *m.get_one::<usize>("size").expect("default");
    let (model, store) = Bafnet::build::<f32>(&c.model, c.train.seed.unwrap_or(0))?;
    let r = complexity::complexity(&model, &store, size, size)?;
    print!("{}", r.to_text());
    println!("params_m = {:.3}", r.params as f64 / 1e6);
    println!("gmacs = {:.3}", r.total.macs as f64 / 1e9);
    Ok(())
}

fn inspect_features<T: Real>(m: &ArgMatches) -> Result<()> {
    let (model, store) = match path(m, "checkpoint") {
        Some(_) => {
            let t = load_checkpoint::<T>(m)?;
            (t.model, t.store)
        }
        None => {
            let c = config_from(m, Config::default())?;
            Bafnet::build::<T>(&c.model, c.train.seed.unwrap_or(0))?
        }
    };
    let img = read_image(&path(m, "image").expect("required"))?;
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    let x: Tensor<T> = img.cast::<T>().reshape(&shape)?;
    let out = path(m, "out").expect("required");
    let maps = context_maps(&model, &store, &x)?;
    if maps.is_empty() {
        bail!(BafnetError::Config("this configuration has no remote-local blocks".into()));
    }
    for (name, map) in maps {
        let f = out.join(format!("{name}.png"));
        write_gray(&f, &map)?;
        println!("{}", f.display());
    }
    Ok(())
}

fn gradcheck(m: &ArgMatches) -> Result<()> {
    let c = config_from(m, Config::default())?;
    let mut failed = 0;
    for r in gradcheck_suite(c.train.seed.unwrap_or(0))? {
        let ok = r.passes();
        failed += !ok as usize;
        println!(
            "{}  {:<40} max rel err {:.2e} (tol {:.0e}, {} elements)",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.report.max_rel_err,
            r.tolerance,
            r.report.checked
        );
    }
    if failed > 0 {
        bail!(GradcheckFailed(failed));
    }
    Ok(())
}

fn synth(m: &ArgMatches) -> Result<()> {
    let c = config_from(m, Config::default())?;
    let out = path(m, "out").expect("required");
    let (train, val) = datasets(&c, None)?;
    train.save(&out, "train")?;
    val.save(&out, "val")?;
    println!("{} train and {} val scenes in {}", train.len(), val.len(), out.display());
    Ok(())
}

/// Precision follows `double_precision` from flags, config file or checkpoint.
fn wants_f64(m: &ArgMatches) -> Result<bool> {
    if let Some(ck) = path(m, "checkpoint").or_else(|| path(m, "resume")) {
        let a = read_archive(&ck)?;
        let info = CheckpointInfo::parse(&a.manifest)?;
        return Ok(config_from(m, info.config)?.train.double_precision);
    }
    Ok(config_from(m, Config::default())?.train.double_precision)
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let f64_mode = match name {
        "train" | "eval" | "predict" | "inspect-features" => wants_f64(sub)?,
        _ => false,
    };
    macro_rules! typed {
        ($f:ident) => {
            if f64_mode {
                $f::<f64>(sub)
            } else {
                $f::<f32>(sub)
            }
        };
    }
    match name {
        "train" => typed!(train),
        "eval" => typed!(eval),
        "predict" => typed!(predict),
        "inspect" => inspect(sub),
        "inspect-features" => typed!(inspect_features),
        "gradcheck" => gradcheck(sub),
        "synth" => synth(sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
    .with_context(|| format!("bafnet {name}"))
}

/// Analytic and numeric gradients disagree; reported as a numeric failure.
#[derive(Debug)]
struct GradcheckFailed(usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient checks failed", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<GradcheckFailed>().is_some() {
        return 2;
    }
    match e.downcast_ref::<BafnetError>() {
        Some(b) if b.is_numeric() => 2,
        Some(b) if b.is_io() => 3,
        Some(BafnetError::Data(_) | BafnetError::Checkpoint(_)) => 3,
        _ if e.downcast_ref::<std::io::Error>().is_some() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    runtime::tune_allocator();
    let m = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Skip causes already spelled out by the message above them.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
