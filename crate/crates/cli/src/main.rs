use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde_json::{json, Value};

use lpt_core::config::RunConfig;
use lpt_core::data::{load_manifest, DatasetIndex, Split};
use lpt_core::distortion::{compose_pipeline, distort, DistortionPipeline, EvalProfile};
use lpt_core::gradcheck::{check_model, ModelCheck};
use lpt_core::metrics::{evaluate, EvalSettings};
use lpt_core::model::{Model, TrainMode, ViTConfig};
use lpt_core::rng::child_rng;
use lpt_core::size_augment::random_crop_resize;
use lpt_core::train::{train, LossConfig, RunDir};
use lpt_core::{synth, Error};

#[derive(Parser)]
#[command(name = "lpt", version, about = "Robust real/fake image detection: distortion simulation, pairwise training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply sampled or fixed distortions to every image of a manifest
    Distort(DistortArgs),
    /// Pairwise clean/distorted training
    Train(TrainArgs),
    /// Accuracy and AUC under clean and distorted profiles
    Eval(EvalArgs),
    /// Compare model gradients against central differences
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic two-class corpus
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct DistortArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, alias = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file whose distortion and size_aug sections are used
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    kmin: Option<usize>,
    #[arg(long)]
    kmax: Option<usize>,
    /// Fixed evaluation profile instead of sampled pipelines
    #[arg(long, conflicts_with = "pipeline")]
    profile: Option<String>,
    /// Pipeline description applied to every image as given
    #[arg(long)]
    pipeline: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    size_aug: Switch,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Worker threads for this command (default: global pool)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings when no config file is given
    #[arg(long, value_parser = ["default", "toy"], default_value = "default")]
    preset: String,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = ["full", "lora"])]
    mode: Option<String>,
    /// Checkpoint to start from
    #[arg(long)]
    init: Option<PathBuf>,
    /// Keep only manifest rows tagged with this split (untagged rows stay)
    #[arg(long, value_parser = ["train", "val1", "val2", "test"])]
    split: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated profile names; clean is always included
    #[arg(long)]
    profiles: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file whose data, distortion tables and eval sections are used
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for reports; without it the report only goes to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_corrector: bool,
    #[arg(long)]
    hard_kmin: Option<usize>,
    #[arg(long)]
    hard_kmax: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CheckModes {
    Lora,
    Full,
    Both,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Toy model (64 px, patch 8, width 64, 4 blocks)
    #[arg(long)]
    toy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CheckModes::Both)]
    mode: CheckModes,
    /// Coordinates drawn per parameter tensor
    #[arg(long, default_value_t = 6, conflicts_with = "exhaustive")]
    per_tensor: usize,
    /// Check every coordinate of every trainable tensor
    #[arg(long)]
    exhaustive: bool,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Run directory for the JSON report
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Images per class
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = ["train", "val1", "val2", "test"], default_value = "train")]
    split: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let res = match cli.cmd {
        Command::Distort(a) => cmd_distort(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LPT_THREADS must be a positive integer, got {v:?}")))?;
    let avail = std::thread::available_parallelism().map_or(1, |p| p.get());
    rayon::ThreadPoolBuilder::new().num_threads(n.min(avail)).build_global()?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn manifest(path: &Path, root: Option<&Path>) -> Result<DatasetIndex> {
    Ok(load_manifest(path, root)?)
}

fn cmd_distort(a: DistortArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.seed = a.seed;
    let d = &mut cfg.distortion;
    d.mu = a.mu.unwrap_or(d.mu);
    d.sigma = a.sigma.unwrap_or(d.sigma);
    d.kmin = a.kmin.unwrap_or(d.kmin);
    d.kmax = a.kmax.unwrap_or(d.kmax);
    cfg.size_aug.enabled = a.size_aug == Switch::On;
    cfg.distortion.validate()?;
    cfg.size_aug.validate()?;
    let profile = a
        .profile
        .as_deref()
        .map(|p| EvalProfile::builtin(p, cfg.eval.hard_range()))
        .transpose()?;
    let fixed = a.pipeline.as_deref().map(DistortionPipeline::load).transpose()?;
    if let Some(p) = &fixed {
        p.validate()?;
    }
    let index = manifest(&a.manifest, a.data_root.as_deref())?;

    let img_dir = a.out_dir.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    write_json(
        &a.out_dir.join("config.resolved.json"),
        &json!({
            "seed": a.seed,
            "distortion": cfg.distortion,
            "size_aug": cfg.size_aug,
            "profile": profile,
            "pipeline": fixed,
        }),
    )?;

    let job = |i: usize| -> Result<Value> {
        let e = &index.entries[i];
        let img = index.load_image(i)?;
        let mut rng = child_rng(a.seed, i as u64);
        let (img, trace) = if cfg.size_aug.enabled {
            let (im, t) = random_crop_resize(&img, &cfg.size_aug, &mut rng)?;
            (im, Some(t))
        } else {
            (img, None)
        };
        let (out, applied) = match (&profile, &fixed) {
            (Some(p), _) => (p.apply(&img, a.seed, i as u64, &cfg.distortion.tables)?, json!({"profile": p.name})),
            (None, Some(p)) => (distort(&img, p, &cfg.distortion.tables)?, json!({"pipeline": p})),
            (None, None) => {
                let p = compose_pipeline(
                    &cfg.distortion.catalog,
                    cfg.distortion.k_range(),
                    &cfg.distortion.sampler(),
                    &mut rng,
                )?;
                (distort(&img, &p, &cfg.distortion.tables)?, json!({"pipeline": p}))
            }
        };
        let name = format!("{i:05}.ppm");
        out.save_ppm(&img_dir.join(&name))?;
        let mut rec = json!({
            "index": i,
            "source": e.path,
            "label": e.label,
            "output": format!("images/{name}"),
            "size_aug": trace,
        });
        if let (Value::Object(r), Value::Object(x)) = (&mut rec, applied) {
            r.extend(x);
        }
        Ok(rec)
    };
    let run = || (0..index.len()).into_par_iter().map(job).collect::<Result<Vec<Value>>>();
    let records = match a.workers {
        Some(0) => bail!(Error::Config("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(run)?,
        None => run()?,
    };

    let mut log = String::new();
    let mut csv = String::from("path,label\n");
    for r in &records {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
        csv.push_str(&format!("{},{}\n", r["output"].as_str().unwrap_or_default(), r["label"]));
    }
    fs::write(a.out_dir.join("pipelines.jsonl"), log)?;
    fs::write(a.out_dir.join("manifest.csv"), csv)?;
    println!("distorted {} images into {}", records.len(), a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&a.preset)?,
    };
    let mut patch = json!({});
    let mut set = |section: &str, key: &str, v: Value| {
        patch
            .as_object_mut()
            .expect("object")
            .entry(section)
            .or_insert_with(|| json!({}))[key] = v;
    };
    if let Some(v) = a.epochs {
        set("train", "epochs", json!(v));
    }
    if let Some(v) = a.batch_size {
        set("train", "batch_size", json!(v));
    }
    if let Some(v) = a.lr {
        set("train", "lr", json!(v));
    }
    if let Some(v) = &a.init {
        set("train", "init", json!(v));
    }
    if let Some(v) = a.alpha {
        set("loss", "alpha", json!(v));
    }
    if let Some(v) = a.beta {
        set("loss", "beta", json!(v));
    }
    if let Some(v) = &a.mode {
        set("model", "mode", json!(v));
    }
    let mut cfg = base.merged(patch)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = train_config(&a)?;
    let split = a.split.as_deref().and_then(Split::parse);
    let load = |p: &Path| -> Result<DatasetIndex> {
        let idx = manifest(p, a.data_root.as_deref())?;
        Ok(match split {
            Some(s) => idx.filter_split(s)?,
            None => idx,
        })
    };
    let train_idx = load(&a.manifest)?;
    let val_idx = a.val_manifest.as_deref().map(|p| manifest(p, a.data_root.as_deref())).transpose()?;
    let dir = RunDir::create(&a.out)?;
    fs::write(dir.config(), cfg.to_json()? + "\n")?;
    let t0 = Instant::now();
    let out = train(&cfg, &train_idx, val_idx.as_ref(), Some(&dir))?;
    let summary = json!({
        "steps": out.steps.len(),
        "final_loss": out.steps.last().map(|s| s.total),
        "best_val_auc": out.best_score,
        "seconds": t0.elapsed().as_secs_f64(),
    });
    write_json(&dir.reports().join("train_summary.json"), &summary)?;
    if let Some(v) = out.validations.last() {
        fs::write(dir.reports().join("val_last.txt"), v.report.to_table())?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(b) = a.batch_size {
        cfg.eval.batch_size = b;
    }
    if let Some(k) = a.hard_kmin {
        cfg.eval.hard_kmin = k;
    }
    if let Some(k) = a.hard_kmax {
        cfg.eval.hard_kmax = k;
    }
    if a.no_corrector {
        cfg.eval.corrector = false;
    }
    if let Some(p) = &a.profiles {
        cfg.eval.profiles = p.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    cfg.eval.validate()?;
    cfg.data.validate()?;
    let profiles = cfg.eval.resolve(&cfg.eval.profiles)?;
    let model = Model::load(&a.checkpoint)?;
    let index = manifest(&a.manifest, a.data_root.as_deref())?;
    let st = EvalSettings {
        seed: a.seed,
        norm: cfg.data.clone(),
        tables: cfg.distortion.tables.clone(),
        batch_size: cfg.eval.batch_size,
        threshold: cfg.eval.threshold,
        corrector: cfg.eval.corrector,
    };
    let report = evaluate(&model, &index, &profiles, &st)?;
    let table = report.to_table();
    if let Some(out) = &a.out {
        let dir = RunDir::create(out)?;
        write_json(
            &dir.config(),
            &json!({
                "seed": a.seed,
                "checkpoint": a.checkpoint,
                "manifest": a.manifest,
                "eval": cfg.eval,
                "data": cfg.data,
                "tables": cfg.distortion.tables,
            }),
        )?;
        fs::write(dir.reports().join("metrics.json"), report.to_json()? + "\n")?;
        fs::write(dir.reports().join("metrics.txt"), &table)?;
    }
    print!("{table}");
    std::io::stdout().flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let base = if a.toy { ViTConfig::toy() } else { ViTConfig::micro() };
    let modes: &[TrainMode] = match a.mode {
        CheckModes::Lora => &[TrainMode::Lora],
        CheckModes::Full => &[TrainMode::Full],
        CheckModes::Both => &[TrainMode::Lora, TrainMode::Full],
    };
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for &mode in modes {
        let check = ModelCheck {
            cfg: ViTConfig { mode, ..base.clone() },
            batch: a.batch,
            seed: a.seed,
            per_tensor: (!a.exhaustive).then_some(a.per_tensor),
            h: a.h,
            loss: LossConfig::exact_gradient(),
        };
        let r = check_model(&check)?;
        info!(
            "{mode:?}: {} tensors, {} coordinates, max rel error {:.3e}",
            r.tensors, r.report.coordinates, r.report.max_rel_error
        );
        worst = worst.max(r.report.max_rel_error);
        rows.push(json!({
            "mode": mode,
            "tensors": r.tensors,
            "coordinates": r.report.coordinates,
            "max_rel_error": r.report.max_rel_error,
            "worst": r.worst,
        }));
    }
    let pass = worst <= a.tolerance;
    let summary = json!({
        "max_rel_error": worst,
        "tolerance": a.tolerance,
        "pass": pass,
        "seconds": t0.elapsed().as_secs_f64(),
        "modes": rows,
    });
    if let Some(out) = &a.out {
        let dir = RunDir::create(out)?;
        write_json(&dir.reports().join("gradcheck.json"), &summary)?;
    }
    println!("max relative error {worst:.3e} (tolerance {:.0e}): {}", a.tolerance, if pass { "PASS" } else { "FAIL" });
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let split = Split::parse(&a.split).expect("validated by clap");
    let m = synth::generate(a.n, &a.out, a.seed, split)?;
    println!("{}", m.display());
    Ok(ExitCode::SUCCESS)
}
