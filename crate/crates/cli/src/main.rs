//! `mdba`: label preparation, training, evaluation, export, second-step
//! retraining, fixture generation and visualization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdba_core::align_s2c::{cutmix, sample_mix_mask, MixSource};
use mdba_core::config::{Mechanism, RunConfig, KEY_DOCS};
use mdba_core::data::{load_split, pseudo_label_for, split_dataset, write_label_map, write_rgb};
use mdba_core::fixture::{make_synthetic_dataset, FixtureSpec};
use mdba_core::maps::{LabelMap, IGNORE};
use mdba_core::trainer::{
    backbone_from_checkpoint, derived_rng, evaluate, export_pseudo_labels, load_run_data, predict,
    read_exported_labels, retrain_second_step, TrainCheckpoint, Trainer,
};
use mdba_core::viz::{colorize, hstack, inspection_strip};
use mdba_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mdba", version, about = "Weakly-supervised segmentation from saliency maps and image tags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write saliency-derived pseudo labels for every single-tag image.
    PrepareLabels {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the segmentation network.
    #[command(after_long_help = key_help())]
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint; its stored config wins over the flags.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this iteration instead of t_max.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Per-class IoU and mIoU of a checkpoint on a labeled split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Report file; defaults to `<checkpoint>.<split>.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write argmax labels of a checkpoint for every image of a split.
    ExportLabels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh network on exported labels with every mechanism off.
    #[command(after_long_help = key_help())]
    Retrain {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of `<id>.png` labels from `export-labels`.
        #[arg(long)]
        labels: PathBuf,
    },
    /// Generate the synthetic shapes dataset.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML file with fixture fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Fixture field override, `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Input, pseudo label, prediction and noise-mask panels per image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Comma-separated image ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Pixel loss threshold; defaults to the schedule value at the
        /// checkpoint's iteration. `inf` keeps every pixel.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also dump the box-mix of the first two ids.
        #[arg(long)]
        mix: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "lambda-adv")]
    lambda_adv: Option<f64>,
    /// Mechanisms to disable: onf, pnd, s2c, c2s.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Any config key, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn key_help() -> String {
    let defaults = RunConfig::default().to_toml();
    let mut s = String::from("Config keys (TOML file or --set key=value):\n");
    for (key, doc) in KEY_DOCS {
        let default = defaults
            .lines()
            .find_map(|l| l.split_once(" = ").filter(|(k, _)| k.trim() == *key).map(|(_, v)| v.to_string()))
            .unwrap_or_else(|| "unset".into());
        s.push_str(&format!("  {key:<22} {doc} [default: {default}]\n"));
    }
    s
}

fn split_kv(kv: &str) -> Result<(&str, &str)> {
    kv.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::config(kv, "expected key=value"))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        let mut echo = Vec::new();
        if let Some(d) = &self.dataset {
            cfg.dataset_root = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            echo.push(format!("seed = {s}"));
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
            echo.push(format!("alpha = {a}"));
        }
        if let Some(l) = self.lambda_adv {
            cfg.lambda_adv = l;
            echo.push(format!("lambda_adv = {l}"));
        }
        if !self.ablate.is_empty() {
            cfg.set("ablate", &self.ablate.join(","))?;
            echo.push(format!("ablate = {:?}", cfg.ablate.iter().map(|m| m.name()).collect::<Vec<_>>()));
        }
        for kv in &self.sets {
            let (k, v) = split_kv(kv)?;
            cfg.set(k, v)?;
            echo.push(format!("{k} = {v}"));
        }
        for line in echo {
            eprintln!("override: {line}");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidSpec(_) | Error::InvalidRange(_) | Error::Range { .. } => 2,
        Error::NonFiniteLoss { .. } | Error::Numerical(_) | Error::Simplex { .. } => 4,
        _ => 3,
    }
}

fn prepare_labels(dataset: &Path, out: &Path, threshold: f32, split: &str) -> Result<()> {
    let ds = load_split(dataset, split)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut pixels: BTreeMap<u8, u64> = BTreeMap::new();
    let mut written = 0;
    for r in ds.records.iter().filter(|r| r.is_simple()) {
        let label = pseudo_label_for(r, threshold)?;
        for &v in label.as_slice() {
            *pixels.entry(v).or_default() += 1;
        }
        write_label_map(&out.join(format!("{}.png", r.id)), &label)?;
        written += 1;
    }
    let total: u64 = pixels.values().sum();
    let names = ds.meta.all_class_names();
    println!("{written} pseudo labels written to {}", out.display());
    for (id, n) in &pixels {
        let name = names.get(*id as usize).map_or("ignore", String::as_str);
        println!("{id:>3} {name:<16} {n:>10} px  {:6.2}%", 100.0 * *n as f64 / total.max(1) as f64);
    }
    Ok(())
}

fn train(run: &RunArgs, resume: Option<&Path>, until: Option<usize>) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = TrainCheckpoint::load(path)?;
            let cfg = ckpt.meta.config.clone();
            let (_, data, val) = load_run_data(&cfg)?;
            eprintln!("resuming at t = {}", ckpt.meta.state.t);
            Trainer::from_checkpoint(ckpt, data, val)?
        }
        None => {
            let cfg = run.resolve()?;
            let (meta, data, val) = load_run_data(&cfg)?;
            Trainer::new(cfg, meta, data, val)?
        }
    };
    let dir = trainer.config.out_dir.clone();
    trainer.set_run_dir(&dir)?;
    eprintln!(
        "training {} simple + {} complex images to t = {} in {}",
        trainer.data.labeled.len(),
        trainer.data.unlabeled.len(),
        until.unwrap_or(trainer.state.t_max),
        dir.display()
    );
    let reports = trainer.run(until)?;
    if let Some(r) = reports.last() {
        println!("t = {}  L_total = {:.4}", r.t, r.l_total);
    }
    if let Some(e) = trainer.evals.last() {
        println!("val mIoU at t = {}: {}", e.t, fmt_miou(e.miou));
    }
    if let Some(b) = trainer.state.best_miou {
        println!("best val mIoU {:.4} at t = {}", b, trainer.state.best_t);
    }
    Ok(())
}

fn fmt_miou(m: Option<f64>) -> String {
    m.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

fn evaluate_cmd(checkpoint: &Path, dataset: &Path, split: &str, report: Option<&Path>) -> Result<()> {
    let ckpt = TrainCheckpoint::load(checkpoint)?;
    let (net, norm) = backbone_from_checkpoint(&ckpt)?;
    let ds = load_split(dataset, split)?;
    let rep = evaluate(&net, &norm, &ds.records, ckpt.meta.dataset.total_classes())?;
    let names = ckpt.meta.dataset.all_class_names();
    let path = report.map_or_else(|| checkpoint.with_extension(format!("{split}.txt")), Path::to_path_buf);
    rep.write(&names, &path)?;
    print!("{}", rep.render(&names));
    eprintln!("report written to {}", path.display());
    Ok(())
}

fn export_labels(checkpoint: &Path, dataset: &Path, split: &str, out: &Path) -> Result<()> {
    let ckpt = TrainCheckpoint::load(checkpoint)?;
    let (net, norm) = backbone_from_checkpoint(&ckpt)?;
    let ds = load_split(dataset, split)?;
    let labels = export_pseudo_labels(&net, &norm, &ds.records, Some(out))?;
    println!("{} labels written to {}", labels.len(), out.display());
    Ok(())
}

fn retrain(run: &RunArgs, labels: &Path) -> Result<()> {
    let cfg = run.resolve()?;
    let root = cfg.require_dataset()?.to_path_buf();
    let train = load_split(&root, &cfg.train_split)?;
    let exported = read_exported_labels(labels, &train.records)?;
    let (_, _, val) = load_run_data(&cfg)?;
    let trainer = retrain_second_step(&cfg, train.meta, &train.records, &exported, val, Some(&cfg.out_dir))?;
    if let Some(e) = trainer.evals.last() {
        println!("second-step val mIoU at t = {}: {}", e.t, fmt_miou(e.miou));
    }
    Ok(())
}

fn make_fixture(out: &Path, seed: u64, spec: Option<&Path>, sets: &[String]) -> Result<()> {
    let mut text = match spec {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    for kv in sets {
        let (k, v) = split_kv(kv)?;
        text.push_str(&format!("\n{k} = {v}\n"));
    }
    let spec: FixtureSpec = toml::from_str(&text).map_err(|e| Error::InvalidSpec(e.message().to_string()))?;
    let fx = make_synthetic_dataset(&spec, seed, out)?;
    println!("{} records written to {}", fx.records.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn visualize(
    checkpoint: &Path,
    dataset: &Path,
    split: &str,
    ids: &[String],
    out: &Path,
    threshold: Option<f64>,
    mix: bool,
) -> Result<()> {
    let ckpt = TrainCheckpoint::load(checkpoint)?;
    let (net, norm) = backbone_from_checkpoint(&ckpt)?;
    let cfg = &ckpt.meta.config;
    let threshold = match threshold {
        Some(t) => t,
        None if !cfg.enabled(Mechanism::Pnd) => f64::INFINITY,
        None => ckpt.meta.state.schedule.current_threshold(ckpt.meta.state.t.max(1))?,
    };
    let ds = load_split(dataset, split)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut found = Vec::new();
    for id in ids {
        let Some(r) = ds.records.iter().find(|r| &r.id == id) else {
            log::warn!("unknown id `{id}` skipped");
            continue;
        };
        let pseudo = if r.is_simple() && r.saliency.is_some() {
            pseudo_label_for(r, cfg.binarize_threshold)?
        } else {
            LabelMap::filled(r.image.dims().0, r.image.dims().1, IGNORE)
        };
        let pred = predict(&net, &norm, &[&r.image])?.remove(0);
        let strip = inspection_strip(&r.image, &pseudo, &pred, threshold)?;
        write_rgb(&out.join(format!("{id}.png")), &strip)?;
        found.push((r, pseudo));
    }
    if mix {
        let split = split_dataset(
            found.iter().filter(|(r, _)| r.is_simple()).map(|(r, _)| (*r).clone()).collect(),
            cfg.binarize_threshold,
        )?;
        if let [a, b, ..] = split.simple.as_slice() {
            let (h, w) = a.record.image.dims();
            let mask = sample_mix_mask(h, w, (cfg.mix_area_lo, cfg.mix_area_hi), &mut derived_rng(cfg.seed, 0, 0))?;
            let pair = cutmix(
                MixSource { id: &a.record.id, image: &a.record.image, label: &a.pseudo, tags: &a.record.tags },
                MixSource { id: &b.record.id, image: &b.record.image, label: &b.pseudo, tags: &b.record.tags },
                &mask,
            )?;
            let strip = hstack(&[pair.image, colorize(&pair.label)])?;
            write_rgb(&out.join(format!("mix_{}_{}.png", a.record.id, b.record.id)), &strip)?;
        } else {
            log::warn!("--mix needs two single-tag ids");
        }
    }
    println!("{} panels written to {} (threshold {threshold})", found.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareLabels { dataset, out, threshold, split } => prepare_labels(&dataset, &out, threshold, &split),
        Command::Train { run, resume, until } => train(&run, resume.as_deref(), until),
        Command::Evaluate { checkpoint, dataset, split, report } => {
            evaluate_cmd(&checkpoint, &dataset, &split, report.as_deref())
        }
        Command::ExportLabels { checkpoint, dataset, split, out } => export_labels(&checkpoint, &dataset, &split, &out),
        Command::Retrain { run, labels } => retrain(&run, &labels),
        Command::MakeFixture { out, seed, spec, sets } => make_fixture(&out, seed, spec.as_deref(), &sets),
        Command::Visualize { checkpoint, dataset, split, ids, out, threshold, mix } => {
            visualize(&checkpoint, &dataset, &split, &ids, &out, threshold, mix)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
