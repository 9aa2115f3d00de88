//! Runs the cumulative ablation table on a generated fixture and prints the
//! validation mIoU of every row and seed.
//!
//! ```text
//! cargo run --release --example ablation -- [seeds] [key=value ...]
//! ```
//!
//! Keys prefixed with `fx.` set fixture fields; the rest are run config keys.
//! `rows=base,+onf` restricts the rows.

use std::time::Instant;

use mdba_core::config::{Mechanism, RunConfig};
use mdba_core::data::split_dataset;
use mdba_core::fixture::{generate_fixture, FixtureSpec, Split};
use mdba_core::trainer::{evaluate, Trainer, TrainingData};

fn main() -> mdba_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seed count"));
    let mut config = RunConfig::desk();
    let mut fixture_toml = String::new();
    let mut rows: Option<Vec<String>> = None;
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        if let Some(f) = k.strip_prefix("fx.") {
            fixture_toml.push_str(&format!("{f} = {v}\n"));
        } else if k == "rows" {
            rows = Some(v.split(',').map(String::from).collect());
        } else {
            config.set(k, v)?;
        }
    }
    let spec: FixtureSpec = toml::from_str(&fixture_toml).expect("fixture overrides");
    let mut table: Vec<(String, Vec<f64>)> = Vec::new();
    for seed in 0..seeds {
        let fixture = generate_fixture(&spec, 1000 + seed)?;
        let split = split_dataset(fixture.split(Split::Train), config.binarize_threshold)?;
        let val = fixture.split(Split::Val);
        let corrupted: std::collections::BTreeSet<&str> = fixture
            .records
            .iter()
            .filter(|r| r.corruption.is_some())
            .map(|r| r.record.id.as_str())
            .collect();
        let base_rate = corrupted.len() as f64 / split.simple.len() as f64;
        for (label, ablate) in Mechanism::cumulative_rows() {
            if rows.as_ref().is_some_and(|r| !r.iter().any(|x| x == label)) {
                continue;
            }
            let mut cfg = config.clone();
            cfg.seed = seed;
            cfg.ablate = ablate;
            let start = Instant::now();
            let mut trainer = Trainer::new(cfg, fixture.meta.clone(), TrainingData::from_split(split.clone()), val.clone())?;
            let reports = trainer.run(None)?;
            let miou = trainer.evaluate_val()?.miou.unwrap_or(0.0) * 100.0;
            let subset = |simple: bool| -> mdba_core::Result<f64> {
                let recs: Vec<_> = val.iter().filter(|r| r.is_simple() == simple).cloned().collect();
                let norm = trainer.normalization();
                Ok(evaluate(&trainer.backbone, &norm, &recs, trainer.classes())?.miou.unwrap_or(0.0) * 100.0)
            };
            let (ms, mc) = (subset(true)?, subset(false)?);
            let dropped: usize = reports.iter().map(|r| r.dropped_images).sum();
            let final_drops: Vec<&String> = trainer.state.decisions.iter().filter(|(_, k)| !**k).map(|(id, _)| id).collect();
            let hits = final_drops.iter().filter(|id| corrupted.contains(id.as_str())).count();
            let precision = hits as f64 / final_drops.len().max(1) as f64;
            println!(
                "seed {seed} {label:5} mIoU {miou:6.2} (simple {ms:6.2} complex {mc:6.2})  drops/step {:.2}  final drops {} precision {precision:.2} (base {base_rate:.2})  {:.0}s",
                dropped as f64 / reports.len() as f64,
                final_drops.len(),
                start.elapsed().as_secs_f64()
            );
            if !trainer.evals.is_empty() {
                let curve: Vec<String> = trainer
                    .evals
                    .iter()
                    .map(|e| format!("{}:{:.1}", e.t, e.miou.unwrap_or(0.0) * 100.0))
                    .collect();
                println!("    curve {}", curve.join(" "));
            }
            match table.iter_mut().find(|(l, _)| l == label) {
                Some(row) => row.1.push(miou),
                None => table.push((label.to_string(), vec![miou])),
            }
        }
    }
    for (label, v) in &table {
        println!("{label:5} mean {:6.2}  {:?}", v.iter().sum::<f64>() / v.len() as f64, v);
    }
    Ok(())
}
