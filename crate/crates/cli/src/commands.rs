use std::path::{Path, PathBuf};

use anyhow::Context;
use evdeblur_core::config::KeyValues;
use evdeblur_core::edi::{estimate_c, reconstruct_at, reconstruct_mid, EdiParams};
use evdeblur_core::events::{read_events, voxelize};
use evdeblur_core::gradsuite::{run_all, run_op, OpCheck};
use evdeblur_core::image::write_all_atomic;
use evdeblur_core::network::{
    ablate, deblur_image, evaluate, load_samples, parse_configs, parse_grid, train_toy, ModelConfig, Sample, Weights,
    BEST_CHECKPOINT, FINAL_WEIGHTS, LATEST_CHECKPOINT, TRAIN_LOG,
};
use evdeblur_core::parallel::par_map;
use evdeblur_core::simulator::{make_dataset, DatasetSpec, Manifest};
use evdeblur_core::tensor::write_checkpoint;
use evdeblur_core::{Error, Image, MetricReport};

use crate::args::{Cli, Command};

/// Model configuration written beside trained weights.
pub const MODEL_CONFIG_FILE: &str = "model.cfg";

/// Contrast thresholds tried by `edi --estimate-c`.
pub fn contrast_grid() -> Vec<f64> {
    (1..=100).map(|i| i as f64 * 0.005).collect()
}

/// What a command did, for its run manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config: KeyValues,
    pub outputs: Vec<PathBuf>,
    /// Set when the command ran to completion but its checks failed.
    pub failure: Option<String>,
}

/// A command that completed and wrote its outputs but reports failure.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn no_config(kv: &KeyValues, cmd: &str) -> anyhow::Result<()> {
    if kv.keys().next().is_some() {
        return Err(Error::Config(format!("{cmd} takes no configuration file")).into());
    }
    Ok(())
}

/// Makes `--seed` the only source of the seed.
fn pin_seed(kv: &mut KeyValues, seed: u64) -> anyhow::Result<()> {
    if let Some(s) = kv.get::<u64>("seed")? {
        if s != seed {
            return Err(Error::Config(format!("config seed {s} differs from --seed {seed}")).into());
        }
    }
    kv.set("seed", seed);
    Ok(())
}

fn read_manifest(path: &Path) -> anyhow::Result<Manifest> {
    Ok(Manifest::read(path)?)
}

fn model_config(kv: &KeyValues, checkpoint: &Path) -> anyhow::Result<ModelConfig> {
    if kv.keys().next().is_some() {
        return Ok(ModelConfig::from_kv(kv)?);
    }
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_CONFIG_FILE);
    let kv = KeyValues::read(&path).with_context(|| "no --config given and no model.cfg beside the checkpoint")?;
    Ok(ModelConfig::from_kv(&kv)?)
}

fn load_split(path: &Path, cfg: &ModelConfig, threads: usize) -> anyhow::Result<Vec<Sample>> {
    let m = read_manifest(path)?;
    log::info!("loading {} scenes from {}", m.entries.len(), path.display());
    Ok(load_samples(&m, cfg, threads)?)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_all_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Runs `cli.command` with configuration `kv` and output location `out`.
pub fn execute(cli: &Cli, mut kv: KeyValues, out: &Path) -> anyhow::Result<Outcome> {
    let seed = cli.global.seed;
    let threads = cli.global.threads.max(1);
    let mut outcome = Outcome::default();
    match &cli.command {
        Command::Simulate => {
            pin_seed(&mut kv, seed)?;
            let spec = DatasetSpec::from_kv(&kv)?;
            let ds = make_dataset(
                &spec.scene_configs(),
                spec.contrast_c,
                spec.train_fraction,
                out,
                threads,
            )?;
            println!(
                "wrote {} training and {} test scenes to {}",
                ds.train.entries.len(),
                ds.test.entries.len(),
                out.display()
            );
            outcome.config = spec.to_kv();
            outcome.outputs = vec![ds.train_path, ds.test_path, out.join("scenes")];
        }
        Command::Voxelize { events, bins } => {
            no_config(&kv, "voxelize")?;
            let stream = read_events(events)?;
            let grid = voxelize(&stream, *bins)?;
            write_checkpoint(out, &[("voxel".to_string(), grid.to_tensor())])?;
            println!("{} events into {} bins, mass {}", stream.len(), bins, grid.mass());
            outcome.outputs = vec![out.to_path_buf()];
        }
        Command::Edi {
            blur,
            events,
            c,
            t,
            mid,
            samples,
            ..
        } => {
            no_config(&kv, "edi")?;
            let blur = Image::read_pnm(blur)?;
            let stream = read_events(events)?;
            let c = match c {
                Some(c) => *c,
                None => estimate_c(&blur, &stream, &contrast_grid(), *samples)?,
            };
            let params = EdiParams::new(c).with_samples(*samples);
            let image = match (t, mid) {
                (Some(t), false) => reconstruct_at(&blur, &stream, &params, *t)?,
                _ => reconstruct_mid(&blur, &stream, &params)?,
            };
            image.write_pnm(out)?;
            println!("c = {c}");
            outcome.outputs = vec![out.to_path_buf()];
        }
        Command::Train { train, val, resume } => {
            pin_seed(&mut kv, seed)?;
            let (model, mut hyper) = parse_configs(&kv)?;
            hyper.threads = threads;
            let train_set = load_split(train, &model, threads)?;
            let val_set = match val {
                Some(v) => load_split(v, &model, threads)?,
                None => Vec::new(),
            };
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write_text(&out.join(MODEL_CONFIG_FILE), &model.to_kv().to_text())?;
            let run = train_toy(&train_set, &val_set, &model, &hyper, Some(out), *resume)?;
            if let Some(last) = run.log.last() {
                match last.psnr {
                    Some(p) => println!("epoch {} loss {:.6} val PSNR {:.3} dB", last.epoch, last.loss, p),
                    None => println!("epoch {} loss {:.6}", last.epoch, last.loss),
                }
            }
            let mut config = model.to_kv();
            config.merge(&hyper.to_kv());
            outcome.config = config;
            outcome.outputs = [
                MODEL_CONFIG_FILE,
                LATEST_CHECKPOINT,
                BEST_CHECKPOINT,
                FINAL_WEIGHTS,
                TRAIN_LOG,
            ]
            .iter()
            .map(|f| out.join(f))
            .filter(|p| p.exists())
            .collect();
        }
        Command::Infer {
            checkpoint,
            blur,
            events,
        } => {
            let cfg = model_config(&kv, checkpoint)?;
            let weights = Weights::load(checkpoint, &cfg)?;
            let image = deblur_image(&weights, &cfg, &Image::read_pnm(blur)?, &read_events(events)?)?;
            image.write_pnm(out)?;
            outcome.config = cfg.to_kv();
            outcome.outputs = vec![out.to_path_buf()];
        }
        Command::Eval {
            manifest,
            checkpoint,
            c,
            samples,
            ..
        } => {
            let report = match checkpoint {
                Some(ck) => {
                    let cfg = model_config(&kv, ck)?;
                    let weights = Weights::load(ck, &cfg)?;
                    let set = load_split(manifest, &cfg, threads)?;
                    outcome.config = cfg.to_kv();
                    evaluate(&weights, &cfg, &set, threads)?
                }
                None => {
                    no_config(&kv, "eval --edi")?;
                    let m = read_manifest(manifest)?;
                    let c = match c {
                        Some(c) => *c,
                        None => m
                            .contrast_c()?
                            .ok_or_else(|| Error::Config("manifest records no contrast threshold; pass --c".into()))?,
                    };
                    log::info!("contrast threshold {c}");
                    eval_edi(&m, &EdiParams::new(c).with_samples(*samples), threads)?
                }
            };
            write_text(out, &report.to_jsonl()?)?;
            print!("{}", report.summary_table());
            outcome.outputs = vec![out.to_path_buf()];
        }
        Command::Ablate { train, test } => {
            pin_seed(&mut kv, seed)?;
            let (base, mut hyper, rows) = parse_grid(&kv)?;
            hyper.threads = threads;
            let train_set = load_split(train, &base, threads)?;
            let test_set = load_split(test, &base, threads)?;
            let table = ablate(&train_set, &test_set, &base, &rows, &hyper)?;
            let mut json = table.to_json()?;
            json.push('\n');
            write_text(out, &json)?;
            print!("{}", table.to_text());
            let mut config = base.to_kv();
            config.merge(&hyper.to_kv());
            config.set(
                "rows",
                rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join(","),
            );
            outcome.config = config;
            outcome.outputs = vec![out.to_path_buf()];
        }
        Command::Gradcheck { op, .. } => {
            no_config(&kv, "gradcheck")?;
            let checks = match op {
                Some(op) => vec![run_op(op, seed)?],
                None => run_all(seed)?,
            };
            for r in &checks {
                println!(
                    "{} {:<16} max relative error {:.3e} over {} entries",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.op,
                    r.max_rel_error,
                    r.checked
                );
            }
            let mut json = serde_json::to_string_pretty(&checks)?;
            json.push('\n');
            write_text(out, &json)?;
            let failed: Vec<&str> = checks
                .iter()
                .filter(|r| !r.passed)
                .map(|r: &OpCheck| r.op.as_str())
                .collect();
            if !failed.is_empty() {
                outcome.failure = Some(format!("gradient check failed for {}", failed.join(", ")));
            }
            outcome.outputs = vec![out.to_path_buf()];
        }
        Command::Replay { .. } => unreachable!("replay is resolved before execution"),
    }
    Ok(outcome)
}

fn eval_edi(m: &Manifest, params: &EdiParams, threads: usize) -> anyhow::Result<MetricReport> {
    let results = par_map(
        &m.entries,
        threads,
        |e| -> evdeblur_core::Result<(String, Image, Image)> {
            let blur = Image::read_pnm(&e.blur)?;
            let stream = read_events(&e.events)?;
            let est = reconstruct_mid(&blur, &stream, params)?;
            Ok((e.name(), est, Image::read_pnm(&e.gt)?))
        },
    );
    let mut report = MetricReport::default();
    for r in results {
        let (name, est, gt) = r?;
        report.push(name, &est, &gt)?;
    }
    if report.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    Ok(report)
}
