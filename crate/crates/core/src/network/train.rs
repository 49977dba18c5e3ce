use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{NetInput, Sample};
use super::loss::{loss_multiscale, PerceptualExtractor, DEFAULT_LAMBDA_P};
use super::model::forward_tape;
use super::weights::is_state_name;
use super::{ModelConfig, Weights};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::image::{write_all_atomic, Image};
use crate::metrics::MetricReport;
use crate::parallel::par_map;
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate halves after every this many epochs.
    pub halve_every: usize,
    /// Side of the random square training crops; 0 trains on whole images.
    pub crop: usize,
    pub lambda_p: f64,
    pub seed: u64,
    /// Worker threads for validation only.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr: 1e-3,
            halve_every: 8,
            crop: 32,
            lambda_p: DEFAULT_LAMBDA_P,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "lr",
        "halve_every",
        "crop",
        "lambda_p",
        "seed",
        "threads",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.halve_every == 0 {
            return Err(Error::Config("batch_size and halve_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::Config("lr and lambda_p must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.update("epochs", &mut self.epochs)?;
        kv.update("batch_size", &mut self.batch_size)?;
        kv.update("lr", &mut self.lr)?;
        kv.update("halve_every", &mut self.halve_every)?;
        kv.update("crop", &mut self.crop)?;
        kv.update("lambda_p", &mut self.lambda_p)?;
        kv.update("seed", &mut self.seed)?;
        kv.update("threads", &mut self.threads)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("halve_every", self.halve_every);
        kv.set("crop", self.crop);
        kv.set("lambda_p", self.lambda_p);
        kv.set("seed", self.seed);
        kv.set("threads", self.threads);
        kv
    }

    /// Learning rate during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

/// Splits a combined config into model and training parts, rejecting keys
/// that belong to neither.
pub fn parse_configs(kv: &KeyValues) -> Result<(ModelConfig, TrainConfig)> {
    for k in kv.keys() {
        if !ModelConfig::KEYS.contains(&k) && !TrainConfig::KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    let mut m = ModelConfig::default();
    m.apply(kv)?;
    let mut t = TrainConfig::default();
    t.apply(kv)?;
    Ok((m, t))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lr: f64,
}

pub fn log_to_jsonl(log: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("training log: {e}"))))
        .collect()
}

/// Estimates at every scale, finest first, for already-prepared inputs.
pub fn predict(w: &Weights, cfg: &ModelConfig, input: &NetInput) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let p = w.bind(&mut tape, false);
    let x = input.bind(&mut tape);
    let preds = forward_tape(&mut tape, &p, cfg, &x)?;
    Ok(preds.iter().map(|pr| tape.value(pr.estimate).clone()).collect())
}

/// Sharp mid-exposure estimate of one scene.
pub fn deblur_image(
    w: &Weights,
    cfg: &ModelConfig,
    blur: &Image,
    events: &crate::events::EventStream,
) -> Result<Image> {
    let input = NetInput::prepare(blur, events, cfg)?;
    let out = predict(w, cfg, &input)?;
    Image::from_tensor(&out[0])
}

/// PSNR and SSIM of the finest-scale estimate against ground truth.
pub fn evaluate(w: &Weights, cfg: &ModelConfig, samples: &[Sample], threads: usize) -> Result<MetricReport> {
    let estimates = par_map(samples, threads, |s| -> Result<Image> {
        Image::from_tensor(&predict(w, cfg, &s.input)?[0])
    });
    let mut report = MetricReport::default();
    for (s, est) in samples.iter().zip(estimates) {
        report.push(s.name.clone(), &est?, &s.gt_image()?)?;
    }
    Ok(report)
}

/// Metrics of the unprocessed blurry inputs.
pub fn evaluate_blur(samples: &[Sample]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for s in samples {
        report.push(s.name.clone(), &s.blur_image()?, &s.gt_image()?)?;
    }
    Ok(report)
}

/// Adam moments per parameter name.
#[derive(Clone, Debug, PartialEq)]
struct Adam {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl Adam {
    fn new(w: &Weights) -> Self {
        let zeros: BTreeMap<String, Tensor> = w
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, w: &mut Weights, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (name, param) in w.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for {name:?}")))?;
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            for (((p, &gi), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Model, optimizer state and progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: ModelConfig,
    hyper: TrainConfig,
    weights: Weights,
    adam: Adam,
    epochs_done: usize,
    extractor: PerceptualExtractor,
}

impl Trainer {
    pub fn new(cfg: &ModelConfig, hyper: &TrainConfig) -> Result<Self> {
        hyper.validate()?;
        let weights = Weights::init(cfg)?;
        Ok(Self::with_weights(cfg, hyper, weights))
    }

    pub fn with_weights(cfg: &ModelConfig, hyper: &TrainConfig, weights: Weights) -> Self {
        Self {
            cfg: cfg.clone(),
            hyper: hyper.clone(),
            adam: Adam::new(&weights),
            weights,
            epochs_done: 0,
            extractor: PerceptualExtractor::new(cfg.image_channels),
        }
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_weights(self) -> Weights {
        self.weights
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Weights, Adam moments, step count and completed epochs.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.weights.to_named();
        for (n, t) in &self.adam.m {
            out.push((format!("adam.m.{n}"), t.clone()));
        }
        for (n, t) in &self.adam.v {
            out.push((format!("adam.v.{n}"), t.clone()));
        }
        out.push(("train.step".into(), Tensor::scalar(self.adam.step as f64)));
        out.push(("train.epoch".into(), Tensor::scalar(self.epochs_done as f64)));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_tensors())
    }

    /// Restores a state written by [`Trainer::save`].
    pub fn load(path: impl AsRef<Path>, cfg: &ModelConfig, hyper: &TrainConfig) -> Result<Self> {
        hyper.validate()?;
        let named = read_checkpoint(path)?;
        let mut params = Vec::new();
        let mut state: BTreeMap<String, Tensor> = BTreeMap::new();
        for (n, t) in named {
            if is_state_name(&n) {
                state.insert(n, t);
            } else {
                params.push((n, t));
            }
        }
        let weights = Weights::from_named(cfg, params)?;
        let mut adam = Adam::new(&weights);
        for (n, t) in weights.iter() {
            for (prefix, slot) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
                let key = format!("{prefix}{n}");
                let s = state
                    .remove(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {key:?}")))?;
                if s.shape() != t.shape() {
                    return Err(Error::Shape(format!("{key:?} has shape {:?}", s.shape())));
                }
                slot.insert(n.to_string(), s);
            }
        }
        let scalar = |state: &mut BTreeMap<String, Tensor>, key: &str| -> Result<u64> {
            let t = state
                .remove(key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {key:?}")))?;
            let v = if t.len() == 1 { t.item() } else { -1.0 };
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Parse(format!("{key:?} is not a count")));
            }
            Ok(v as u64)
        };
        adam.step = scalar(&mut state, "train.step")?;
        let epochs_done = scalar(&mut state, "train.epoch")? as usize;
        if let Some(extra) = state.keys().next() {
            return Err(Error::Config(format!("unexpected checkpoint entry {extra:?}")));
        }
        Ok(Self {
            cfg: cfg.clone(),
            hyper: hyper.clone(),
            weights,
            adam,
            epochs_done,
            extractor: PerceptualExtractor::new(cfg.image_channels),
        })
    }

    /// Loss and gradients of one batch; no update.
    pub fn loss_and_grads(&self, input: &NetInput, gt: &Tensor) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let p = self.weights.bind(&mut tape, true);
        let x = input.bind(&mut tape);
        let gt = tape.constant(gt.clone());
        let preds = forward_tape(&mut tape, &p, &self.cfg, &x)?;
        let loss = loss_multiscale(&mut tape, &preds, gt, self.hyper.lambda_p, &self.extractor)?;
        let value = tape.value(loss.total).item();
        let mut grads = tape.backward(loss.total)?;
        let named = p
            .iter()
            .map(|(n, v)| (n.to_string(), grads.take(v).expect("leaf gradient")))
            .collect();
        Ok((value, named))
    }

    /// One pass over `data` in a shuffled order drawn from `(seed, epoch)`.
    /// Returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.epochs_done;
        let lr = self.hyper.lr_at(epoch);
        let mut rng = epoch_rng(self.hyper.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(self.hyper.batch_size).enumerate() {
            let (input, gt) = self.batch(data, idx, &mut rng)?;
            let diverged = |value| Error::NonFiniteLoss { epoch, batch: b, value };
            let (loss, grads) = match self.loss_and_grads(&input, &gt) {
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            self.adam.update(&mut self.weights, &grads, lr)?;
            total += loss;
            batches += 1;
        }
        self.epochs_done += 1;
        Ok(total / batches as f64)
    }

    /// Stacks the scenes `idx`, each cropped at a random offset shared by
    /// its inputs and ground truth.
    fn batch(&self, data: &[Sample], idx: &[usize], rng: &mut ChaCha8Rng) -> Result<(NetInput, Tensor)> {
        let mut inputs = Vec::with_capacity(idx.len());
        let mut gts = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &data[i];
            let [_, _, h, w] = s.gt.dims4()?;
            let size = self.hyper.crop;
            if size == 0 || (size >= h && size >= w) {
                inputs.push(s.input.clone());
                gts.push(s.gt.clone());
                continue;
            }
            if size > h || size > w {
                return Err(Error::Config(format!("crop {size} exceeds image {h}x{w}")));
            }
            let y = rng.gen_range(0..=h - size);
            let x = rng.gen_range(0..=w - size);
            inputs.push(s.input.crop(y, x, size)?);
            gts.push(s.gt.crop(y, x, size, size)?);
        }
        let refs: Vec<&NetInput> = inputs.iter().collect();
        let gt_refs: Vec<&Tensor> = gts.iter().collect();
        Ok((NetInput::stack(&refs)?, Tensor::cat_batch(&gt_refs)?))
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Final state of a [`train_toy`] run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub weights: Weights,
    /// Weights of the epoch with the highest validation PSNR.
    pub best: Weights,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
}

pub const LATEST_CHECKPOINT: &str = "latest.edkp";
pub const BEST_CHECKPOINT: &str = "best.edkp";
pub const FINAL_WEIGHTS: &str = "weights.edkp";
pub const TRAIN_LOG: &str = "metrics.jsonl";

/// Trains for `hyper.epochs` epochs, validating on `val` after each.
///
/// With `out_dir`, the full trainer state goes to `latest.edkp` after every
/// epoch, the best-validation weights to `best.edkp`, the final weights to
/// `weights.edkp` and the log to `metrics.jsonl`. With `resume`, training
/// continues from `latest.edkp` and its log.
pub fn train_toy(
    train: &[Sample],
    val: &[Sample],
    cfg: &ModelConfig,
    hyper: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    hyper.validate()?;
    let latest = out_dir.map(|d| d.join(LATEST_CHECKPOINT));
    let (mut trainer, mut log) = match (&latest, resume) {
        (Some(path), true) if path.exists() => {
            let t = Trainer::load(path, cfg, hyper)?;
            let log_path = out_dir.expect("set with latest").join(TRAIN_LOG);
            let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = log_from_jsonl(&text)?;
            log.truncate(t.epochs_done());
            (t, log)
        }
        _ => (Trainer::new(cfg, hyper)?, Vec::new()),
    };
    let mut best: Option<(usize, f64, Weights)> = None;
    if let Some(d) = out_dir {
        let p = d.join(BEST_CHECKPOINT);
        if resume && p.exists() {
            let at = log.iter().filter_map(|r| r.psnr.map(|v| (r.epoch, v))).fold(
                None,
                |acc: Option<(usize, f64)>, (e, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((e, v)),
                },
            );
            if let Some((e, v)) = at {
                best = Some((e, v, Weights::load(&p, cfg)?));
            }
        }
    }
    while trainer.epochs_done() < hyper.epochs {
        let epoch = trainer.epochs_done();
        let lr = hyper.lr_at(epoch);
        let loss = trainer.train_epoch(train)?;
        let (psnr, ssim) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(trainer.weights(), cfg, val, hyper.threads)?;
            (Some(r.mean_psnr()), Some(r.mean_ssim()))
        };
        log::info!(
            "epoch {epoch}: loss {loss:.6}, lr {lr:.2e}, val psnr {}",
            psnr.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
        log.push(EpochRecord {
            epoch,
            loss,
            psnr,
            ssim,
            lr,
        });
        if let Some(v) = psnr {
            if best.as_ref().is_none_or(|(_, bv, _)| v > *bv) {
                best = Some((epoch, v, trainer.weights().clone()));
                if let Some(d) = out_dir {
                    trainer.weights().save(d.join(BEST_CHECKPOINT))?;
                }
            }
        }
        if let Some(d) = out_dir {
            trainer.save(d.join(LATEST_CHECKPOINT))?;
            write_all_atomic(&d.join(TRAIN_LOG), log_to_jsonl(&log)?.as_bytes())?;
        }
    }
    if let Some(d) = out_dir {
        trainer.weights().save(d.join(FINAL_WEIGHTS))?;
        write_all_atomic(&d.join(TRAIN_LOG), log_to_jsonl(&log)?.as_bytes())?;
    }
    let weights = trainer.into_weights();
    let (best_epoch, best) = match best {
        Some((e, _, w)) => (Some(e), w),
        None => (None, weights.clone()),
    };
    Ok(TrainOutcome {
        weights,
        best,
        best_epoch,
        log,
    })
}
