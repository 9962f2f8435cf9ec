//! Optimization, evaluation and the rank sweep.

pub mod adamw;
pub mod checkpoint;
pub mod sweep;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::raster::{read_rgb8, to_tensor};
use crate::data::stats::RecordError;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::head::{predict_labels, LabelVector, DEFAULT_THRESHOLD};
use crate::lora::LoraConfig;
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::rng;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::vit::ModelConfig;

pub use adamw::{adamw_step, AdamHyper, AdamState};
pub use checkpoint::Checkpoint;
pub use sweep::{rank_sweep, SweepRow, SweepTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    /// Validate every this many iterations (and after the last one).
    pub eval_interval: usize,
    /// Write the latest checkpoint every this many iterations (and after the
    /// last one).
    pub checkpoint_interval: usize,
    pub threshold: f64,
    /// Abort on an unreadable tile instead of skipping it.
    pub strict: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-6,
            weight_decay: 5e-4,
            batch_size: 16,
            max_iterations: 30_000,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            eval_interval: 1000,
            checkpoint_interval: 1000,
            threshold: DEFAULT_THRESHOLD,
            strict: true,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.eps_adam > 0.0) {
            return bad("train.eps_adam must be positive".into());
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return bad("train.eval_interval and train.checkpoint_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("train.threshold must lie in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }
}

/// A decoded tile with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub labels: LabelVector,
    pub tile_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSet<T> {
    pub samples: Vec<Sample<T>>,
    pub skipped: Vec<RecordError>,
}

/// Decodes every tile of a manifest. A tile whose size differs from the
/// model geometry is always an error; an unreadable tile is skipped unless
/// `strict`.
pub fn load_samples<T: Scalar>(manifest: &Manifest, config: &ModelConfig, strict: bool) -> Result<LoadedSet<T>> {
    if manifest.classes.len() != config.num_classes {
        return Err(Error::Config(format!(
            "manifest declares {} classes, model.num_classes is {}",
            manifest.classes.len(),
            config.num_classes
        )));
    }
    let decoded: Vec<(PathBuf, Result<image::RgbImage>)> = manifest
        .records
        .par_iter()
        .map(|r| {
            let path = manifest.resolve(r);
            let img = read_rgb8(&path);
            (path, img)
        })
        .collect();
    let size = config.image_size as u32;
    let mut out = LoadedSet {
        samples: Vec::with_capacity(decoded.len()),
        skipped: Vec::new(),
    };
    for ((path, img), rec) in decoded.into_iter().zip(&manifest.records) {
        match img {
            Ok(img) => {
                if img.dimensions() != (size, size) || config.channels != 3 {
                    return Err(Error::Geometry(format!(
                        "{}: tile is {}×{}×3 but the model expects {size}×{size}×{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        config.channels
                    )));
                }
                out.samples.push(Sample {
                    image: to_tensor(&img),
                    labels: rec.labels.clone(),
                    tile_path: path,
                });
            }
            Err(e) if strict => return Err(e),
            Err(e) => out.skipped.push(RecordError {
                tile_path: path,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Binarized predictions for every sample, in order.
pub fn predict<T: Scalar>(model: &Model<T>, samples: &[Sample<T>], threshold: f64) -> Result<Vec<LabelVector>> {
    samples
        .par_iter()
        .map(|s| Ok(predict_labels(&model.probabilities(&s.image)?, T::lit(threshold))))
        .collect()
}

pub fn evaluate_samples<T: Scalar>(model: &Model<T>, samples: &[Sample<T>], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let preds = predict(model, samples, threshold)?;
    let truths: Vec<&LabelVector> = samples.iter().map(|s| &s.labels).collect();
    let truths: Vec<&[bool]> = truths.iter().map(|l| l.0.as_slice()).collect();
    MetricsReport::from_predictions(&preds, &truths)
}

/// Evaluates a checkpoint on a manifest. Every tile is decoded and checked
/// against the model geometry before any inference runs.
pub fn evaluate<T: Scalar>(ckpt: &Checkpoint<T>, manifest: &Manifest, threshold: f64) -> Result<MetricsReport> {
    let set = load_samples(manifest, &ckpt.model.config, true)?;
    evaluate_samples(&ckpt.model, &set.samples, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValEntry {
    pub iter: usize,
    pub match_ratio: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub latest: Checkpoint<T>,
    pub best: Option<Checkpoint<T>>,
    pub log: Vec<LogEntry>,
    pub val_history: Vec<ValEntry>,
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
    pub fn val_log(&self) -> PathBuf {
        self.dir.join("val_log.jsonl")
    }
}

/// Endless sequence of per-epoch shuffles of `0..n`.
struct EpochSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order
                        .shuffle(&mut rng::stream(self.seed, &format!("train.shuffle.{}", self.epoch)));
                    self.epoch += 1;
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn append_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("log rows serialize");
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Trains a freshly initialized model on in-memory samples.
pub fn train_samples<T: Scalar>(
    model_config: &ModelConfig,
    lora_config: &LoraConfig,
    config: &TrainConfig,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    out: Option<&RunDir>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let model = Model::new(model_config, lora_config, config.seed)?;
    let optimizer = AdamState::new(model.params());
    let mut ckpt = Checkpoint {
        model,
        train: config.clone(),
        optimizer,
        iteration: 0,
        best_val_match_ratio: None,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir.dir).map_err(|e| Error::io(&dir.dir, e))?;
        for p in [dir.log(), dir.val_log()] {
            std::fs::write(&p, b"").map_err(|e| Error::io(&p, e))?;
        }
    }
    let hyper = AdamHyper::from(config);
    let targets: Vec<Vec<T>> = train_set.iter().map(|s| s.labels.as_scalars()).collect();
    let mut sampler = EpochSampler::new(train_set.len(), config.seed);
    let mut log = Vec::with_capacity(config.max_iterations);
    let mut pending_log = Vec::new();
    let mut val_history = Vec::new();
    let mut best = None;
    for iter in 1..=config.max_iterations {
        let idx = sampler.next_batch(config.batch_size);
        let batch: Vec<(&Tensor<T>, Vec<T>)> = idx
            .iter()
            .map(|&i| (&train_set[i].image, targets[i].clone()))
            .collect();
        let model = &mut ckpt.model;
        model.zero_grad();
        let bg = model.batch_grad(&batch)?;
        if !bg.loss.is_finite() || bg.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: iter,
                detail: format!(
                    "loss {} on tiles {}",
                    bg.loss.as_f64(),
                    idx.iter()
                        .map(|&i| train_set[i].tile_path.display().to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            });
        }
        model.accumulate_grads(&bg.grads)?;
        let mut params = model.params_mut();
        adamw_step(&mut params, &mut ckpt.optimizer, &hyper)?;
        model.zero_grad();
        ckpt.iteration = iter as u64;
        let entry = LogEntry {
            iter,
            loss: bg.loss.as_f64(),
            lr: config.learning_rate,
        };
        log.push(entry);
        pending_log.push(entry);

        let last = iter == config.max_iterations;
        if iter % config.eval_interval == 0 || last {
            let report = evaluate_samples(&ckpt.model, val_set, config.threshold)?;
            let v = ValEntry {
                iter,
                match_ratio: report.match_ratio,
                micro_f1: report.micro_f1,
                macro_f1: report.macro_f1,
            };
            if ckpt.best_val_match_ratio.is_none_or(|b| v.match_ratio > b) {
                ckpt.best_val_match_ratio = Some(v.match_ratio);
                best = Some(ckpt.clone());
                if let Some(dir) = out {
                    ckpt.save(&dir.best())?;
                }
            }
            if let Some(dir) = out {
                append_jsonl(&dir.val_log(), std::slice::from_ref(&v))?;
            }
            val_history.push(v);
        }
        if let Some(dir) = out {
            if iter % config.checkpoint_interval == 0 || last {
                append_jsonl(&dir.log(), &pending_log)?;
                pending_log.clear();
                ckpt.save(&dir.latest())?;
            }
        }
    }
    if let Some(dir) = out {
        if config.max_iterations == 0 {
            ckpt.save(&dir.latest())?;
        }
    }
    Ok(TrainOutcome {
        latest: ckpt,
        best,
        log,
        val_history,
    })
}

/// Trains from manifests. Tiles are decoded up front.
pub fn train<T: Scalar>(
    model_config: &ModelConfig,
    lora_config: &LoraConfig,
    config: &TrainConfig,
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    out: Option<&RunDir>,
) -> Result<(TrainOutcome<T>, Vec<RecordError>)> {
    if train_manifest.is_empty() || val_manifest.is_empty() {
        return Err(Error::Data("train and validation manifests must be non-empty".into()));
    }
    let tr = load_samples::<T>(train_manifest, model_config, config.strict)?;
    let va = load_samples::<T>(val_manifest, model_config, config.strict)?;
    let mut skipped = tr.skipped;
    skipped.extend(va.skipped);
    let outcome = train_samples(model_config, lora_config, config, &tr.samples, &va.samples, out)?;
    Ok((outcome, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampler_visits_each_sample_once_per_epoch() {
        let mut s = EpochSampler::new(5, 9);
        let mut a = s.next_batch(5);
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        let b = s.next_batch(7);
        let mut again = EpochSampler::new(5, 9);
        again.next_batch(5);
        assert_eq!(again.next_batch(7), b);
    }
}
