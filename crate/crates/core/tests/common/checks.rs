//! Whole-model checks shared by the integration and acceptance targets.

use rand::RngExt;
use reef_lora::lora::{init_lora, LoraConfig, Target};
use reef_lora::model::Model;
use reef_lora::rng;
use reef_lora::tensor::{finite_diff_check, GradCheckReport, Tensor};
use reef_lora::train::{evaluate_samples, train_samples, TrainConfig, TrainOutcome};
use reef_lora::vit::ModelConfig;

use super::fixtures;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 8,
        channels: 3,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 4.0,
        num_classes: 8,
    }
}

/// Central-difference check of the batch BCE loss over every trainable
/// tensor of a tiny rank-2 model. `B` is randomized so adapter gradients
/// are non-trivial.
pub fn tiny_model_gradcheck(seed: u64) -> GradCheckReport {
    let cfg = tiny_config();
    let lora = LoraConfig::with_rank(2);
    let mut model: Model<f64> = Model::new(&cfg, &lora, seed).unwrap();
    let mut r = rng::stream(seed, "gradcheck.model");
    let perturbed: Vec<Tensor<f64>> = model
        .trainable_tensors()
        .into_iter()
        .map(|t| {
            let noise = rng::normal::<f64>(&mut r, t.len(), 0.2);
            let data = t.data().iter().zip(noise).map(|(a, b)| a + b).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap().with_requires_grad(true)
        })
        .collect();
    model.set_trainable(&perturbed).unwrap();

    let samples = fixtures::samples::<f64>(2, 32, seed);
    let batch: Vec<(&Tensor<f64>, Vec<f64>)> = samples
        .iter()
        .map(|s| (&s.image, s.labels.as_scalars()))
        .collect();
    let grads = model.batch_grad(&batch).unwrap().grads;
    let mut params = model.trainable_tensors();
    for (p, g) in params.iter_mut().zip(&grads) {
        p.zero_grad();
        p.accumulate_grad(g).unwrap();
    }
    let f = |ps: &[Tensor<f64>]| {
        let mut m = model.clone();
        m.set_trainable(ps).unwrap();
        m.batch_grad(&batch).unwrap().loss
    };
    finite_diff_check(f, &params, 1e-5, 1e-3)
}

/// Worst relative gap `‖merged·x − adapter(x)‖∞ / ‖adapter(x)‖∞` over random
/// layers with random `d, k, r, alpha` and non-zero `B`.
pub fn lora_merge_worst(trials: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut r = rng::stream(seed, &format!("lora.merge.{t}"));
        let d = r.random_range(2..48usize);
        let k = r.random_range(2..48usize);
        let rank = r.random_range(1..d.min(k));
        let alpha = r.random_range(0.25..64.0);
        let config = LoraConfig { rank, alpha: Some(alpha), targets: vec![Target::Query] };
        let w0 = Tensor::new(vec![d, k], rng::normal(&mut r, d * k, 0.5)).unwrap();
        let bias = r
            .random_bool(0.5)
            .then(|| Tensor::new(vec![d], rng::normal(&mut r, d, 0.5)).unwrap());
        let mut layer = init_lora::<f64>(w0, bias, &config, seed + t as u64).unwrap();
        layer.b = Tensor::new(vec![d, rank], rng::normal(&mut r, d * rank, 0.1)).unwrap();
        let x = Tensor::new(vec![k], rng::normal(&mut r, k, 1.0)).unwrap();
        let adapted: Tensor<f64> = layer.forward(&x).unwrap();
        let merged = layer.merged_forward(&x).unwrap();
        let gap = adapted
            .data()
            .iter()
            .zip(merged.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap / adapted.max_abs().max(f64::MIN_POSITIVE));
    }
    worst
}

/// Fresh (B = 0) adapters against the unwrapped backbone: logits must be
/// bitwise equal on every sample.
pub fn zero_adapters_bit_identical(rank: usize, seed: u64) -> bool {
    let cfg = tiny_config();
    let model: Model<f64> = Model::new(&cfg, &LoraConfig::with_rank(rank), seed).unwrap();
    let bare = model.unwrapped();
    fixtures::samples::<f64>(4, 32, seed).iter().all(|s| {
        let a = model.logits(&s.image).unwrap();
        let b = bare.logits(&s.image).unwrap();
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

/// Small enough to train thousands of iterations in seconds; embed 32 admits
/// ranks up to 31.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        patch_size: 16,
        channels: 3,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 4.0,
        num_classes: 8,
    }
}

pub fn toy_train_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        max_iterations: iterations,
        eval_interval: iterations.max(1),
        checkpoint_interval: iterations.max(1),
        ..TrainConfig::default()
    }
}

pub struct OverfitRun {
    pub first_perfect: Option<usize>,
    pub final_match_ratio: f64,
    pub outcome: TrainOutcome<f64>,
}

/// Trains the toy model on 8 distinct tiles, evaluating the training set
/// every `probe` iterations (continuing from the previous checkpoint).
pub fn overfit(iterations: usize, probe: usize, seed: u64) -> OverfitRun {
    let cfg = toy_config();
    let lora = LoraConfig::with_rank(4);
    let tiles = fixtures::samples::<f64>(8, 64, seed);
    let train = TrainConfig { seed, ..toy_train_config(iterations) };
    let outcome = train_samples(&cfg, &lora, &TrainConfig { eval_interval: probe, ..train }, &tiles, &tiles, None).unwrap();
    let first_perfect = outcome.val_history.iter().find(|v| v.match_ratio == 1.0).map(|v| v.iter);
    let final_match_ratio = evaluate_samples(&outcome.latest.model, &tiles, 0.5).unwrap().match_ratio;
    OverfitRun { first_perfect, final_match_ratio, outcome }
}
