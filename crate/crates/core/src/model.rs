//! The adapted classifier: frozen backbone, low-rank adapters, trainable
//! linear head.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::head::{sigmoid_probs, BCE_EPS};
use crate::lora::{init_block_adapters, BlockAdapters, LoraConfig, LoraLinear, ParamBudget};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{self, Backbone, Encoding, Linear, ModelConfig, Param, INIT_STD};

/// Parameter tree of the full classifier, generic over the slot type.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraVit<P> {
    pub backbone: Backbone<P>,
    pub adapters: Vec<BlockAdapters<P>>,
    pub head: Linear<P>,
}

impl<P> LoraVit<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> LoraVit<Q> {
        LoraVit {
            backbone: self.backbone.map(f),
            adapters: self.adapters.iter().map(|a| a.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        self.backbone.for_each_mut(f);
        for a in &mut self.adapters {
            a.for_each_mut(f);
        }
        self.head.for_each_mut(f);
    }

    /// Slots in canonical order: backbone, adapters, head.
    pub fn slots(&self) -> Vec<&P> {
        let mut out = Vec::new();
        let _ = self.map(&mut |p| out.push(p));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |p| out.push(p));
        out
    }
}

/// Forward outputs on a tape.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[1×num_classes]`
    pub logits: Var,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub lora: LoraConfig,
    pub weights: LoraVit<Param<T>>,
}

/// Per-batch loss and trainable-parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    pub loss: T,
    /// One entry per trainable parameter, canonical order.
    pub grads: Vec<Vec<T>>,
    pub logits: Vec<Vec<T>>,
}

impl<T: Scalar> Model<T> {
    /// Random frozen backbone, fresh adapters (`B = 0`) and a trainable head.
    pub fn new(config: &ModelConfig, lora: &LoraConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if lora.rank > 0 {
            lora.validate(config)?;
        }
        let backbone = vit::init_params(config, seed)?;
        let adapters = (0..config.depth)
            .map(|i| {
                if lora.rank == 0 {
                    Ok(BlockAdapters {
                        query: None,
                        key: None,
                        value: None,
                        output: None,
                        fc1: None,
                        fc2: None,
                    })
                } else {
                    init_block_adapters(config, lora, i, seed)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (c, d) = (config.num_classes, config.embed_dim);
        let w = rng::truncated_normal(&mut rng::stream(seed, "head.weight"), c * d, INIT_STD);
        let head = Linear {
            weight: Param::new(
                "head.weight",
                Tensor::new(vec![c, d], w)?.with_requires_grad(true),
            ),
            bias: Param::new("head.bias", Tensor::zeros(&[c]).with_requires_grad(true)),
        };
        Ok(Self {
            config: config.clone(),
            lora: lora.clone(),
            weights: LoraVit {
                backbone,
                adapters,
                head,
            },
        })
    }

    /// Rebuilds a model from named tensors in canonical order.
    pub fn from_params(config: &ModelConfig, lora: &LoraConfig, params: Vec<Param<T>>) -> Result<Self> {
        let mut model = Self::new(config, lora, 0)?;
        let slots = model.weights.slots_mut();
        if slots.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameters for this config, found {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.name != p.name || slot.tensor.shape() != p.tensor.shape() {
                return Err(Error::Data(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    slot.name,
                    slot.tensor.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            let rg = slot.tensor.requires_grad();
            slot.tensor = p.tensor.with_requires_grad(rg);
        }
        Ok(model)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.weights.slots()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.weights.slots_mut()
    }

    pub fn trainable(&self) -> Vec<&Param<T>> {
        self.params().into_iter().filter(|p| !p.frozen()).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Param<T>> {
        self.params_mut().into_iter().filter(|p| !p.frozen()).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> LoraVit<Var> {
        self.weights.map(&mut |p| tape.leaf(&p.tensor))
    }

    /// Records the full forward pass for one image.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        vars: &LoraVit<Var>,
        image: &Tensor<T>,
        watch: Option<usize>,
    ) -> Result<Forward> {
        let scale = T::lit(self.lora.scale());
        let adapters = (self.lora.rank > 0).then_some((vars.adapters.as_slice(), scale));
        let encoding = vit::encode(tape, &self.config, &vars.backbone, adapters, image, watch)?;
        let logits = vit::project(tape, encoding.feature, &vars.head, None, T::one())?;
        Ok(Forward { logits, encoding })
    }

    pub fn logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let f = self.forward_on(&mut tape, &vars, image, None)?;
        Ok(tape.value(f.logits).data().to_vec())
    }

    pub fn probabilities(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        Ok(sigmoid_probs(&self.logits(image)?))
    }

    /// Loss and trainable gradients of one sample (batch of size one).
    pub fn sample_grad(&self, image: &Tensor<T>, labels: &[T]) -> Result<(T, Vec<Vec<T>>, Vec<T>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let f = self.forward_on(&mut tape, &vars, image, None)?;
        let loss = tape.bce_with_logits(f.logits, labels, BCE_EPS)?;
        tape.backward(loss)?;
        let mut grads = Vec::new();
        for (p, v) in self.params().into_iter().zip(vars.slots()) {
            if !p.frozen() {
                let g = tape
                    .grad(*v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.tensor.len()]);
                grads.push(g);
            }
        }
        let value = tape.value(loss).data()[0];
        Ok((value, grads, tape.value(f.logits).data().to_vec()))
    }

    /// Mean-over-samples loss and gradients for a batch.
    ///
    /// Samples are differentiated independently (possibly in parallel) and
    /// reduced in batch order, so the result does not depend on the number
    /// of worker threads.
    pub fn batch_grad(&self, batch: &[(&Tensor<T>, Vec<T>)]) -> Result<BatchGrad<T>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let per_sample: Vec<_> = batch
            .par_iter()
            .map(|(img, y)| self.sample_grad(img, y))
            .collect::<Result<Vec<_>>>()?;
        let inv_n = T::one() / T::from_usize_lossy(batch.len());
        let mut loss = T::zero();
        let mut grads: Vec<Vec<T>> = self
            .trainable()
            .iter()
            .map(|p| vec![T::zero(); p.tensor.len()])
            .collect();
        let mut logits = Vec::with_capacity(batch.len());
        for (l, g, z) in per_sample {
            loss = loss + l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a = *a + b * inv_n);
            }
            logits.push(z);
        }
        Ok(BatchGrad {
            loss: loss * inv_n,
            grads,
            logits,
        })
    }

    /// Adds gradients (canonical trainable order) into the parameter slots.
    pub fn accumulate_grads(&mut self, grads: &[Vec<T>]) -> Result<()> {
        let mut trainable = self.trainable_mut();
        if trainable.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} trainable parameters",
                grads.len(),
                trainable.len()
            )));
        }
        for (p, g) in trainable.iter_mut().zip(grads) {
            p.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// SHA-256 over names, shapes and little-endian bytes of frozen tensors.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params().into_iter().filter(|p| p.frozen()) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(p.tensor.len() * T::WIDTH);
            p.tensor.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Counts taken from the instantiated parameters.
    pub fn budget(&self) -> ParamBudget {
        let mut layers: Vec<crate::lora::LayerBudget> = Vec::new();
        let (mut trainable, mut frozen, mut adapter, mut head) = (0, 0, 0, 0);
        for p in self.params() {
            let n = p.tensor.len();
            if p.frozen() {
                frozen += n;
            } else {
                trainable += n;
                if p.name.starts_with("lora.") {
                    adapter += n;
                } else if p.name.starts_with("head.") {
                    head += n;
                }
            }
            layers.push(crate::lora::LayerBudget {
                name: p.name.clone(),
                trainable: if p.frozen() { 0 } else { n },
                frozen: if p.frozen() { n } else { 0 },
            });
        }
        ParamBudget {
            trainable,
            frozen,
            total: trainable + frozen,
            adapter,
            head,
            layers,
        }
    }

    /// Standalone view of one wrapped projection (`name` in query, key,
    /// value, output, fc1, fc2).
    pub fn lora_linear(&self, block: usize, name: &str) -> Option<LoraLinear<T>> {
        let pair = self.weights.adapters.get(block)?.get(name)?;
        let lin = self.base_linear(block, name)?;
        Some(LoraLinear {
            w0: lin.weight.tensor.clone(),
            bias: Some(lin.bias.tensor.clone()),
            a: pair.a.tensor.clone(),
            b: pair.b.tensor.clone(),
            alpha: self.lora.alpha(),
        })
    }

    fn base_linear(&self, block: usize, name: &str) -> Option<&Linear<Param<T>>> {
        let b = self.weights.backbone.blocks.get(block)?;
        Some(match name {
            "query" => &b.query,
            "key" => &b.key,
            "value" => &b.value,
            "output" => &b.output,
            "fc1" => &b.fc1,
            "fc2" => &b.fc2,
            _ => return None,
        })
    }

    /// The same backbone and head with adapters removed.
    pub fn unwrapped(&self) -> Self {
        let mut m = self.clone();
        m.lora = LoraConfig {
            rank: 0,
            ..self.lora.clone()
        };
        for a in &mut m.weights.adapters {
            *a = BlockAdapters {
                query: None,
                key: None,
                value: None,
                output: None,
                fc1: None,
                fc2: None,
            };
        }
        m
    }

    /// Adapters folded into the frozen weights (`W0 + (alpha/r)·B·A`).
    pub fn merged(&self) -> Result<Self> {
        let mut m = self.unwrapped();
        for (i, ad) in self.weights.adapters.iter().enumerate() {
            for name in ["query", "key", "value", "output", "fc1", "fc2"] {
                if ad.get(name).is_some() {
                    let w = self.lora_linear(i, name).expect("adapter exists").merge_weights()?;
                    let blk = &mut m.weights.backbone.blocks[i];
                    let lin = match name {
                        "query" => &mut blk.query,
                        "key" => &mut blk.key,
                        "value" => &mut blk.value,
                        "output" => &mut blk.output,
                        "fc1" => &mut blk.fc1,
                        _ => &mut blk.fc2,
                    };
                    lin.weight.tensor = w.with_requires_grad(false);
                }
            }
        }
        Ok(m)
    }

    /// Trainable tensors in canonical order (value and grad copied).
    pub fn trainable_tensors(&self) -> Vec<Tensor<T>> {
        self.trainable().into_iter().map(|p| p.tensor.clone()).collect()
    }

    /// Overwrites trainable values in canonical order.
    pub fn set_trainable(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut slots = self.trainable_mut();
        if slots.len() != values.len() {
            return Err(Error::Contract("trainable tensor count mismatch".into()));
        }
        for (p, v) in slots.iter_mut().zip(values) {
            if p.tensor.shape() != v.shape() {
                return Err(Error::dim("set_trainable", p.tensor.shape(), v.shape()));
            }
            p.tensor.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            lora: self.lora.clone(),
            weights: self
                .weights
                .map(&mut |p| Param::new(p.name.clone(), p.tensor.cast())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::count_trainable;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64) -> Tensor<f64> {
        let data = rng::uniform(&mut rng::stream(seed, "img"), 32 * 32 * 3, 0.0, 1.0);
        Tensor::new(vec![32, 32, 3], data).unwrap()
    }

    #[test]
    fn instantiated_budget_matches_closed_form() {
        for lora in [
            LoraConfig::with_rank(0),
            LoraConfig::with_rank(2),
            LoraConfig {
                rank: 3,
                alpha: Some(6.0),
                targets: crate::lora::Target::ALL.to_vec(),
            },
        ] {
            let m: Model<f32> = Model::new(&tiny(), &lora, 0).unwrap();
            let actual = m.budget();
            let formula = count_trainable(&tiny(), &lora).unwrap();
            assert_eq!(actual.trainable, formula.trainable);
            assert_eq!(actual.frozen, formula.frozen);
            assert_eq!(actual.adapter, formula.adapter);
            assert_eq!(actual.head, formula.head);
        }
    }

    #[test]
    fn fresh_adapters_leave_logits_unchanged() {
        let m: Model<f64> = Model::new(&tiny(), &LoraConfig::with_rank(2), 4).unwrap();
        let img = image(1);
        assert_eq!(m.logits(&img).unwrap(), m.unwrapped().logits(&img).unwrap());
    }

    #[test]
    fn gradients_route_to_trainable_only() {
        let mut m: Model<f64> = Model::new(&tiny(), &LoraConfig::with_rank(2), 4).unwrap();
        let y = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let bg = m.batch_grad(&[(&image(1), y)]).unwrap();
        m.accumulate_grads(&bg.grads).unwrap();
        for p in m.params() {
            if p.frozen() {
                assert!(p.tensor.grad().is_none(), "{}", p.name);
            } else {
                assert!(p.tensor.grad().is_some(), "{}", p.name);
            }
        }
        let names: Vec<_> = m.trainable().iter().map(|p| p.name.clone()).collect();
        assert!(names.iter().all(|n| n.starts_with("lora.") || n.starts_with("head.")));
        assert_eq!(names.len(), 2 * 2 * 2 + 2);
    }

    #[test]
    fn from_params_round_trips() {
        let m: Model<f32> = Model::new(&tiny(), &LoraConfig::with_rank(2), 11).unwrap();
        let params = m.params().into_iter().cloned().collect();
        let back = Model::from_params(&tiny(), &LoraConfig::with_rank(2), params).unwrap();
        assert_eq!(back, m);
    }
}
