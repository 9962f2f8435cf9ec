//! Low-rank adapters.
//!
//! A wrapped projection computes `h = W0·x + bias + (alpha/r)·B·(A·x)` where
//! `W0 ∈ R^{d×k}` and `bias` stay frozen and only `A ∈ R^{r×k}` and
//! `B ∈ R^{d×r}` train. `A` starts Gaussian(0, 0.02²) and `B` starts at zero,
//! so a freshly wrapped layer is exactly the base layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, Param};

/// Standard deviation of the `A` initializer.
pub const LORA_INIT_STD: f64 = 0.02;

/// Projections that may carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Query,
    Key,
    Value,
    Output,
    /// Both MLP layers.
    Mlp,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::Query,
        Target::Key,
        Target::Value,
        Target::Output,
        Target::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Query => "query",
            Target::Key => "key",
            Target::Value => "value",
            Target::Output => "output",
            Target::Mlp => "mlp",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown lora target `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    /// Rank `r`; 0 disables adapters entirely.
    pub rank: usize,
    /// Scaling numerator; `None` means `alpha = r`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub targets: Vec<Target>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 24,
            alpha: None,
            targets: vec![Target::Query, Target::Value],
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    /// `alpha / r`, or 0 when adapters are disabled.
    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha() / self.rank as f64
        }
    }

    pub fn targets(&self, t: Target) -> bool {
        self.rank > 0 && self.targets.contains(&t)
    }

    /// Every wrapped `(name, d, k)` of one block, in canonical order.
    pub fn wrapped_shapes(&self, model: &ModelConfig) -> Vec<(&'static str, usize, usize)> {
        let d = model.embed_dim;
        let hid = model.mlp_hidden();
        let mut out = Vec::new();
        for (t, name, rows, cols) in [
            (Target::Query, "query", d, d),
            (Target::Key, "key", d, d),
            (Target::Value, "value", d, d),
            (Target::Output, "output", d, d),
            (Target::Mlp, "fc1", hid, d),
            (Target::Mlp, "fc2", d, hid),
        ] {
            if self.targets(t) {
                out.push((name, rows, cols));
            }
        }
        out
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Config(format!("lora.alpha must be positive, got {a}")));
            }
        }
        for (name, d, k) in self.wrapped_shapes(model) {
            check_rank(self.rank, d, k, name)?;
        }
        Ok(())
    }
}

fn check_rank(r: usize, d: usize, k: usize, what: &str) -> Result<()> {
    if r == 0 {
        return Err(Error::Config(format!("lora rank must be ≥ 1 to wrap {what}")));
    }
    if r >= d.min(k) {
        return Err(Error::Config(format!(
            "lora rank {r} must be < min(d, k) = {} for {what} ({d}×{k})",
            d.min(k)
        )));
    }
    Ok(())
}

/// The trainable factor pair of one wrapped projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<P> {
    /// `[r×k]`
    pub a: P,
    /// `[d×r]`
    pub b: P,
}

impl<P> LoraPair<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> LoraPair<Q> {
        LoraPair {
            a: f(&self.a),
            b: f(&self.b),
        }
    }
}

/// Adapters of one transformer block; `None` where not targeted.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters<P> {
    pub query: Option<LoraPair<P>>,
    pub key: Option<LoraPair<P>>,
    pub value: Option<LoraPair<P>>,
    pub output: Option<LoraPair<P>>,
    pub fc1: Option<LoraPair<P>>,
    pub fc2: Option<LoraPair<P>>,
}

impl<P> BlockAdapters<P> {
    fn slots(&self) -> [&Option<LoraPair<P>>; 6] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.fc1,
            &self.fc2,
        ]
    }

    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> BlockAdapters<Q> {
        let mut m = |s: &'a Option<LoraPair<P>>| s.as_ref().map(|p| p.map(f));
        BlockAdapters {
            query: m(&self.query),
            key: m(&self.key),
            value: m(&self.value),
            output: m(&self.output),
            fc1: m(&self.fc1),
            fc2: m(&self.fc2),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        for LoraPair { a, b } in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.fc1,
            &mut self.fc2,
        ].into_iter().flatten() {
            f(a);
            f(b);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.slots().iter().all(|s| s.is_none())
    }

    pub fn get(&self, name: &str) -> Option<&LoraPair<P>> {
        match name {
            "query" => self.query.as_ref(),
            "key" => self.key.as_ref(),
            "value" => self.value.as_ref(),
            "output" => self.output.as_ref(),
            "fc1" => self.fc1.as_ref(),
            "fc2" => self.fc2.as_ref(),
            _ => None,
        }
    }
}

fn init_pair<T: Scalar>(seed: u64, prefix: &str, d: usize, k: usize, r: usize) -> LoraPair<Param<T>> {
    let a_name = format!("{prefix}.a");
    let a = rng::normal(&mut rng::stream(seed, &a_name), r * k, LORA_INIT_STD);
    LoraPair {
        a: Param::new(
            a_name,
            Tensor::new(vec![r, k], a).expect("A shape").with_requires_grad(true),
        ),
        b: Param::new(
            format!("{prefix}.b"),
            Tensor::zeros(&[d, r]).with_requires_grad(true),
        ),
    }
}

/// Adapters for block `index`; all slots empty when `rank == 0`.
pub fn init_block_adapters<T: Scalar>(
    model: &ModelConfig,
    lora: &LoraConfig,
    index: usize,
    seed: u64,
) -> Result<BlockAdapters<Param<T>>> {
    lora.validate(model)?;
    let mut ad = BlockAdapters {
        query: None,
        key: None,
        value: None,
        output: None,
        fc1: None,
        fc2: None,
    };
    let r = lora.rank;
    for (name, d, k) in lora.wrapped_shapes(model) {
        let prefix = format!("lora.blocks.{index}.{name}");
        let pair = Some(init_pair(seed, &prefix, d, k, r));
        match name {
            "query" => ad.query = pair,
            "key" => ad.key = pair,
            "value" => ad.value = pair,
            "output" => ad.output = pair,
            "fc1" => ad.fc1 = pair,
            _ => ad.fc2 = pair,
        }
    }
    Ok(ad)
}

/// A single adapted linear map, independent of any model.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear<T> {
    /// Frozen `[d×k]`.
    pub w0: Tensor<T>,
    /// Frozen `[d]`.
    pub bias: Option<Tensor<T>>,
    /// Trainable `[r×k]`.
    pub a: Tensor<T>,
    /// Trainable `[d×r]`.
    pub b: Tensor<T>,
    pub alpha: f64,
}

/// Wraps `w0` with a fresh adapter (`A` Gaussian, `B` zero).
pub fn init_lora<T: Scalar>(
    w0: Tensor<T>,
    bias: Option<Tensor<T>>,
    config: &LoraConfig,
    seed: u64,
) -> Result<LoraLinear<T>> {
    let (d, k) = w0.matrix_dims("init_lora")?;
    check_rank(config.rank, d, k, "weight")?;
    if let Some(b) = &bias {
        if b.shape() != [d] {
            return Err(Error::dim("init_lora", w0.shape(), b.shape()));
        }
    }
    let pair: LoraPair<Param<T>> = init_pair(seed, "lora", d, k, config.rank);
    Ok(LoraLinear {
        w0: w0.with_requires_grad(false),
        bias: bias.map(|b| b.with_requires_grad(false)),
        a: pair.a.tensor,
        b: pair.b.tensor,
        alpha: config.alpha(),
    })
}

impl<T: Scalar> LoraLinear<T> {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> T {
        T::lit(self.alpha / self.rank() as f64)
    }

    /// `W0·x + (alpha/r)·B·(A·x) + bias` for `x ∈ R^k`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let base = self.w0.matvec(x)?;
        let low = self.a.matvec(x)?;
        let up = self.b.matvec(&low)?.scale(self.scale());
        let h = base.add(&up)?;
        match &self.bias {
            Some(b) => h.add(b),
            None => Ok(h),
        }
    }

    /// `W0 + (alpha/r)·B·A`.
    pub fn merge_weights(&self) -> Result<Tensor<T>> {
        let delta = self.b.matmul(&self.a)?.scale(self.scale());
        self.w0.add(&delta)
    }

    /// `W·x + bias` with the merged weight.
    pub fn merged_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.merge_weights()?.matvec(x)?;
        match &self.bias {
            Some(b) => h.add(b),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub name: String,
    pub trainable: usize,
    pub frozen: usize,
}

/// Trainable vs frozen parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    /// Adapter parameters only (excludes the classifier head).
    pub adapter: usize,
    /// Classifier head parameters (always trainable).
    pub head: usize,
    pub layers: Vec<LayerBudget>,
}

/// Closed-form parameter accounting for a model/adapter configuration.
///
/// Trainable = Σ over wrapped `d×k` projections of `d·r + r·k`, plus the
/// classifier head; everything else is frozen backbone.
pub fn count_trainable(model: &ModelConfig, lora: &LoraConfig) -> Result<ParamBudget> {
    model.validate()?;
    if lora.rank > 0 {
        lora.validate(model)?;
    }
    let d = model.embed_dim;
    let hid = model.mlp_hidden();
    let r = lora.rank;
    let mut layers = Vec::new();
    let mut frozen_layer = |name: String, n: usize| {
        layers.push(LayerBudget {
            name,
            trainable: 0,
            frozen: n,
        })
    };
    frozen_layer("backbone.patch_projection".into(), model.patch_dim() * d + d);
    frozen_layer("backbone.class_token".into(), d);
    frozen_layer("backbone.pos_embedding".into(), (model.num_tokens() + 1) * d);
    let wrapped = lora.wrapped_shapes(model);
    for i in 0..model.depth {
        let p = format!("backbone.blocks.{i}");
        layers.push(LayerBudget {
            name: format!("{p}.norm1"),
            trainable: 0,
            frozen: 2 * d,
        });
        for (name, rows, cols) in [
            ("attn.query", d, d),
            ("attn.key", d, d),
            ("attn.value", d, d),
            ("attn.output", d, d),
            ("mlp.fc1", hid, d),
            ("mlp.fc2", d, hid),
        ] {
            let short = name.rsplit('.').next().expect("dotted name");
            let trainable = if wrapped.iter().any(|w| w.0 == short) {
                rows * r + r * cols
            } else {
                0
            };
            layers.push(LayerBudget {
                name: format!("{p}.{name}"),
                trainable,
                frozen: rows * cols + rows,
            });
            if name == "attn.output" {
                layers.push(LayerBudget {
                    name: format!("{p}.norm2"),
                    trainable: 0,
                    frozen: 2 * d,
                });
            }
        }
    }
    layers.push(LayerBudget {
        name: "backbone.final_norm".into(),
        trainable: 0,
        frozen: 2 * d,
    });
    let head = d * model.num_classes + model.num_classes;
    layers.push(LayerBudget {
        name: "head".into(),
        trainable: head,
        frozen: 0,
    });
    let trainable: usize = layers.iter().map(|l| l.trainable).sum();
    let frozen: usize = layers.iter().map(|l| l.frozen).sum();
    Ok(ParamBudget {
        trainable,
        frozen,
        total: trainable + frozen,
        adapter: trainable - head,
        head,
        layers,
    })
}
