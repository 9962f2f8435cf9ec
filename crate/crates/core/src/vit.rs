//! Vision transformer encoder.
//!
//! Images are `[H×W×C]` tensors. They are cut into `patch_size` squares,
//! each flattened in (row, col, channel) order and linearly projected to
//! `embed_dim`. A learnable class token is prepended, learnable absolute
//! positional embeddings are added, and the sequence runs through `depth`
//! pre-norm blocks (norm, multi-head self-attention, residual; norm, GELU
//! MLP, residual). The final-normed class-token row is the image feature.
//!
//! Parameter containers are generic over the slot type `P`: `Param<T>` for
//! stored weights and [`Var`] once the weights are bound to a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{BlockAdapters, LoraPair};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            patch_size: 16,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return bad("image_size, patch_size and channels must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "model.image_size {} is not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model.embed_dim {} must be a positive multiple of model.heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes == 0 {
            return bad("model.num_classes must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("model.mlp_ratio {} is not positive", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// A named tensor; frozen iff the tensor does not require grad.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }

    pub fn frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }
}

/// `y = x·Wᵀ + b` with `W` stored as `[out×in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<P> {
    pub norm1: Norm<P>,
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub output: Linear<P>,
    pub norm2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<P> {
    pub patch_projection: Linear<P>,
    pub class_token: P,
    pub pos_embedding: P,
    pub blocks: Vec<Block<P>>,
    pub final_norm: Norm<P>,
}

pub type BackboneParams<T> = Backbone<Param<T>>;

impl<P> Linear<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<P> Norm<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

impl<P> Block<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> Block<Q> {
        Block {
            norm1: self.norm1.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            norm2: self.norm2.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        self.norm1.for_each_mut(f);
        self.query.for_each_mut(f);
        self.key.for_each_mut(f);
        self.value.for_each_mut(f);
        self.output.for_each_mut(f);
        self.norm2.for_each_mut(f);
        self.fc1.for_each_mut(f);
        self.fc2.for_each_mut(f);
    }
}

impl<P> Backbone<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> Backbone<Q> {
        Backbone {
            patch_projection: self.patch_projection.map(f),
            class_token: f(&self.class_token),
            pos_embedding: f(&self.pos_embedding),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_norm: self.final_norm.map(f),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        self.patch_projection.for_each_mut(f);
        f(&mut self.class_token);
        f(&mut self.pos_embedding);
        for b in &mut self.blocks {
            b.for_each_mut(f);
        }
        self.final_norm.for_each_mut(f);
    }

    /// Visits every slot in canonical order.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a P)) {
        let _ = self.map(&mut |p| f(p));
    }
}

/// Cuts `[H×W×C]` into row-major patch tokens `[(H/p)(W/p) × p·p·C]`.
///
/// Within a token, values are ordered by (row, col, channel).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let [h, w, c] = match image.shape() {
        &[h, w, c] => [h, w, c],
        other => {
            return Err(Error::Geometry(format!(
                "image must be H×W×C, got shape {other:?}"
            )))
        }
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Geometry(format!(
            "image {h}×{w} is not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_size {
                let y = gy * patch_size + py;
                let start = (y * w + gx * patch_size) * c;
                out.extend_from_slice(&src[start..start + patch_size * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

fn trunc_param<T: Scalar>(seed: u64, name: String, shape: &[usize]) -> Param<T> {
    let n = shape.iter().product();
    let data = rng::truncated_normal(&mut rng::stream(seed, &name), n, INIT_STD);
    Param::new(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
}

fn const_param<T: Scalar>(name: String, shape: &[usize], v: T) -> Param<T> {
    Param::new(name, Tensor::filled(shape, v))
}

fn init_linear<T: Scalar>(seed: u64, prefix: &str, out: usize, inp: usize) -> Linear<Param<T>> {
    Linear {
        weight: trunc_param(seed, format!("{prefix}.weight"), &[out, inp]),
        bias: const_param(format!("{prefix}.bias"), &[out], T::zero()),
    }
}

fn init_norm<T: Scalar>(prefix: &str, d: usize) -> Norm<Param<T>> {
    Norm {
        gamma: const_param(format!("{prefix}.gamma"), &[d], T::one()),
        beta: const_param(format!("{prefix}.beta"), &[d], T::zero()),
    }
}

/// Backbone weights: truncated-normal(0.02) matrices and class token, zero
/// biases and positional embeddings, unit/zero layer norms. All frozen.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<BackboneParams<T>> {
    config.validate()?;
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let blocks = (0..config.depth)
        .map(|i| {
            let p = format!("backbone.blocks.{i}");
            Block {
                norm1: init_norm(&format!("{p}.norm1"), d),
                query: init_linear(seed, &format!("{p}.attn.query"), d, d),
                key: init_linear(seed, &format!("{p}.attn.key"), d, d),
                value: init_linear(seed, &format!("{p}.attn.value"), d, d),
                output: init_linear(seed, &format!("{p}.attn.output"), d, d),
                norm2: init_norm(&format!("{p}.norm2"), d),
                fc1: init_linear(seed, &format!("{p}.mlp.fc1"), hidden, d),
                fc2: init_linear(seed, &format!("{p}.mlp.fc2"), d, hidden),
            }
        })
        .collect();
    Ok(Backbone {
        patch_projection: init_linear(
            seed,
            "backbone.patch_projection",
            d,
            config.patch_dim(),
        ),
        class_token: trunc_param(seed, "backbone.class_token".into(), &[d]),
        pos_embedding: const_param(
            "backbone.pos_embedding".into(),
            &[config.num_tokens() + 1, d],
            T::zero(),
        ),
        blocks,
        final_norm: init_norm("backbone.final_norm", d),
    })
}

/// Binds stored parameters onto a tape as leaves.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &BackboneParams<T>) -> Backbone<Var> {
    params.map(&mut |p| tape.leaf(&p.tensor))
}

/// Tape handles produced by [`encode`].
#[derive(Debug, Clone)]
pub struct Encoding {
    /// Final-normed class-token row, `[1×embed_dim]`.
    pub feature: Var,
    /// `layers[0]` is the embedded sequence; `layers[i]` the output of block
    /// `i - 1`. Shapes are `[(1+num_tokens)×embed_dim]`.
    pub layers: Vec<Var>,
    /// Softmax attention matrices, per block then per head.
    pub attention: Vec<Vec<Var>>,
}

/// `x·Wᵀ + b`, plus the low-rank branch `scale·(x·Aᵀ)·Bᵀ` when present.
pub(crate) fn project<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    lin: &Linear<Var>,
    adapter: Option<&LoraPair<Var>>,
    scale: T,
) -> Result<Var> {
    let wt = tape.transpose(lin.weight)?;
    let y = tape.matmul(x, wt)?;
    let y = tape.add_bias(y, lin.bias)?;
    match adapter {
        None => Ok(y),
        Some(ad) => {
            let at = tape.transpose(ad.a)?;
            let low = tape.matmul(x, at)?;
            let bt = tape.transpose(ad.b)?;
            let up = tape.matmul(low, bt)?;
            let up = tape.scale(up, scale);
            tape.add(y, up)
        }
    }
}

/// Runs the encoder on one image. `watch` forces gradient tracking on
/// `layers[watch]` so callers can read activation gradients even when every
/// weight is frozen.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    backbone: &Backbone<Var>,
    adapters: Option<(&[BlockAdapters<Var>], T)>,
    image: &Tensor<T>,
    watch: Option<usize>,
) -> Result<Encoding> {
    let expected = [config.image_size, config.image_size, config.channels];
    if image.shape() != expected {
        return Err(Error::Geometry(format!(
            "image shape {:?} does not match model geometry {expected:?}",
            image.shape()
        )));
    }
    let d = config.embed_dim;
    let tokens = tape.constant(patchify(image, config.patch_size)?);
    let emb = project(tape, tokens, &backbone.patch_projection, None, T::one())?;
    let cls = tape.reshape(backbone.class_token, &[1, d])?;
    let seq = tape.concat_rows(&[cls, emb])?;
    let mut x = tape.add(seq, backbone.pos_embedding)?;

    let mut layers = vec![x];
    let mut attention = Vec::with_capacity(config.depth);
    let eps = T::lit(LAYER_NORM_EPS);
    let dh = config.head_dim();
    let attn_scale = T::one() / T::from_usize_lossy(dh).sqrt();
    for (i, block) in backbone.blocks.iter().enumerate() {
        if watch == Some(i) {
            tape.watch(x);
        }
        let ad = adapters.map(|(a, s)| (&a[i], s));
        let lora = |sel: fn(&BlockAdapters<Var>) -> Option<&LoraPair<Var>>| {
            ad.and_then(|(a, _)| sel(a))
        };
        let scale = ad.map_or(T::one(), |(_, s)| s);

        let h = tape.layer_norm(x, block.norm1.gamma, block.norm1.beta, eps)?;
        let q = project(tape, h, &block.query, lora(|a| a.query.as_ref()), scale)?;
        let k = project(tape, h, &block.key, lora(|a| a.key.as_ref()), scale)?;
        let v = project(tape, h, &block.value, lora(|a| a.value.as_ref()), scale)?;
        let mut heads = Vec::with_capacity(config.heads);
        let mut probs = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, attn_scale);
            let p = tape.softmax(scores);
            probs.push(p);
            heads.push(tape.matmul(p, vh)?);
        }
        attention.push(probs);
        let merged = tape.concat_cols(&heads)?;
        let o = project(tape, merged, &block.output, lora(|a| a.output.as_ref()), scale)?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, block.norm2.gamma, block.norm2.beta, eps)?;
        let m = project(tape, h2, &block.fc1, lora(|a| a.fc1.as_ref()), scale)?;
        let m = tape.gelu(m);
        let m = project(tape, m, &block.fc2, lora(|a| a.fc2.as_ref()), scale)?;
        x = tape.add(x, m)?;
        layers.push(x);
    }
    if watch == Some(config.depth) {
        tape.watch(x);
    }
    let normed = tape.layer_norm(x, backbone.final_norm.gamma, backbone.final_norm.beta, eps)?;
    let feature = tape.slice_rows(normed, 0, 1)?;
    Ok(Encoding {
        feature,
        layers,
        attention,
    })
}

/// Class-token feature `[embed_dim]` of the plain (adapter-free) backbone.
pub fn forward<T: Scalar>(
    config: &ModelConfig,
    params: &BackboneParams<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let enc = encode(&mut tape, config, &bound, None, image, None)?;
    tape.value(enc.feature).reshape(&[config.embed_dim])
}
