//! Grad-CAM over patch tokens.
//!
//! Encoder states are indexed `0..=depth`: state 0 is the embedded sequence
//! and state `i` the output of block `i - 1`. Patch tokens of the last state
//! reach the class-token feature only through their own layer norm, which
//! never mixes tokens, so their gradient is identically zero. The default
//! state is therefore `depth - 1`, the input of the last block, whose patch
//! tokens feed the class token through its attention.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::raster::write_gray8;
use crate::error::{Error, Result};
use crate::head::CLASS_NAMES;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub class_index: usize,
    pub class_name: String,
    pub layer: usize,
    /// Patch-grid rows and columns.
    pub grid_size: [usize; 2],
    /// Row-major patch grid in `[0, 1]`.
    pub grid: Vec<f64>,
    /// Row-major `image_size × image_size` map in `[0, 1]`.
    #[serde(skip)]
    pub upsampled: Vec<f64>,
    pub image_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tile: Option<PathBuf>,
}

pub fn default_layer(depth: usize) -> usize {
    depth.saturating_sub(1)
}

/// Bilinear resize of a row-major `h×w` map to `oh×ow`, sampling at pixel
/// centres with edge clamping.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Class-specific relevance of each patch for `image`.
///
/// `cam[t] = ReLU(Σ_c w_c·A[t,c])` with `w_c` the token-mean gradient of the
/// class logit, scaled so the maximum is 1 (all zero when nothing is
/// positive).
pub fn grad_cam<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class_index: usize,
    layer: Option<usize>,
) -> Result<Heatmap> {
    let cfg = &model.config;
    if class_index >= cfg.num_classes {
        return Err(Error::Contract(format!(
            "class index {class_index} is outside 0..{}",
            cfg.num_classes
        )));
    }
    let layer = layer.unwrap_or_else(|| default_layer(cfg.depth));
    if layer > cfg.depth {
        return Err(Error::Config(format!(
            "attribution layer {layer} is outside 0..={}",
            cfg.depth
        )));
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let fwd = model.forward_on(&mut tape, &vars, image, Some(layer))?;
    let logit = tape.slice_cols(fwd.logits, class_index, 1)?;
    let score = tape.sum(logit);
    tape.backward(score)?;

    let state = fwd.encoding.layers[layer];
    let d = cfg.embed_dim;
    let n = cfg.num_tokens();
    let acts = &tape.value(state).data()[d..];
    let zeros = vec![T::zero(); (n + 1) * d];
    let grads = &tape.grad(state).unwrap_or(&zeros)[d..];

    let inv_n = 1.0 / n as f64;
    let weights: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|t| grads[t * d + c].as_f64()).sum::<f64>() * inv_n)
        .collect();
    let mut grid: Vec<f64> = (0..n)
        .map(|t| {
            let s: f64 = (0..d).map(|c| weights[c] * acts[t * d + c].as_f64()).sum();
            s.max(0.0)
        })
        .collect();
    let peak = grid.iter().copied().fold(0.0f64, f64::max);
    if peak > 0.0 {
        grid.iter_mut().for_each(|v| *v /= peak);
    }
    let g = cfg.grid();
    let upsampled = bilinear_upsample(&grid, g, g, cfg.image_size, cfg.image_size)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Heatmap {
        class_index,
        class_name: CLASS_NAMES
            .get(class_index)
            .map_or_else(|| format!("class_{class_index}"), |s| s.to_string()),
        layer,
        grid_size: [g, g],
        grid,
        upsampled,
        image_size: cfg.image_size,
        tile: None,
    })
}

impl Heatmap {
    pub fn to_gray8(&self) -> Vec<u8> {
        self.upsampled.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    /// Writes the upsampled map as an 8-bit grayscale image and the raw grid
    /// as a JSON sidecar next to it (`<stem>.json`).
    pub fn save(&self, image_path: &Path) -> Result<PathBuf> {
        let s = self.image_size as u32;
        write_gray8(image_path, s, s, self.to_gray8())?;
        let sidecar = image_path.with_extension("json");
        let json = serde_json::to_vec_pretty(self).expect("heatmap serializes");
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
        Ok(sidecar)
    }
}
