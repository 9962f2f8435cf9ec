//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::Param;

/// Moment estimates of one trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One entry per trainable parameter, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub entries: Vec<Moments<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.learning_rate,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps_adam,
        }
    }
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for every trainable parameter.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<T>>) -> Self {
        let entries = params
            .into_iter()
            .filter(|p| !p.frozen())
            .map(|p| Moments {
                name: p.name.clone(),
                m: vec![T::zero(); p.tensor.len()],
                v: vec![T::zero(); p.tensor.len()],
            })
            .collect();
        Self { step: 0, entries }
    }
}

/// One update of every trainable parameter from its accumulated gradient.
/// Frozen parameters are skipped.
///
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Param<T>],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    let trainable: Vec<usize> = (0..params.len()).filter(|&i| !params[i].frozen()).collect();
    if trainable.len() != state.entries.len() {
        return Err(Error::Contract(format!(
            "optimizer holds {} entries for {} trainable parameters",
            state.entries.len(),
            trainable.len()
        )));
    }
    for (&i, entry) in trainable.iter().zip(&state.entries) {
        let p = &params[i];
        if p.name != entry.name || entry.m.len() != p.tensor.len() || entry.v.len() != p.tensor.len() {
            return Err(Error::Contract(format!(
                "optimizer entry {} ({} values) does not match parameter {} ({} values)",
                entry.name,
                entry.m.len(),
                p.name,
                p.tensor.len()
            )));
        }
        if p.tensor.grad().is_none() {
            return Err(Error::Contract(format!("trainable parameter {} has no gradient", p.name)));
        }
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (lr, wd, eps) = (T::lit(hyper.lr), T::lit(hyper.weight_decay), T::lit(hyper.eps));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (&i, entry) in trainable.iter().zip(&mut state.entries) {
        let tensor = &mut params[i].tensor;
        let g = tensor.grad().expect("checked above").to_vec();
        for (k, theta) in tensor.data_mut().iter_mut().enumerate() {
            let gk = g[k];
            entry.m[k] = b1 * entry.m[k] + (one - b1) * gk;
            entry.v[k] = b2 * entry.v[k] + (one - b2) * gk * gk;
            let m_hat = entry.m[k] / c1;
            let v_hat = entry.v[k] / c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * *theta;
        }
    }
    Ok(())
}
