//! Multi-label decoding: sigmoid probabilities, binary cross-entropy and
//! thresholding.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels;

/// Class abbreviations in label-vector order.
pub const CLASS_NAMES: [&str; 8] = ["HLC", "CPC", "DDC", "RBL", "CPT", "DSE", "PRD", "PHY"];

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Probability clamp used by the loss.
pub const BCE_EPS: f64 = 1e-7;

/// Default decision threshold (positive on ties).
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Index of a class abbreviation, case-insensitive.
pub fn class_index(name: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown class `{name}`; expected one of {}",
                CLASS_NAMES.join(", ")
            ))
        })
}

/// A binary label set. Serializes as an array of 0/1 integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelVector(pub Vec<bool>);

impl LabelVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.0
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }
}

impl AsRef<[bool]> for LabelVector {
    fn as_ref(&self) -> &[bool] {
        &self.0
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for LabelVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&b| u8::from(b)))
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bits = Vec::<u8>::deserialize(d)?;
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(serde::de::Error::custom(format!("label entry {bad} is not 0 or 1")));
        }
        Ok(Self::from_bits(&bits))
    }
}

/// Binary cross-entropy: mean over samples, sum over classes.
///
/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss<T: Scalar, L: AsRef<[bool]>>(probs: &[Vec<T>], labels: &[L]) -> Result<T> {
    if probs.is_empty() {
        return Err(Error::Contract("bce_loss needs at least one sample".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "bce_loss: {} probability rows vs {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let lo = T::lit(BCE_EPS);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for (p, y) in probs.iter().zip(labels) {
        let y = y.as_ref();
        if p.len() != y.len() {
            return Err(Error::Contract(format!(
                "bce_loss: {} probabilities vs {} labels",
                p.len(),
                y.len()
            )));
        }
        for (&q, &yy) in p.iter().zip(y) {
            let q = q.max(lo).min(hi);
            total = total - if yy { q.ln() } else { (T::one() - q).ln() };
        }
    }
    Ok(total / T::from_usize_lossy(probs.len()))
}

pub fn sigmoid_probs<T: Scalar>(logits: &[T]) -> Vec<T> {
    logits.iter().map(|&z| kernels::sigmoid(z)).collect()
}

/// `entry = prob >= threshold`.
pub fn predict_labels<T: Scalar>(probs: &[T], threshold: T) -> LabelVector {
    LabelVector(probs.iter().map(|&p| p >= threshold).collect())
}
