//! Multi-label evaluation over binarized predictions.
//!
//! Any ratio with a zero denominator evaluates to 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::CLASS_NAMES;

/// Per-class binary confusion counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            tn: vec![0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Samples counted (identical for every class).
    pub fn total(&self) -> u64 {
        self.tp
            .first()
            .map_or(0, |_| self.tp[0] + self.fp[0] + self.fn_[0] + self.tn[0])
    }

    pub fn add(&mut self, pred: &[bool], truth: &[bool]) {
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            match (p, t) {
                (true, true) => self.tp[i] += 1,
                (true, false) => self.fp[i] += 1,
                (false, true) => self.fn_[i] += 1,
                (false, false) => self.tn[i] += 1,
            }
        }
    }

    /// Component-wise sum.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Contract(format!(
                "cannot merge counts over {} and {} classes",
                self.num_classes(),
                other.num_classes()
            )));
        }
        for i in 0..self.num_classes() {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
            self.tn[i] += other.tn[i];
        }
        Ok(())
    }

    pub fn is_well_formed(&self) -> bool {
        let n = self.num_classes();
        let t = self.total();
        self.fp.len() == n
            && self.fn_.len() == n
            && self.tn.len() == n
            && (0..n).all(|i| self.tp[i] + self.fp[i] + self.fn_[i] + self.tn[i] == t)
    }
}

fn check_batch<P: AsRef<[bool]>, Q: AsRef<[bool]>>(preds: &[P], truths: &[Q]) -> Result<usize> {
    if preds.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} ground-truth rows",
            preds.len(),
            truths.len()
        )));
    }
    let c = truths[0].as_ref().len();
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.as_ref().len() != c || t.as_ref().len() != c {
            return Err(Error::Contract(format!(
                "sample {i}: label widths {} and {} differ from {c}",
                p.as_ref().len(),
                t.as_ref().len()
            )));
        }
    }
    Ok(c)
}

pub fn confusion_counts<P: AsRef<[bool]>, Q: AsRef<[bool]>>(
    preds: &[P],
    truths: &[Q],
) -> Result<ConfusionCounts> {
    let c = check_batch(preds, truths)?;
    let mut counts = ConfusionCounts::zeros(c);
    for (p, t) in preds.iter().zip(truths) {
        counts.add(p.as_ref(), t.as_ref());
    }
    Ok(counts)
}

/// Fraction of samples whose whole label vector is predicted exactly.
pub fn match_ratio<P: AsRef<[bool]>, Q: AsRef<[bool]>>(preds: &[P], truths: &[Q]) -> Result<f64> {
    check_batch(preds, truths)?;
    let hits = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.as_ref() == t.as_ref())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `num / den`, or 0 when `den == 0`.
pub fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of precision and recall (0 when both are 0).
pub fn f1(precision: f64, recall: f64) -> f64 {
    safe_div(2.0 * precision * recall, precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
}

pub fn macro_f1(counts: &ConfusionCounts) -> MacroF1 {
    let n = counts.num_classes();
    let mut out = MacroF1 {
        precision: Vec::with_capacity(n),
        recall: Vec::with_capacity(n),
        per_class_f1: Vec::with_capacity(n),
        macro_f1: 0.0,
    };
    for i in 0..n {
        let (tp, fp, fn_) = (counts.tp[i] as f64, counts.fp[i] as f64, counts.fn_[i] as f64);
        let p = safe_div(tp, tp + fp);
        let r = safe_div(tp, tp + fn_);
        out.precision.push(p);
        out.recall.push(r);
        out.per_class_f1.push(f1(p, r));
    }
    out.macro_f1 = safe_div(out.per_class_f1.iter().sum(), n as f64);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroF1 {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
}

pub fn micro_f1(counts: &ConfusionCounts) -> MicroF1 {
    let tp: u64 = counts.tp.iter().sum();
    let fp: u64 = counts.fp.iter().sum();
    let fn_: u64 = counts.fn_.iter().sum();
    let p = safe_div(tp as f64, (tp + fp) as f64);
    let r = safe_div(tp as f64, (tp + fn_) as f64);
    MicroF1 {
        micro_precision: p,
        micro_recall: r,
        micro_f1: f1(p, r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Headline metrics as percentages rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percentages {
    pub match_ratio: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub num_classes: usize,
    pub match_ratio: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub percent: Percentages,
    pub counts: ConfusionCounts,
    pub zero_division: f64,
}

pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

fn class_label(i: usize, n: usize) -> String {
    if n == CLASS_NAMES.len() {
        CLASS_NAMES[i].to_string()
    } else {
        format!("class_{i}")
    }
}

impl MetricsReport {
    pub fn from_predictions<P: AsRef<[bool]>, Q: AsRef<[bool]>>(preds: &[P], truths: &[Q]) -> Result<Self> {
        let counts = confusion_counts(preds, truths)?;
        let mr = match_ratio(preds, truths)?;
        Ok(Self::from_parts(mr, counts))
    }

    pub fn from_parts(match_ratio: f64, counts: ConfusionCounts) -> Self {
        let ma = macro_f1(&counts);
        let mi = micro_f1(&counts);
        let n = counts.num_classes();
        let per_class = (0..n)
            .map(|i| ClassMetrics {
                class: class_label(i, n),
                precision: ma.precision[i],
                recall: ma.recall[i],
                f1: ma.per_class_f1[i],
                support: counts.tp[i] + counts.fn_[i],
            })
            .collect();
        Self {
            samples: counts.total(),
            num_classes: n,
            match_ratio,
            macro_f1: ma.macro_f1,
            micro_precision: mi.micro_precision,
            micro_recall: mi.micro_recall,
            micro_f1: mi.micro_f1,
            per_class,
            percent: Percentages {
                match_ratio: percent(match_ratio),
                micro_f1: percent(mi.micro_f1),
                macro_f1: percent(ma.macro_f1),
                per_class_f1: ma.per_class_f1.iter().map(|&x| percent(x)).collect(),
            },
            counts,
            zero_division: 0.0,
        }
    }
}
