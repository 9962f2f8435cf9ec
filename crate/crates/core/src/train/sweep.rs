//! Accuracy and trainable-parameter count across adapter ranks.

use serde::{Deserialize, Serialize};

use super::{evaluate_samples, train_samples, Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::lora::{count_trainable, LoraConfig};
use crate::scalar::Scalar;
use crate::vit::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub trainable_params: Option<usize>,
    pub val_match_ratio: Option<f64>,
    pub test_match_ratio: Option<f64>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["r", "trainable_params", "val_match_ratio", "test_match_ratio", "status"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for row in &self.rows {
            w.write_record([
                row.r.to_string(),
                row.trainable_params.map(|n| n.to_string()).unwrap_or_default(),
                opt(row.val_match_ratio),
                opt(row.test_match_ratio),
                row.status.clone(),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }
}

/// Comma-separated non-negative integers, e.g. `0,3,6`.
pub fn parse_ranks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("rank `{}` is not a non-negative integer", t.trim())))
        })
        .collect()
}

fn run_one<T: Scalar>(
    model: &ModelConfig,
    lora: &LoraConfig,
    train: &TrainConfig,
    sets: [&[Sample<T>]; 3],
) -> Result<(f64, f64)> {
    let outcome = train_samples(model, lora, train, sets[0], sets[1], None)?;
    let chosen = outcome.best.as_ref().unwrap_or(&outcome.latest);
    let val = evaluate_samples(&chosen.model, sets[1], train.threshold)?;
    let test = evaluate_samples(&chosen.model, sets[2], train.threshold)?;
    Ok((val.match_ratio, test.match_ratio))
}

/// One independent run per rank under the same seed, rows sorted by rank.
/// A failing run marks its row and the sweep continues.
pub fn rank_sweep<T: Scalar>(
    model: &ModelConfig,
    base: &LoraConfig,
    train: &TrainConfig,
    ranks: &[usize],
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    test_set: &[Sample<T>],
) -> Result<SweepTable> {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    if sorted.is_empty() {
        return Err(Error::Config("rank sweep needs at least one rank".into()));
    }
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("rank {} is listed twice", w[0])));
    }
    let rows = sorted
        .into_iter()
        .map(|r| {
            let lora = LoraConfig {
                rank: r,
                ..base.clone()
            };
            let count = count_trainable(model, &lora).map(|b| b.trainable);
            let result = count
                .as_ref()
                .map_err(|e| Error::Config(e.to_string()))
                .and_then(|_| run_one(model, &lora, train, [train_set, val_set, test_set]));
            match result {
                Ok((val, test)) => SweepRow {
                    r,
                    trainable_params: count.ok(),
                    val_match_ratio: Some(val),
                    test_match_ratio: Some(test),
                    status: "ok".into(),
                },
                Err(e) => SweepRow {
                    r,
                    trainable_params: count.ok(),
                    val_match_ratio: None,
                    test_match_ratio: None,
                    status: format!("failed: {e}"),
                },
            }
        })
        .collect();
    Ok(SweepTable { rows })
}
