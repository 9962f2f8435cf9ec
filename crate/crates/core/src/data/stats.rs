//! Dataset statistics: RGB histograms over a tile sample and per-site
//! label composition.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use super::raster::read_rgb8;
use crate::error::{Error, Result};
use crate::metrics::percent;
use crate::rng;

pub const CHANNELS: [&str; 3] = ["red", "green", "blue"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub tile_path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins[channel][value]`
    pub bins: Vec<Vec<u64>>,
    pub sampled: usize,
    pub read: usize,
    pub errors: Vec<RecordError>,
}

impl Histogram {
    pub fn empty() -> Self {
        Self {
            bins: vec![vec![0; 256]; 3],
            sampled: 0,
            read: 0,
            errors: Vec::new(),
        }
    }

    pub fn add_raster(&mut self, raster: &[u8]) {
        for px in raster.chunks_exact(3) {
            for (c, &v) in px.iter().enumerate() {
                self.bins[c][usize::from(v)] += 1;
            }
        }
    }

    pub fn channel_total(&self, channel: usize) -> u64 {
        self.bins[channel].iter().sum()
    }

    /// `channel,bin,count` rows with a header line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["channel", "bin", "count"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for (c, name) in CHANNELS.iter().enumerate() {
            for (b, n) in self.bins[c].iter().enumerate() {
                w.write_record([name.to_string(), b.to_string(), n.to_string()])
                    .map_err(|e| Error::Data(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }
}

/// Record indices of a seeded sample without replacement, ascending.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(&mut rng::stream(seed, "histogram.sample"), len, n.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Per-channel pixel counts over a seeded sample of `sample_n` tiles.
/// Unreadable tiles are listed in `errors` and skipped.
pub fn channel_histogram(manifest: &Manifest, sample_n: usize, seed: u64) -> Histogram {
    let mut h = Histogram::empty();
    let idx = sample_indices(manifest.len(), sample_n, seed);
    h.sampled = idx.len();
    for i in idx {
        let rec = &manifest.records[i];
        let path = manifest.resolve(rec);
        match read_rgb8(&path) {
            Ok(img) => {
                h.add_raster(img.as_raw());
                h.read += 1;
            }
            Err(e) => h.errors.push(RecordError {
                tile_path: path,
                message: e.to_string(),
            }),
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteComposition {
    pub site: String,
    pub tiles: usize,
    pub counts: Vec<u64>,
    /// Share of each class among all positive labels at the site.
    pub percent: Vec<f64>,
    pub positive_labels: u64,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub classes: Vec<String>,
    pub sites: Vec<SiteComposition>,
}

/// Label frequency per site, sites in lexicographic order.
pub fn composition_report(manifest: &Manifest) -> Result<CompositionReport> {
    if manifest.is_empty() {
        return Err(Error::Data("composition report needs a non-empty manifest".into()));
    }
    let c = manifest.classes.len();
    let mut sites: BTreeMap<&str, (usize, Vec<u64>)> = BTreeMap::new();
    for r in &manifest.records {
        let entry = sites.entry(&r.site).or_insert_with(|| (0, vec![0; c]));
        entry.0 += 1;
        for (n, &b) in entry.1.iter_mut().zip(&r.labels.0) {
            *n += u64::from(b);
        }
    }
    let sites = sites
        .into_iter()
        .map(|(site, (tiles, counts))| {
            let total: u64 = counts.iter().sum();
            let percent = counts
                .iter()
                .map(|&n| if total == 0 { 0.0 } else { percent(n as f64 / total as f64) })
                .collect();
            SiteComposition {
                site: site.to_string(),
                tiles,
                counts,
                percent,
                positive_labels: total,
                empty: total == 0,
            }
        })
        .collect();
    Ok(CompositionReport {
        classes: manifest.classes.clone(),
        sites,
    })
}
