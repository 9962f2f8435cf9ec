//! Train/validation/test partitions at source-image granularity.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{check_site, Manifest, Season, TileRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Mixup,
    SeasonTransfer,
    SiteHoldout,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mixup" => Ok(Self::Mixup),
            "season" | "season_transfer" => Ok(Self::SeasonTransfer),
            "site" | "site_holdout" => Ok(Self::SiteHoldout),
            _ => Err(Error::Config(format!(
                "unknown split mode `{s}` (expected mixup, season or site)"
            ))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mixup => "mixup",
            Self::SeasonTransfer => "season_transfer",
            Self::SiteHoldout => "site_holdout",
        })
    }
}

pub const DEFAULT_HOLDOUT: [&str; 4] = ["TTB", "ALK", "SKI", "CBK"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Train, validation, test weights for mixup. The transfer modes use the
    /// train and validation weights within the training pool.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub holdout_sites: Vec<String>,
    pub train_season: Season,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, seed: u64) -> Self {
        Self {
            mode,
            ratios: [0.7, 0.1, 0.2],
            seed,
            holdout_sites: DEFAULT_HOLDOUT.iter().map(|s| s.to_string()).collect(),
            train_season: Season::Dry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!("split ratios {:?} must be positive", self.ratios)));
        }
        if self.mode == SplitMode::Mixup && (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {:?} must sum to 1", self.ratios)));
        }
        if self.mode == SplitMode::SiteHoldout {
            if self.holdout_sites.is_empty() {
                return Err(Error::Config("site holdout needs at least one site".into()));
            }
            self.holdout_sites.iter().try_for_each(|s| check_site(s))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Largest-remainder apportionment of `total` items by `weights`. Ties on
/// the remainder go to the earlier part.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Source images sorted by id, then shuffled under the seeded stream.
fn shuffled_groups(ids: BTreeSet<&str>, seed: u64, label: &str) -> Vec<String> {
    let mut ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
    ids.shuffle(&mut rng::stream(seed, label));
    ids
}

/// Tiles of the given groups, in group order then tile order.
fn gather(manifest: &Manifest, groups: &[String]) -> Manifest {
    let mut by_group: HashMap<&str, Vec<&TileRecord>> = HashMap::new();
    for r in &manifest.records {
        by_group.entry(&r.source_image_id).or_default().push(r);
    }
    let mut records = Vec::new();
    for g in groups {
        let mut tiles = by_group.remove(g.as_str()).unwrap_or_default();
        tiles.sort_by_key(|r| r.tile_index);
        records.extend(tiles.into_iter().cloned());
    }
    manifest.with_records(records)
}

fn partition(groups: Vec<String>, weights: &[f64]) -> Vec<Vec<String>> {
    let counts = apportion(groups.len(), weights);
    let mut it = groups.into_iter();
    counts.iter().map(|&n| it.by_ref().take(n).collect()).collect()
}

pub fn split_grouped(manifest: &Manifest, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(Error::Data("cannot split an empty manifest".into()));
    }
    let ids = |pred: &dyn Fn(&TileRecord) -> bool| -> BTreeSet<&str> {
        manifest
            .records
            .iter()
            .filter(|r| pred(r))
            .map(|r| r.source_image_id.as_str())
            .collect()
    };
    let (train, val, test) = match spec.mode {
        SplitMode::Mixup => {
            let groups = shuffled_groups(ids(&|_| true), spec.seed, "split.mixup");
            let mut parts = partition(groups, &spec.ratios).into_iter();
            (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap())
        }
        SplitMode::SeasonTransfer => {
            let season = spec.train_season;
            let pool = shuffled_groups(ids(&|r| r.season == season), spec.seed, "split.season");
            let test = shuffled_groups(ids(&|r| r.season != season), spec.seed, "split.season.test");
            let mut parts = partition(pool, &spec.ratios[..2]).into_iter();
            (parts.next().unwrap(), parts.next().unwrap(), test)
        }
        SplitMode::SiteHoldout => {
            let present: BTreeSet<&str> = manifest.records.iter().map(|r| r.site.as_str()).collect();
            if let Some(missing) = spec.holdout_sites.iter().find(|s| !present.contains(s.as_str())) {
                return Err(Error::Config(format!(
                    "holdout site `{missing}` does not occur in the manifest (sites present: {})",
                    present.into_iter().collect::<Vec<_>>().join(", ")
                )));
            }
            let held = |r: &TileRecord| spec.holdout_sites.contains(&r.site);
            let pool = shuffled_groups(ids(&|r| !held(r)), spec.seed, "split.site");
            let test = shuffled_groups(ids(&held), spec.seed, "split.site.test");
            let mut parts = partition(pool, &spec.ratios[..2]).into_iter();
            (parts.next().unwrap(), parts.next().unwrap(), test)
        }
    };
    if let Some(shared) = check_groups_consistent(manifest) {
        return Err(Error::Data(format!(
            "source image `{shared}` has tiles with conflicting site or season"
        )));
    }
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::Data(format!(
                "{} split would be empty ({} mode, {} source images)",
                name,
                spec.mode,
                manifest.source_images().len()
            )));
        }
    }
    Ok(Split {
        train: gather(manifest, &train),
        val: gather(manifest, &val),
        test: gather(manifest, &test),
    })
}

/// A source image whose tiles disagree on site or season, if any.
fn check_groups_consistent(manifest: &Manifest) -> Option<String> {
    let mut seen: HashMap<&str, (&str, Season)> = HashMap::new();
    for r in &manifest.records {
        let entry = seen.entry(&r.source_image_id).or_insert((&r.site, r.season));
        if *entry != (r.site.as_str(), r.season) {
            return Some(r.source_image_id.clone());
        }
    }
    None
}
