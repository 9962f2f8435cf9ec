//! Command-line front end. Every subcommand is a thin adapter over the
//! library; machine output is JSON on stdout unless `--out` is given.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::attribution::grad_cam;
use crate::config::RunConfig;
use crate::data::manifest::{check_site, tile_file_name};
use crate::data::raster::{is_raster_path, read_rgb8, to_tensor, write_rgb8};
use crate::data::split::DEFAULT_HOLDOUT;
use crate::data::{
    channel_histogram, composition_report, plan_records, split_grouped, tile_image, ImageDescriptor, Manifest,
    Season, SplitMode, SplitSpec, TileRecord,
};
use crate::error::{Error, Result};
use crate::head::{class_index, LabelVector};
use crate::lora::count_trainable;
use crate::metrics::MetricsReport;
use crate::scalar::{Precision, Scalar};
use crate::train::checkpoint::checkpoint_precision;
use crate::train::sweep::parse_ranks;
use crate::train::{evaluate, load_samples, rank_sweep, train, Checkpoint, RunDir};

pub const THREADS_ENV: &str = "REEF_LORA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "reef-lora", version, about = "Low-rank adapted ViT for multi-label coral reef tiles")]
pub struct Cli {
    /// Write the JSON report to this file instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pub pretty: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut every PNG/PPM photo in a directory into tiles and write a manifest.
    Tile(TileArgs),
    /// Plan a manifest from an image descriptor CSV without reading pixels.
    Manifest(ManifestArgs),
    /// Partition a manifest into train/val/test manifests.
    Split(SplitArgs),
    /// Train adapters and head.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train and evaluate once per adapter rank.
    SweepRank(SweepArgs),
    /// Grad-CAM heatmap for one tile and class.
    Attribute(AttributeArgs),
    /// RGB histograms over a seeded sample of tiles.
    Histogram(HistogramArgs),
    /// Per-site label composition.
    Report(ReportArgs),
    /// Trainable and frozen parameter counts.
    Params(ParamsArgs),
    /// Print configuration defaults.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    pub image_dir: PathBuf,
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = crate::data::DEFAULT_TILE)]
    pub tile: u32,
    /// CSV with columns image,site,season[,depth_m]. Without it, file stems
    /// must look like `SITE_season_rest`.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// CSV with columns source_image_id,tile_index and one 0/1 column per class.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// CSV with columns id,width,height,site,season[,depth_m].
    pub images: PathBuf,
    /// Manifest file to write.
    pub manifest: PathBuf,
    #[arg(long, default_value_t = crate::data::DEFAULT_TILE)]
    pub tile: u32,
    /// Directory recorded in tile paths, relative to the manifest.
    #[arg(long, default_value = "tiles")]
    pub tile_dir: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    pub manifest: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: SplitMode,
    /// Comma-separated site codes held out for testing.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Option<Vec<String>>,
    #[arg(long, default_value = "dry")]
    pub train_season: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for train/val/test manifests (defaults to the input's).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<SplitMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    #[arg(long, default_value_t = crate::head::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub config: PathBuf,
    #[arg(long, default_value = "0,3,6,12,24")]
    pub ranks: String,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Also write the table as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    pub checkpoint: PathBuf,
    pub tile: PathBuf,
    /// Class abbreviation, case-insensitive (HLC, CPC, DDC, RBL, CPT, DSE, PRD, PHY).
    #[arg(long = "class")]
    pub class: String,
    /// Encoder state 0..=depth (defaults to the last block's input).
    #[arg(long)]
    pub layer: Option<usize>,
    /// Grayscale heatmap path (.png or .pgm); a `.json` sidecar is written next to it.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 1038)]
    pub sample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write `channel,bin,count` CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Include the per-layer breakdown.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub dump_defaults: bool,
}

/// Parses `argv` (program name first), runs, and returns the exit code:
/// 0 on success, 1 on runtime or data errors, 2 on usage errors.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    install_thread_pool();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn install_thread_pool() {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

/// Output sink honoring `--out` and `--pretty`.
struct Emitter<'a> {
    cli: &'a Cli,
}

impl Emitter<'_> {
    fn emit<S: Serialize>(&self, value: &S, table: impl FnOnce() -> String) -> Result<()> {
        let text = if self.cli.pretty {
            table()
        } else {
            let mut s = serde_json::to_string(value).expect("reports serialize");
            s.push('\n');
            s
        };
        match &self.cli.out {
            Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn pretty_json<S: Serialize>(v: &S) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

pub fn execute(cli: &Cli) -> Result<()> {
    let out = Emitter { cli };
    match &cli.command {
        Command::Tile(a) => cmd_tile(a, &out),
        Command::Manifest(a) => cmd_manifest(a, &out),
        Command::Split(a) => cmd_split(a, &out),
        Command::Train(a) => {
            let cfg = RunConfig::load(&a.config)?;
            match cfg.train.precision {
                Precision::F32 => cmd_train::<f32>(a, cfg, &out),
                Precision::F64 => cmd_train::<f64>(a, cfg, &out),
            }
        }
        Command::Eval(a) => match checkpoint_precision(&a.checkpoint)? {
            Precision::F32 => cmd_eval::<f32>(a, &out),
            Precision::F64 => cmd_eval::<f64>(a, &out),
        },
        Command::SweepRank(a) => {
            let cfg = RunConfig::load(&a.config)?;
            match cfg.train.precision {
                Precision::F32 => cmd_sweep::<f32>(a, cfg, &out),
                Precision::F64 => cmd_sweep::<f64>(a, cfg, &out),
            }
        }
        Command::Attribute(a) => match checkpoint_precision(&a.checkpoint)? {
            Precision::F32 => cmd_attribute::<f32>(a, &out),
            Precision::F64 => cmd_attribute::<f64>(a, &out),
        },
        Command::Histogram(a) => cmd_histogram(a, &out),
        Command::Report(a) => cmd_report(a, &out),
        Command::Params(a) => cmd_params(a, &out),
        Command::Config(a) => {
            if !a.dump_defaults {
                return Err(Error::Config("nothing to do (use `config --dump-defaults`)".into()));
            }
            let text = RunConfig::default().to_toml();
            match &cli.out {
                Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::format(path, format!("missing column `{name}`")))
}

fn optional_column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.eq_ignore_ascii_case(name))
}

fn parse_depth(s: Option<&str>, path: &Path, line: u64) -> Result<Option<f64>> {
    match s.map(str::trim).filter(|s| !s.is_empty()) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::format(path, format!("line {line}: depth_m `{v}` is not a number"))),
    }
}

/// Labels keyed by `(source_image_id, tile_index)`.
pub fn read_label_csv(path: &Path) -> Result<HashMap<(String, usize), LabelVector>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e))?.clone();
    let id = column(&headers, "source_image_id", path)?;
    let idx = column(&headers, "tile_index", path)?;
    let classes: Vec<usize> = crate::head::CLASS_NAMES
        .iter()
        .map(|c| column(&headers, c, path))
        .collect::<Result<_>>()?;
    let mut out = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::format(path, e))?;
        let tile: usize = row[idx]
            .parse()
            .map_err(|_| Error::format(path, format!("line {line}: bad tile_index `{}`", &row[idx])))?;
        let bits = classes
            .iter()
            .map(|&c| match &row[c] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::format(path, format!("line {line}: label `{other}` is not 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        out.insert((row[id].to_string(), tile), LabelVector(bits));
    }
    Ok(out)
}

fn apply_labels(records: &mut [TileRecord], labels: &HashMap<(String, usize), LabelVector>, path: &Path) -> Result<()> {
    let mut used = 0;
    for r in records.iter_mut() {
        if let Some(l) = labels.get(&(r.source_image_id.clone(), r.tile_index)) {
            r.labels = l.clone();
            used += 1;
        }
    }
    if used != labels.len() {
        return Err(Error::format(
            path,
            format!("{} label rows do not match any tile", labels.len() - used),
        ));
    }
    Ok(())
}

struct SiteMeta {
    site: String,
    season: Season,
    depth_m: Option<f64>,
}

fn read_meta_csv(path: &Path) -> Result<HashMap<String, SiteMeta>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e))?.clone();
    let (img, site, season) = (
        column(&headers, "image", path)?,
        column(&headers, "site", path)?,
        column(&headers, "season", path)?,
    );
    let depth = optional_column(&headers, "depth_m");
    let mut out = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::format(path, e))?;
        let code = row[site].to_ascii_uppercase();
        check_site(&code).map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
        let meta = SiteMeta {
            site: code,
            season: row[season]
                .parse()
                .map_err(|e| Error::format(path, format!("line {line}: {e}")))?,
            depth_m: parse_depth(depth.map(|d| &row[d]), path, line)?,
        };
        let key = Path::new(&row[img])
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.insert(key, meta);
    }
    Ok(out)
}

/// Site and season from a `SITE_season_rest` file stem.
fn meta_from_stem(stem: &str) -> Option<SiteMeta> {
    let mut parts = stem.split('_');
    let site = parts.next()?.to_ascii_uppercase();
    let season = parts.next()?.parse().ok()?;
    check_site(&site).ok()?;
    Some(SiteMeta {
        site,
        season,
        depth_m: None,
    })
}

#[derive(Debug, Serialize)]
struct TileSummary {
    images: usize,
    tiles: usize,
    manifest: PathBuf,
}

fn cmd_tile(a: &TileArgs, out: &Emitter) -> Result<()> {
    let entries = std::fs::read_dir(&a.image_dir).map_err(|e| Error::io(&a.image_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_raster_path(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .png or .ppm images found", a.image_dir.display())));
    }
    let meta = a.meta.as_deref().map(read_meta_csv).transpose()?;
    let tile_dir = a.out_dir.join("tiles");
    std::fs::create_dir_all(&tile_dir).map_err(|e| Error::io(&tile_dir, e))?;

    let per_image: Vec<Result<Vec<TileRecord>>> = paths
        .par_iter()
        .map(|path| {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let m = match &meta {
                Some(table) => table
                    .get(&stem)
                    .map(|m| SiteMeta {
                        site: m.site.clone(),
                        season: m.season,
                        depth_m: m.depth_m,
                    })
                    .ok_or_else(|| Error::Data(format!("{}: no row in the metadata CSV", path.display())))?,
                None => meta_from_stem(&stem).ok_or_else(|| {
                    Error::Data(format!(
                        "{}: cannot infer site and season (expected SITE_season_*.png or --meta)",
                        path.display()
                    ))
                })?,
            };
            let img = read_rgb8(path)?;
            let tiles = tile_image(&img, a.tile).map_err(|e| Error::Geometry(format!("{}: {e}", path.display())))?;
            tiles
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    let rel = Path::new("tiles").join(tile_file_name(&stem, i));
                    write_rgb8(&a.out_dir.join(&rel), &t.raster)?;
                    Ok(TileRecord {
                        tile_path: rel,
                        source_image_id: stem.clone(),
                        tile_index: i,
                        offset_x: t.offset_x,
                        offset_y: t.offset_y,
                        labels: LabelVector::zeros(crate::head::NUM_CLASSES),
                        site: m.site.clone(),
                        season: m.season,
                        depth_m: m.depth_m,
                    })
                })
                .collect()
        })
        .collect();
    let mut records = Vec::new();
    for r in per_image {
        records.extend(r?);
    }
    if let Some(lp) = &a.labels {
        apply_labels(&mut records, &read_label_csv(lp)?, lp)?;
    }
    let manifest = Manifest::new(records);
    let path = a.out_dir.join("manifest.jsonl");
    manifest.save(&path)?;
    let summary = TileSummary {
        images: paths.len(),
        tiles: manifest.len(),
        manifest: path,
    };
    out.emit(&summary, || {
        format!("{} images -> {} tiles\nmanifest: {}\n", summary.images, summary.tiles, summary.manifest.display())
    })
}

/// Image descriptors from a CSV with columns id,width,height,site,season[,depth_m].
pub fn read_image_csv(path: &Path) -> Result<Vec<ImageDescriptor>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e))?.clone();
    let cols: Vec<usize> = ["id", "width", "height", "site", "season"]
        .iter()
        .map(|c| column(&headers, c, path))
        .collect::<Result<_>>()?;
    let depth = optional_column(&headers, "depth_m");
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::format(path, e))?;
        let num = |c: usize, what: &str| -> Result<u32> {
            row[c]
                .parse()
                .map_err(|_| Error::format(path, format!("line {line}: bad {what} `{}`", &row[c])))
        };
        out.push(ImageDescriptor {
            id: row[cols[0]].to_string(),
            width: num(cols[1], "width")?,
            height: num(cols[2], "height")?,
            site: row[cols[3]].to_ascii_uppercase(),
            season: row[cols[4]]
                .parse()
                .map_err(|e| Error::format(path, format!("line {line}: {e}")))?,
            depth_m: parse_depth(depth.map(|d| &row[d]), path, line)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ManifestSummary {
    images: usize,
    tiles: usize,
    manifest: PathBuf,
}

fn cmd_manifest(a: &ManifestArgs, out: &Emitter) -> Result<()> {
    let images = read_image_csv(&a.images)?;
    let mut records = plan_records(&images, a.tile, &a.tile_dir)?;
    if let Some(lp) = &a.labels {
        apply_labels(&mut records, &read_label_csv(lp)?, lp)?;
    }
    let manifest = Manifest::new(records);
    manifest.save(&a.manifest)?;
    let s = ManifestSummary {
        images: images.len(),
        tiles: manifest.len(),
        manifest: a.manifest.clone(),
    };
    out.emit(&s, || format!("{} images -> {} tiles\n", s.images, s.tiles))
}

#[derive(Debug, Serialize)]
struct PartSummary {
    images: usize,
    tiles: usize,
    sites: Vec<String>,
    manifest: PathBuf,
}

#[derive(Debug, Serialize)]
struct SplitSummary {
    mode: SplitMode,
    seed: u64,
    train: PartSummary,
    val: PartSummary,
    test: PartSummary,
}

/// Rewrites relative tile paths so they stay valid from `dest`.
fn rebase(m: &Manifest, dest: &Path) -> Result<Manifest> {
    let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    };
    let root = if m.root.as_os_str().is_empty() { Path::new(".") } else { m.root.as_path() };
    if same(root, dest) {
        return Ok(m.clone());
    }
    let abs_root = root.canonicalize().map_err(|e| Error::io(root, e))?;
    let mut out = m.clone();
    for r in &mut out.records {
        if r.tile_path.is_relative() {
            r.tile_path = abs_root.join(&r.tile_path);
        }
    }
    out.root = dest.to_path_buf();
    Ok(out)
}

fn cmd_split(a: &SplitArgs, out: &Emitter) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let mut spec = SplitSpec::new(a.mode, a.seed);
    spec.holdout_sites = a
        .holdout
        .clone()
        .unwrap_or_else(|| DEFAULT_HOLDOUT.iter().map(|s| s.to_string()).collect())
        .into_iter()
        .map(|s| s.trim().to_ascii_uppercase())
        .collect();
    spec.train_season = a.train_season.parse()?;
    let split = split_grouped(&manifest, &spec)?;
    let dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| a.manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(if dir.as_os_str().is_empty() { Path::new(".") } else { &dir })
        .map_err(|e| Error::io(&dir, e))?;
    let stem = a.manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let write = |name: &str, part: &Manifest| -> Result<PartSummary> {
        let path = dir.join(format!("{stem}.{name}.jsonl"));
        rebase(part, &dir)?.save(&path)?;
        let mut sites: Vec<String> = part.records.iter().map(|r| r.site.clone()).collect();
        sites.sort();
        sites.dedup();
        Ok(PartSummary {
            images: part.source_images().len(),
            tiles: part.len(),
            sites,
            manifest: path,
        })
    };
    let s = SplitSummary {
        mode: a.mode,
        seed: a.seed,
        train: write("train", &split.train)?,
        val: write("val", &split.val)?,
        test: write("test", &split.test)?,
    };
    out.emit(&s, || {
        let mut t = format!("{:<6} {:>7} {:>7}  sites\n", "split", "images", "tiles");
        for (n, p) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            let _ = writeln!(t, "{n:<6} {:>7} {:>7}  {}", p.images, p.tiles, p.sites.join(","));
        }
        t
    })
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    iterations: u64,
    final_loss: Option<f64>,
    best_val_match_ratio: Option<f64>,
    latest: PathBuf,
    best: PathBuf,
    log: PathBuf,
    frozen_hash: String,
    trainable_params: usize,
    skipped_tiles: Vec<crate::data::stats::RecordError>,
}

fn cmd_train<T: Scalar>(a: &TrainArgs, mut cfg: RunConfig, out: &Emitter) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.max_iterations = n;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(r) = a.rank {
        cfg.lora.rank = r;
    }
    cfg.validate()?;
    let train_m = Manifest::load(&a.train_manifest)?;
    let val_m = Manifest::load(&a.val_manifest)?;
    let dir = RunDir {
        dir: a
            .out_dir
            .clone()
            .or_else(|| cfg.data.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("run")),
    };
    let (outcome, skipped) = train::<T>(&cfg.model, &cfg.lora, &cfg.train, &train_m, &val_m, Some(&dir))?;
    for s in &skipped {
        eprintln!("skipped {}: {}", s.tile_path.display(), s.message);
    }
    let s = TrainSummary {
        iterations: outcome.latest.iteration,
        final_loss: outcome.log.last().map(|e| e.loss),
        best_val_match_ratio: outcome.latest.best_val_match_ratio,
        latest: dir.latest(),
        best: dir.best(),
        log: dir.log(),
        frozen_hash: outcome.latest.model.frozen_hash(),
        trainable_params: outcome.latest.model.budget().trainable,
        skipped_tiles: skipped,
    };
    out.emit(&s, || pretty_json(&s))
}

fn metrics_table(r: &MetricsReport) -> String {
    let mut t = format!(
        "samples {}\nmatch ratio {:.2}%  micro F1 {:.2}%  macro F1 {:.2}%\n\n{:<5} {:>9} {:>9} {:>9} {:>8}\n",
        r.samples, r.percent.match_ratio, r.percent.micro_f1, r.percent.macro_f1, "class", "precision", "recall", "f1", "support"
    );
    for c in &r.per_class {
        let _ = writeln!(t, "{:<5} {:>9.4} {:>9.4} {:>9.4} {:>8}", c.class, c.precision, c.recall, c.f1, c.support);
    }
    t
}

fn cmd_eval<T: Scalar>(a: &EvalArgs, out: &Emitter) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let ckpt = Checkpoint::<T>::load(&a.checkpoint)?;
    let report = evaluate(&ckpt, &manifest, a.threshold)?;
    out.emit(&report, || metrics_table(&report))
}

fn required(p: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("no {flag} given and data.{key} is not set")))
}

fn cmd_sweep<T: Scalar>(a: &SweepArgs, mut cfg: RunConfig, out: &Emitter) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.max_iterations = n;
    }
    let ranks = parse_ranks(&a.ranks)?;
    let load = |p: PathBuf| -> Result<Vec<crate::train::Sample<T>>> {
        let m = Manifest::load(&p)?;
        Ok(load_samples::<T>(&m, &cfg.model, cfg.train.strict)?.samples)
    };
    let tr = load(required(a.train.clone().or(cfg.data.train_manifest.clone()), "--train", "train_manifest")?)?;
    let va = load(required(a.val.clone().or(cfg.data.val_manifest.clone()), "--val", "val_manifest")?)?;
    let te = load(required(a.test.clone().or(cfg.data.test_manifest.clone()), "--test", "test_manifest")?)?;
    let table = rank_sweep(&cfg.model, &cfg.lora, &cfg.train, &ranks, &tr, &va, &te)?;
    if let Some(p) = &a.csv {
        std::fs::write(p, table.to_csv()?).map_err(|e| Error::io(p, e))?;
    }
    out.emit(&table, || {
        let mut t = format!("{:>4} {:>12} {:>9} {:>9}  status\n", "r", "trainable", "val MR", "test MR");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}%", x * 100.0));
        for row in &table.rows {
            let _ = writeln!(
                t,
                "{:>4} {:>12} {:>9} {:>9}  {}",
                row.r,
                row.trainable_params.map_or("-".into(), |n| n.to_string()),
                f(row.val_match_ratio),
                f(row.test_match_ratio),
                row.status
            );
        }
        t
    })
}

fn cmd_attribute<T: Scalar>(a: &AttributeArgs, out: &Emitter) -> Result<()> {
    let class = class_index(&a.class)?;
    let ckpt = Checkpoint::<T>::load(&a.checkpoint)?;
    let img = read_rgb8(&a.tile)?;
    let size = ckpt.model.config.image_size as u32;
    if img.dimensions() != (size, size) {
        return Err(Error::Geometry(format!(
            "{}: tile is {}×{} but the checkpoint expects {size}×{size}",
            a.tile.display(),
            img.width(),
            img.height()
        )));
    }
    let mut heat = grad_cam(&ckpt.model, &to_tensor::<T>(&img), class, a.layer)?;
    heat.tile = Some(a.tile.clone());
    let path = a.heatmap.clone().unwrap_or_else(|| {
        let stem = a.tile.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        PathBuf::from(format!("{stem}.{}.cam.png", heat.class_name))
    });
    heat.save(&path)?;
    out.emit(&heat, || {
        let g = heat.grid_size[1];
        let mut t = format!("{} layer {} -> {}\n", heat.class_name, heat.layer, path.display());
        for row in heat.grid.chunks(g) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(t, "{}", cells.join(" "));
        }
        t
    })
}

fn cmd_histogram(a: &HistogramArgs, out: &Emitter) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let h = channel_histogram(&manifest, a.sample, a.seed);
    for e in &h.errors {
        eprintln!("unreadable {}: {}", e.tile_path.display(), e.message);
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, h.to_csv()?).map_err(|e| Error::io(p, e))?;
    }
    out.emit(&h, || {
        let mut t = format!("sampled {} read {} errors {}\n", h.sampled, h.read, h.errors.len());
        for (c, name) in crate::data::stats::CHANNELS.iter().enumerate() {
            let total = h.channel_total(c);
            let mean = if total == 0 {
                0.0
            } else {
                h.bins[c].iter().enumerate().map(|(b, &n)| b as f64 * n as f64).sum::<f64>() / total as f64
            };
            let _ = writeln!(t, "{name:<5} pixels {total} mean {mean:.2}");
        }
        t
    })
}

fn cmd_report(a: &ReportArgs, out: &Emitter) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let r = composition_report(&manifest)?;
    out.emit(&r, || {
        let mut t = format!("{:<5} {:>6}", "site", "tiles");
        for c in &r.classes {
            let _ = write!(t, " {c:>7}");
        }
        t.push('\n');
        for s in &r.sites {
            let _ = write!(t, "{:<5} {:>6}", s.site, s.tiles);
            for p in &s.percent {
                let _ = write!(t, " {p:>6.2}%");
            }
            t.push_str(if s.empty { "  (no labels)\n" } else { "\n" });
        }
        t
    })
}

fn cmd_params(a: &ParamsArgs, out: &Emitter) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(r) = a.rank {
        cfg.lora.rank = r;
    }
    let mut budget = count_trainable(&cfg.model, &cfg.lora)?;
    if !a.layers {
        budget.layers.clear();
    }
    out.emit(&budget, || {
        format!(
            "trainable {}\n  adapters {}\n  head {}\nfrozen {}\ntotal {}\ntrainable share {:.4}%\n",
            budget.trainable,
            budget.adapter,
            budget.head,
            budget.frozen,
            budget.total,
            100.0 * budget.trainable as f64 / budget.total as f64
        )
    })
}
