//! Tile manifests: a JSON-lines file whose first line is a header
//! `{"schema_version":1,"classes":[...]}` followed by one record per tile.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{LabelVector, CLASS_NAMES};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Dry,
    Wet,
}

impl Season {
    pub fn other(self) -> Self {
        match self {
            Season::Dry => Season::Wet,
            Season::Wet => Season::Dry,
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Season::Dry => "dry",
            Season::Wet => "wet",
        })
    }
}

impl FromStr for Season {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dry" => Ok(Season::Dry),
            "wet" => Ok(Season::Wet),
            _ => Err(Error::Config(format!("unknown season `{s}` (expected dry or wet)"))),
        }
    }
}

/// Three uppercase ASCII letters.
pub fn check_site(code: &str) -> Result<()> {
    if code.len() == 3 && code.bytes().all(|b| b.is_ascii_uppercase()) {
        Ok(())
    } else {
        Err(Error::Config(format!("site code `{code}` is not three uppercase letters")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRecord {
    pub tile_path: PathBuf,
    pub source_image_id: String,
    pub tile_index: usize,
    pub offset_x: u32,
    pub offset_y: u32,
    pub labels: LabelVector,
    pub site: String,
    pub season: Season,
    #[serde(default)]
    pub depth_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub records: Vec<TileRecord>,
    /// Directory that relative tile paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<TileRecord>) -> Self {
        Self {
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            records,
            root: PathBuf::new(),
        }
    }

    /// Same classes and root, different records.
    pub fn with_records(&self, records: Vec<TileRecord>) -> Self {
        Self {
            classes: self.classes.clone(),
            records,
            root: self.root.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &TileRecord) -> PathBuf {
        if record.tile_path.is_absolute() {
            record.tile_path.clone()
        } else {
            self.root.join(&record.tile_path)
        }
    }

    /// Distinct source images in first-appearance order.
    pub fn source_images(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.source_image_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys = HashSet::new();
        for r in &self.records {
            if r.labels.len() != self.classes.len() {
                return Err(Error::Data(format!(
                    "tile {} has {} labels, header declares {} classes",
                    r.tile_path.display(),
                    r.labels.len(),
                    self.classes.len()
                )));
            }
            check_site(&r.site)?;
            if !keys.insert((r.source_image_id.as_str(), r.tile_index)) {
                return Err(Error::Data(format!(
                    "duplicate tile {} #{}",
                    r.source_image_id, r.tile_index
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        let header = Header {
            schema_version: SCHEMA_VERSION,
            classes: self.classes.clone(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: impl BufRead, source: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(source, e))?;
                serde_json::from_str(&line).map_err(|e| Error::format(source, format!("line 1: {e}")))?
            }
            None => return Err(Error::format(source, "empty manifest (missing header line)")),
        };
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                source,
                format!("unsupported schema_version {}", header.schema_version),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(source, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TileRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(source, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        let m = Self {
            classes: header.classes,
            records,
            root: source.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate().map_err(|e| Error::format(source, e))?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(file), path)
    }
}

/// Where a source photograph came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDescriptor {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub site: String,
    pub season: Season,
    pub depth_m: Option<f64>,
}

/// Tile file name for a source image and tile index.
pub fn tile_file_name(source_image_id: &str, tile_index: usize) -> String {
    format!("{source_image_id}_t{tile_index:02}.png")
}

/// Manifest records for every tile of every image, without touching pixels.
/// Labels start empty. Records are ordered by `(source_image_id, tile_index)`.
pub fn plan_records(images: &[ImageDescriptor], tile: u32, tile_dir: &Path) -> Result<Vec<TileRecord>> {
    let mut sorted: Vec<&ImageDescriptor> = images.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::new();
    for img in sorted {
        check_site(&img.site)?;
        let grid = super::tiling::tile_grid(img.width, img.height, tile)
            .map_err(|e| Error::Geometry(format!("{}: {e}", img.id)))?;
        for (i, (x, y)) in grid.into_iter().enumerate() {
            out.push(TileRecord {
                tile_path: tile_dir.join(tile_file_name(&img.id, i)),
                source_image_id: img.id.clone(),
                tile_index: i,
                offset_x: x,
                offset_y: y,
                labels: LabelVector::zeros(CLASS_NAMES.len()),
                site: img.site.clone(),
                season: img.season,
                depth_m: img.depth_m,
            });
        }
    }
    Ok(out)
}
