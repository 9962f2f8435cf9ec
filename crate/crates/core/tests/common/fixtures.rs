//! Synthetic tiles and manifests.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use reef_lora::data::raster::{to_tensor, write_rgb8};
use reef_lora::data::{ImageDescriptor, Manifest, Season, TileRecord};
use reef_lora::head::LabelVector;
use reef_lora::rng;
use reef_lora::train::Sample;
use reef_lora::Scalar;

/// Distinct 8-bit label vectors (multiplication by an odd constant is a
/// bijection mod 256).
pub fn distinct_labels(i: usize) -> LabelVector {
    let code = (i * 0b1011_0101 + 3) & 0xff;
    LabelVector((0..8).map(|b| code >> b & 1 == 1).collect())
}

/// A textured tile: a per-index base colour, a diagonal stripe pattern and
/// seeded noise.
pub fn synthetic_tile(size: u32, index: usize, seed: u64) -> RgbImage {
    let noise = rng::uniform(&mut rng::stream(seed, &format!("tile.{index}")), (size * size * 3) as usize, 0.0, 40.0);
    let base = [(index * 67) % 200, (index * 151 + 40) % 200, (index * 29 + 90) % 200];
    let period = 4 + (index % 5) as u32 * 3;
    RgbImage::from_fn(size, size, |x, y| {
        let stripe = if ((x + y * (index as u32 % 3 + 1)) / period).is_multiple_of(2) { 30 } else { 0 };
        let k = ((y * size + x) * 3) as usize;
        let px: [u8; 3] = std::array::from_fn(|c| (base[c] as f64 + stripe as f64 + noise[k + c]).min(255.0) as u8);
        Rgb(px)
    })
}

pub fn samples<T: Scalar>(n: usize, size: u32, seed: u64) -> Vec<Sample<T>> {
    (0..n)
        .map(|i| Sample {
            image: to_tensor(&synthetic_tile(size, i, seed)),
            labels: distinct_labels(i),
            tile_path: PathBuf::from(format!("synthetic_{i}.png")),
        })
        .collect()
}

pub const SITES: [&str; 6] = ["TTB", "ALK", "SKI", "CBK", "SIN", "SWP"];

/// Writes `n` tiles as PNG under `dir/tiles` and returns a manifest rooted
/// at `dir` (one source image per tile).
pub fn write_tiles(dir: &Path, n: usize, size: u32, seed: u64) -> Manifest {
    std::fs::create_dir_all(dir.join("tiles")).unwrap();
    let mut records = Vec::new();
    for i in 0..n {
        let rel = PathBuf::from(format!("tiles/src{i:03}_t00.png"));
        write_rgb8(&dir.join(&rel), &synthetic_tile(size, i, seed)).unwrap();
        records.push(TileRecord {
            tile_path: rel,
            source_image_id: format!("src{i:03}"),
            tile_index: 0,
            offset_x: 0,
            offset_y: 0,
            labels: distinct_labels(i),
            site: SITES[i % SITES.len()].into(),
            season: if i % 4 == 3 { Season::Wet } else { Season::Dry },
            depth_m: Some(3.0 + i as f64 * 0.5),
        });
    }
    let mut m = Manifest::new(records);
    m.root = dir.to_path_buf();
    m
}

/// `n` camera-sized image descriptors spread over every site and season.
pub fn descriptor_corpus(n: usize) -> Vec<ImageDescriptor> {
    (0..n)
        .map(|i| ImageDescriptor {
            id: format!("{}_{}_{i:05}", SITES[i % SITES.len()], if i % 3 == 0 { "wet" } else { "dry" }),
            width: 4000,
            height: 3000,
            site: SITES[i % SITES.len()].into(),
            season: if i % 3 == 0 { Season::Wet } else { Season::Dry },
            depth_m: None,
        })
        .collect()
}

/// Planned (pixel-free) manifest for `n` images with `tiles` tiles each.
pub fn planned_manifest(n: usize, tiles: usize, seed: u64) -> Manifest {
    let mut records = Vec::new();
    for i in 0..n {
        let site = SITES[(i * 7 + seed as usize) % SITES.len()];
        for t in 0..tiles {
            records.push(TileRecord {
                tile_path: PathBuf::from(format!("tiles/img{i:03}_t{t:02}.png")),
                source_image_id: format!("img{i:03}"),
                tile_index: t,
                offset_x: 512 * t as u32,
                offset_y: 0,
                labels: distinct_labels(i * tiles + t),
                site: site.into(),
                season: if (i + seed as usize).is_multiple_of(2) { Season::Dry } else { Season::Wet },
                depth_m: None,
            });
        }
    }
    Manifest::new(records)
}
