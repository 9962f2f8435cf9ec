//! Cutting source photographs into square tiles.

use image::RgbImage;

use crate::error::{Error, Result};

pub const DEFAULT_TILE: u32 = 512;

/// Evenly spaced offsets from 0 to `extent - tile`, `floor(extent / tile)`
/// of them, rounded half up to whole pixels.
pub fn tile_offsets(extent: u32, tile: u32) -> Result<Vec<u32>> {
    if tile == 0 {
        return Err(Error::Geometry("tile size must be positive".into()));
    }
    if extent < tile {
        return Err(Error::Geometry(format!("extent {extent} is smaller than tile {tile}")));
    }
    let n = u64::from(extent / tile);
    if n == 1 {
        return Ok(vec![0]);
    }
    let span = u64::from(extent - tile);
    Ok((0..n)
        .map(|i| ((2 * i * span + (n - 1)) / (2 * (n - 1))) as u32)
        .collect())
}

/// Tile origins in row-major order (rows outer).
pub fn tile_grid(width: u32, height: u32, tile: u32) -> Result<Vec<(u32, u32)>> {
    if width < tile || height < tile {
        return Err(Error::Geometry(format!(
            "image {width}×{height} is smaller than tile {tile}×{tile}"
        )));
    }
    let xs = tile_offsets(width, tile)?;
    let ys = tile_offsets(height, tile)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub offset_x: u32,
    pub offset_y: u32,
    pub raster: RgbImage,
}

pub fn tile_image(image: &RgbImage, tile: u32) -> Result<Vec<Tile>> {
    Ok(tile_grid(image.width(), image.height(), tile)?
        .into_iter()
        .map(|(x, y)| Tile {
            offset_x: x,
            offset_y: y,
            raster: image::imageops::crop_imm(image, x, y, tile, tile).to_image(),
        })
        .collect())
}
