//! Dataset construction: tiling, manifests, splits and statistics.

pub mod manifest;
pub mod raster;
pub mod split;
pub mod stats;
pub mod tiling;

pub use manifest::{plan_records, ImageDescriptor, Manifest, Season, TileRecord};
pub use split::{split_grouped, Split, SplitMode, SplitSpec};
pub use stats::{channel_histogram, composition_report, CompositionReport, Histogram};
pub use tiling::{tile_grid, tile_image, tile_offsets, DEFAULT_TILE};
