//! Tile records: a tile joined with its county, capture year, image and labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::TileIndex;
use crate::labels::TileLabels;
use crate::raster::read_png_rgb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub index: TileIndex,
    pub county_id: u32,
    pub capture_year: i32,
    /// Image path relative to the working directory.
    pub image_path: String,
    pub labels: TileLabels,
}

pub fn write_records_jsonl(path: &Path, records: &[TileRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<TileRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads tile images (interleaved RGB bytes) in record order.
pub fn load_images(records: &[TileRecord], base: &Path, tile_px: u32) -> Result<Vec<Vec<u8>>> {
    records
        .par_iter()
        .map(|r| {
            let path = base.join(&r.image_path);
            let (w, h, px) = read_png_rgb(&path)?;
            if w != tile_px || h != tile_px {
                return Err(Error::shape(
                    format!("{tile_px}x{tile_px} tile"),
                    format!("{w}x{h} in {}", path.display()),
                ));
            }
            Ok(px)
        })
        .collect()
}
