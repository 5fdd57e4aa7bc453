//! Metric tile grid over a region and tile extraction from georeferenced scenes.
//!
//! Grid coordinates live in a [`Projection`]. Tiles are half-open squares:
//! tile `(c, r)` covers `[x0 + c*s, x0 + (c+1)*s) x [y0 + r*s, y0 + (r+1)*s)`
//! where `(x0, y0)` is the projected south-west corner of the region and `s`
//! the tile side in metres. Rows therefore grow northwards while image pixel
//! rows grow southwards.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::Projection;
use crate::raster::RgbRaster;

pub const DEFAULT_TILE_SIZE_M: f64 = 250.0;
pub const DEFAULT_RESOLUTION_M_PER_PX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

/// Longitude/latitude rectangle in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRect {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl GeoRect {
    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lon: 0.5 * (self.min_lon + self.max_lon),
            lat: 0.5 * (self.min_lat + self.max_lat),
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.min_lon, self.min_lat, self.max_lon, self.max_lat]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.min_lon >= self.max_lon || self.min_lat >= self.max_lat {
            return Err(Error::Input(format!("degenerate region bounds {self:?}")));
        }
        if self.min_lat < -85.0 || self.max_lat > 85.0 || self.max_lon - self.min_lon > 10.0 {
            return Err(Error::Input(format!(
                "region bounds {self:?} outside the supported projection domain"
            )));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in projected metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjRect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl ProjRect {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Half-open containment (min edges inclusive, max edges exclusive).
    pub fn contains_half_open(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x < self.max_x && y >= self.min_y && y < self.max_y
    }

    /// Closed containment of another rectangle.
    pub fn covers(&self, other: &ProjRect) -> bool {
        other.min_x >= self.min_x
            && other.max_x <= self.max_x
            && other.min_y >= self.min_y
            && other.max_y <= self.max_y
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct TileIndex {
    pub col: u32,
    pub row: u32,
}

impl TileIndex {
    pub fn new(col: u32, row: u32) -> Self {
        TileIndex { col, row }
    }
}

impl fmt::Display for TileIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}_r{}", self.col, self.row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Geographic position of the grid's south-west corner.
    pub origin: GeoPoint,
    pub origin_x: f64,
    pub origin_y: f64,
    pub tile_size_m: f64,
    pub resolution_m_per_px: f64,
    pub projection: Projection,
    pub n_cols: u32,
    pub n_rows: u32,
}

fn pixels_per_side(tile_size_m: f64, resolution: f64) -> Result<u32> {
    if !(tile_size_m > 0.0 && resolution > 0.0 && tile_size_m.is_finite() && resolution.is_finite())
    {
        return Err(Error::Config(format!(
            "tile size {tile_size_m} m and resolution {resolution} m/px must be positive"
        )));
    }
    let ratio = tile_size_m / resolution;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "tile size {tile_size_m} m is not an integral number of {resolution} m pixels"
        )));
    }
    Ok(rounded as u32)
}

/// Number of whole tiles needed to span `extent`, tolerant of round-off just
/// above an exact multiple.
fn tiles_to_cover(extent: f64, tile: f64) -> u32 {
    let q = extent / tile;
    let n = (q - 1e-9).ceil().max(1.0);
    n as u32
}

/// Builds a grid whose origin is the south-west corner of the region's
/// projected bounding box. The last row and column may extend past the region.
pub fn make_grid(
    region: &GeoRect,
    tile_size_m: f64,
    resolution_m_per_px: f64,
    projection: Projection,
) -> Result<GridSpec> {
    pixels_per_side(tile_size_m, resolution_m_per_px)?;
    region.validate()?;
    let bounds = projected_bounds(region, &projection);
    GridSpec::over_projected(&bounds, tile_size_m, resolution_m_per_px, projection)
}

/// Projected bounding box of a geographic rectangle, sampling each edge since
/// meridians and parallels are curved in the projection.
pub fn projected_bounds(region: &GeoRect, projection: &Projection) -> ProjRect {
    const SAMPLES: usize = 64;
    let mut rect = ProjRect {
        min_x: f64::INFINITY,
        min_y: f64::INFINITY,
        max_x: f64::NEG_INFINITY,
        max_y: f64::NEG_INFINITY,
    };
    let mut add = |lon: f64, lat: f64| {
        let (x, y) = projection.forward(lon, lat);
        rect.min_x = rect.min_x.min(x);
        rect.min_y = rect.min_y.min(y);
        rect.max_x = rect.max_x.max(x);
        rect.max_y = rect.max_y.max(y);
    };
    for i in 0..=SAMPLES {
        let t = i as f64 / SAMPLES as f64;
        let lon = region.min_lon + t * (region.max_lon - region.min_lon);
        let lat = region.min_lat + t * (region.max_lat - region.min_lat);
        add(lon, region.min_lat);
        add(lon, region.max_lat);
        add(region.min_lon, lat);
        add(region.max_lon, lat);
    }
    rect
}

impl GridSpec {
    pub fn over_projected(
        bounds: &ProjRect,
        tile_size_m: f64,
        resolution_m_per_px: f64,
        projection: Projection,
    ) -> Result<GridSpec> {
        pixels_per_side(tile_size_m, resolution_m_per_px)?;
        if !(bounds.width() > 0.0 && bounds.height() > 0.0) {
            return Err(Error::Input(format!("degenerate projected bounds {bounds:?}")));
        }
        let (lon, lat) = projection.inverse(bounds.min_x, bounds.min_y);
        Ok(GridSpec {
            origin: GeoPoint { lon, lat },
            origin_x: bounds.min_x,
            origin_y: bounds.min_y,
            tile_size_m,
            resolution_m_per_px,
            projection,
            n_cols: tiles_to_cover(bounds.width(), tile_size_m),
            n_rows: tiles_to_cover(bounds.height(), tile_size_m),
        })
    }

    /// Pixels per tile side.
    pub fn tile_px(&self) -> u32 {
        (self.tile_size_m / self.resolution_m_per_px).round() as u32
    }

    pub fn n_tiles(&self) -> usize {
        self.n_cols as usize * self.n_rows as usize
    }

    pub fn is_valid(&self, index: TileIndex) -> bool {
        index.col < self.n_cols && index.row < self.n_rows
    }

    fn check(&self, index: TileIndex) -> Result<()> {
        if self.is_valid(index) {
            Ok(())
        } else {
            Err(Error::InvalidIndex {
                col: index.col,
                row: index.row,
                n_cols: self.n_cols,
                n_rows: self.n_rows,
            })
        }
    }

    fn col_edge(&self, col: u32) -> f64 {
        self.origin_x + col as f64 * self.tile_size_m
    }

    fn row_edge(&self, row: u32) -> f64 {
        self.origin_y + row as f64 * self.tile_size_m
    }

    /// Full projected extent of the grid.
    pub fn extent(&self) -> ProjRect {
        ProjRect {
            min_x: self.origin_x,
            min_y: self.origin_y,
            max_x: self.col_edge(self.n_cols),
            max_y: self.row_edge(self.n_rows),
        }
    }

    pub fn tile_bounds(&self, index: TileIndex) -> Result<ProjRect> {
        self.check(index)?;
        Ok(ProjRect {
            min_x: self.col_edge(index.col),
            min_y: self.row_edge(index.row),
            max_x: self.col_edge(index.col + 1),
            max_y: self.row_edge(index.row + 1),
        })
    }

    /// Tile containing a projected point under the half-open rule. The result
    /// is consistent with [`GridSpec::tile_bounds`] bit for bit.
    pub fn tile_index_of_xy(&self, x: f64, y: f64) -> Result<TileIndex> {
        let col = locate(x, self.origin_x, self.tile_size_m, self.n_cols, |c| {
            self.col_edge(c)
        });
        let row = locate(y, self.origin_y, self.tile_size_m, self.n_rows, |r| {
            self.row_edge(r)
        });
        match (col, row) {
            (Some(col), Some(row)) => Ok(TileIndex { col, row }),
            _ => Err(Error::OutOfRange { x, y }),
        }
    }

    pub fn tile_index_of(&self, point: GeoPoint) -> Result<TileIndex> {
        let (x, y) = self.projection.forward(point.lon, point.lat);
        self.tile_index_of_xy(x, y)
    }

    /// All tile indices in row-major order (row, then column).
    pub fn indices(&self) -> impl Iterator<Item = TileIndex> + '_ {
        (0..self.n_rows).flat_map(move |row| (0..self.n_cols).map(move |col| TileIndex { col, row }))
    }
}

fn locate(v: f64, origin: f64, size: f64, n: u32, edge: impl Fn(u32) -> f64) -> Option<u32> {
    if !v.is_finite() || v < edge(0) || v >= edge(n) {
        return None;
    }
    let mut i = (((v - origin) / size).floor().max(0.0) as u32).min(n - 1);
    while i > 0 && v < edge(i) {
        i -= 1;
    }
    while i + 1 < n && v >= edge(i + 1) {
        i += 1;
    }
    Some(i)
}

/// Affine georeferencing of a north-up raster: top-left corner and pixel size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
}

impl GeoTransform {
    pub fn footprint(&self, width: u32, height: u32) -> ProjRect {
        ProjRect {
            min_x: self.origin_x,
            max_x: self.origin_x + width as f64 * self.pixel_width,
            max_y: self.origin_y,
            min_y: self.origin_y - height as f64 * self.pixel_height,
        }
    }

    /// Continuous pixel coordinates (col, row) of a projected point, with
    /// pixel centres at integer positions.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_width - 0.5,
            (self.origin_y - y) / self.pixel_height - 0.5,
        )
    }
}

/// Metadata for one large georeferenced scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub geo_bounds: ProjRect,
    pub capture_year: i32,
    /// Path of the GeoTIFF raster, relative to the scene metadata file.
    pub raster: PathBuf,
}

pub const PLAUSIBLE_YEARS: std::ops::RangeInclusive<i32> = 1972..=2100;

impl SceneMeta {
    pub fn validate(&self) -> Result<()> {
        if !PLAUSIBLE_YEARS.contains(&self.capture_year) {
            return Err(Error::Input(format!(
                "scene {} has implausible capture year {}",
                self.scene_id, self.capture_year
            )));
        }
        Ok(())
    }
}

/// A scene with its pixels loaded.
#[derive(Debug, Clone)]
pub struct Scene {
    pub meta: SceneMeta,
    pub raster: RgbRaster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Bilinear,
    Nearest,
}

/// A square RGB tile; pixels are row-major from the north edge, 3 bytes each.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    pub index: TileIndex,
    pub size: u32,
    pub pixels: Vec<u8>,
    pub capture_year: i32,
    pub source_scene_id: String,
}

impl ImageTile {
    pub fn pixel(&self, row: u32, col: u32) -> [u8; 3] {
        let o = 3 * (row as usize * self.size as usize + col as usize);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Cuts one tile out of a scene, resampling onto the tile's pixel lattice.
pub fn extract_tile(
    scene: &Scene,
    index: TileIndex,
    grid: &GridSpec,
    resampling: Resampling,
) -> Result<ImageTile> {
    let bounds = grid.tile_bounds(index)?;
    if !scene.meta.geo_bounds.covers(&bounds) {
        return Err(Error::Coverage {
            scene_id: scene.meta.scene_id.clone(),
            col: index.col,
            row: index.row,
        });
    }
    let n = grid.tile_px();
    let res = grid.resolution_m_per_px;
    let raster = &scene.raster;
    let mut pixels = vec![0u8; 3 * n as usize * n as usize];
    for i in 0..n {
        let y = bounds.max_y - (i as f64 + 0.5) * res;
        for j in 0..n {
            let x = bounds.min_x + (j as f64 + 0.5) * res;
            let (cf, rf) = raster.transform.to_pixel(x, y);
            let rgb = match resampling {
                Resampling::Nearest => raster.get_clamped(cf.round() as i64, rf.round() as i64),
                Resampling::Bilinear => raster.bilinear(cf, rf),
            };
            let o = 3 * (i as usize * n as usize + j as usize);
            pixels[o..o + 3].copy_from_slice(&rgb);
        }
    }
    Ok(ImageTile {
        index,
        size: n,
        pixels,
        capture_year: scene.meta.capture_year,
        source_scene_id: scene.meta.scene_id.clone(),
    })
}

/// Every grid tile whose bounds lie entirely inside the scene footprint.
pub fn scene_coverage(scene: &SceneMeta, grid: &GridSpec) -> Vec<TileIndex> {
    let b = &scene.geo_bounds;
    let s = grid.tile_size_m;
    let span = |lo: f64, hi: f64, origin: f64, n: u32| -> (u32, u32) {
        let a = ((lo - origin) / s).floor() - 1.0;
        let z = ((hi - origin) / s).ceil() + 1.0;
        let a = a.clamp(0.0, n as f64) as u32;
        let z = z.clamp(0.0, n as f64) as u32;
        (a, z)
    };
    let (c0, c1) = span(b.min_x, b.max_x, grid.origin_x, grid.n_cols);
    let (r0, r1) = span(b.min_y, b.max_y, grid.origin_y, grid.n_rows);
    let mut out = Vec::new();
    for row in r0..r1 {
        for col in c0..c1 {
            let idx = TileIndex { col, row };
            if let Ok(tb) = grid.tile_bounds(idx) {
                if b.covers(&tb) {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// Which scene each tile is taken from.
#[derive(Debug, Clone, Default)]
pub struct TileSources {
    /// Tile -> index into the scene list.
    pub chosen: BTreeMap<TileIndex, usize>,
    /// Grid tiles that no single scene fully covers.
    pub skipped: Vec<TileIndex>,
}

/// Assigns each tile to one fully covering scene: latest capture year wins,
/// ties go to the lexicographically smallest scene id.
pub fn select_tile_sources(scenes: &[SceneMeta], grid: &GridSpec) -> TileSources {
    let mut chosen: BTreeMap<TileIndex, usize> = BTreeMap::new();
    for (i, scene) in scenes.iter().enumerate() {
        for idx in scene_coverage(scene, grid) {
            chosen
                .entry(idx)
                .and_modify(|cur| {
                    let other = &scenes[*cur];
                    let better = scene.capture_year > other.capture_year
                        || (scene.capture_year == other.capture_year
                            && scene.scene_id < other.scene_id);
                    if better {
                        *cur = i;
                    }
                })
                .or_insert(i);
        }
    }
    let skipped = grid.indices().filter(|i| !chosen.contains_key(i)).collect();
    TileSources { chosen, skipped }
}

/// One line of the tile manifest (JSONL).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifestEntry {
    pub tile_col: u32,
    pub tile_row: u32,
    pub scene_id: String,
    pub capture_year: i32,
    pub image_path: String,
}

impl TileManifestEntry {
    pub fn index(&self) -> TileIndex {
        TileIndex::new(self.tile_col, self.tile_row)
    }
}
