//! Synthetic region generator with exact ground truth.
//!
//! A region is a rectangle of whole tiles in a transverse Mercator frame
//! centred on the region. Structures are placed in a slot lattice inside each
//! tile (never touching tile edges), so point-to-tile assignment is immune to
//! coordinate rounding in the CSV files. Scenes are aligned to the tile pixel
//! lattice and overlap by a few tiles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counties::{County, CountyMap};
use crate::error::{Error, Result};
use crate::geogrid::{GeoPoint, GeoTransform, GridSpec, ProjRect, SceneMeta, TileIndex};
use crate::labels::{
    derive_class_labels, write_buildings_csv, write_customers_csv, ConnectionType,
    CustomerRecord, RawCounts, TileLabelMap,
};
use crate::projection::Projection;
use crate::raster::{FloatRaster, RgbRaster};
use crate::rng;

pub const SCENES_DIR: &str = "scenes";
pub const SCENES_INDEX: &str = "scenes/scenes.json";
pub const CUSTOMERS_CSV: &str = "customers.csv";
pub const BUILDINGS_CSV: &str = "buildings.csv";
pub const COUNTIES_GEOJSON: &str = "counties.geojson";
pub const TRUTH_JSONL: &str = "truth.jsonl";
pub const GRID_JSON: &str = "grid.json";
pub const NIGHTLIGHTS_TIF: &str = "nightlights.tif";

const K_CENTRES: u64 = 1;
const K_COUNTIES: u64 = 2;
const K_TILE: u64 = 3;
const K_YEARS: u64 = 4;
const K_RENDER: u64 = 5;
const K_SHUFFLE: u64 = 6;
const K_NL: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySpec {
    pub n_centers: u32,
    pub urban_sigma_tiles: f64,
    /// Expected structures per tile added at an urban centre.
    pub peak_per_tile: f64,
    /// Expected structures per tile everywhere.
    pub background_per_tile: f64,
}

impl Default for DensitySpec {
    fn default() -> Self {
        DensitySpec {
            n_centers: 6,
            urban_sigma_tiles: 6.0,
            peak_per_tile: 9.0,
            background_per_tile: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElectrificationSpec {
    pub base_rate: f64,
    /// Added to the base rate in proportion to urbanness (0 rural, 1 centre).
    pub urban_boost: f64,
}

impl Default for ElectrificationSpec {
    fn default() -> Self {
        ElectrificationSpec {
            base_rate: 0.15,
            urban_boost: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualSpec {
    /// Structure slots per tile side; capacity is the square of this.
    pub slots_per_side: u32,
    pub footprint_px_min: u32,
    pub footprint_px_max: u32,
    /// Side of the small mark drawn next to electrified structures.
    pub mark_px: u32,
    /// 0 = imagery carries no electrification signal, 1 = full signal.
    pub cue_strength: f64,
    /// Amplitude of the smooth background texture, 0..1.
    pub texture: f64,
    /// Per-pixel Gaussian noise, in digital numbers.
    pub noise: f64,
}

impl Default for VisualSpec {
    fn default() -> Self {
        VisualSpec {
            slots_per_side: 4,
            footprint_px_min: 7,
            footprint_px_max: 11,
            mark_px: 3,
            cue_strength: 1.0,
            texture: 1.0,
            noise: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YearSpec {
    pub min: i32,
    pub max: i32,
    /// Probability that a scene is captured before 2014.
    pub pre_2014_fraction: f64,
}

impl Default for YearSpec {
    fn default() -> Self {
        YearSpec {
            min: 2012,
            max: 2017,
            pre_2014_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NightLightsSpec {
    /// NL cell side in tiles; at least 10 so a cell spans >= 100 tiles.
    pub cell_tiles: u32,
    /// Gaussian point-spread radius in cells; 0 disables blurring.
    pub psf_radius_cells: f64,
    /// Noise standard deviation in electrified structures per tile.
    pub noise: f64,
}

impl Default for NightLightsSpec {
    fn default() -> Self {
        NightLightsSpec {
            cell_tiles: 10,
            psf_radius_cells: 0.7,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub center_lon: f64,
    pub center_lat: f64,
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub tile_size_m: f64,
    pub resolution_m_per_px: f64,
    pub n_counties: u32,
    pub density: DensitySpec,
    pub electrification: ElectrificationSpec,
    /// Probability that an electrified structure is residential.
    pub residential_fraction: f64,
    /// Probability that an electrified structure has extra customer records.
    pub duplicate_rate: f64,
    pub visual: VisualSpec,
    pub years: YearSpec,
    pub scene_tiles: u32,
    pub scene_stride_tiles: u32,
    pub nightlights: NightLightsSpec,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            center_lon: 37.0,
            center_lat: 0.3,
            tiles_x: 72,
            tiles_y: 72,
            tile_size_m: 250.0,
            resolution_m_per_px: 2.5,
            n_counties: 16,
            density: DensitySpec::default(),
            electrification: ElectrificationSpec::default(),
            residential_fraction: 0.8,
            duplicate_rate: 0.3,
            visual: VisualSpec::default(),
            years: YearSpec::default(),
            scene_tiles: 20,
            scene_stride_tiles: 16,
            nightlights: NightLightsSpec::default(),
            seed: 0,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl SceneSpec {
    pub fn tile_px(&self) -> u32 {
        (self.tile_size_m / self.resolution_m_per_px).round() as u32
    }

    pub fn capacity(&self) -> u32 {
        self.visual.slots_per_side * self.visual.slots_per_side
    }

    pub fn validate(&self) -> Result<()> {
        unit("electrification.base_rate", self.electrification.base_rate)?;
        unit("electrification.urban_boost", self.electrification.urban_boost)?;
        unit("residential_fraction", self.residential_fraction)?;
        unit("duplicate_rate", self.duplicate_rate)?;
        unit("visual.cue_strength", self.visual.cue_strength)?;
        unit("visual.texture", self.visual.texture)?;
        unit("years.pre_2014_fraction", self.years.pre_2014_fraction)?;
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::Config("region must be at least one tile".into()));
        }
        if self.n_counties == 0 || self.n_counties as u64 > self.tiles_x as u64 * self.tiles_y as u64 {
            return Err(Error::Config(format!(
                "n_counties = {} must be between 1 and the tile count",
                self.n_counties
            )));
        }
        if self.years.min > self.years.max {
            return Err(Error::Config("years.min exceeds years.max".into()));
        }
        if self.scene_tiles == 0 || self.scene_stride_tiles == 0 || self.scene_stride_tiles > self.scene_tiles {
            return Err(Error::Config(
                "scene_stride_tiles must be in 1..=scene_tiles so scenes overlap or abut".into(),
            ));
        }
        if self.nightlights.cell_tiles < 10 {
            return Err(Error::Config("nightlights.cell_tiles must be >= 10".into()));
        }
        if !(self.nightlights.noise >= 0.0 && self.nightlights.psf_radius_cells >= 0.0) {
            return Err(Error::Config("nightlights noise and psf radius must be >= 0".into()));
        }
        if !(self.visual.noise >= 0.0) {
            return Err(Error::Config("visual.noise must be >= 0".into()));
        }
        let d = &self.density;
        if !(d.peak_per_tile >= 0.0 && d.background_per_tile >= 0.0 && d.urban_sigma_tiles > 0.0) {
            return Err(Error::Config("density parameters must be non-negative".into()));
        }
        let v = &self.visual;
        if v.slots_per_side == 0 || v.footprint_px_min == 0 || v.footprint_px_min > v.footprint_px_max {
            return Err(Error::Config("bad slot or footprint sizes".into()));
        }
        let tp = self.tile_px();
        if (self.tile_size_m / self.resolution_m_per_px - tp as f64).abs() > 1e-9 || tp == 0 {
            return Err(Error::Config("tile size must be a whole number of pixels".into()));
        }
        if v.footprint_px_max + v.mark_px + 2 > tp / v.slots_per_side {
            return Err(Error::Generation(format!(
                "structures of {} px plus a {} px mark do not fit {} slots per side of a {} px tile",
                v.footprint_px_max, v.mark_px, v.slots_per_side, tp
            )));
        }
        let lambda_max = d.background_per_tile + d.peak_per_tile;
        if lambda_max > self.capacity() as f64 {
            return Err(Error::Generation(format!(
                "expected {lambda_max} structures per tile exceeds tile capacity {}",
                self.capacity()
            )));
        }
        Ok(())
    }

    pub fn projection(&self) -> Projection {
        Projection::transverse_mercator(self.center_lon, self.center_lat)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let w = self.tiles_x as f64 * self.tile_size_m;
        let h = self.tiles_y as f64 * self.tile_size_m;
        // keep the origin on a whole-tile multiple so edges are exact
        let x0 = -((self.tiles_x / 2) as f64) * self.tile_size_m;
        let y0 = -((self.tiles_y / 2) as f64) * self.tile_size_m;
        GridSpec::over_projected(
            &ProjRect {
                min_x: x0,
                min_y: y0,
                max_x: x0 + w,
                max_y: y0 + h,
            },
            self.tile_size_m,
            self.resolution_m_per_px,
            self.projection(),
        )
    }
}

/// One placed structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub tile: TileIndex,
    pub x: f64,
    pub y: f64,
    pub point: GeoPoint,
    /// Connection type when electrified.
    pub connection: Option<ConnectionType>,
    pub footprint_px: u32,
    /// Roof brightness offset in digital numbers.
    pub tone: i32,
    /// Number of customer records emitted (electrified only).
    pub n_customers: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlan {
    pub scene_id: String,
    pub col0: u32,
    pub row0: u32,
    pub n_cols: u32,
    pub n_rows: u32,
    pub capture_year: i32,
}

impl ScenePlan {
    pub fn bounds(&self, grid: &GridSpec) -> ProjRect {
        let s = grid.tile_size_m;
        ProjRect {
            min_x: grid.origin_x + self.col0 as f64 * s,
            min_y: grid.origin_y + self.row0 as f64 * s,
            max_x: grid.origin_x + (self.col0 + self.n_cols) as f64 * s,
            max_y: grid.origin_y + (self.row0 + self.n_rows) as f64 * s,
        }
    }
}

/// Everything about a synthetic region except the rendered pixels.
#[derive(Debug, Clone)]
pub struct RegionPlan {
    pub grid: GridSpec,
    pub counties: CountyMap,
    pub structures: Vec<Structure>,
    pub scenes: Vec<ScenePlan>,
    pub customers: Vec<CustomerRecord>,
    pub truth: TileLabelMap,
}

impl RegionPlan {
    pub fn n_electrified(&self) -> usize {
        self.structures.iter().filter(|s| s.connection.is_some()).count()
    }
}

fn urban_centres(spec: &SceneSpec) -> Vec<(f64, f64)> {
    let mut r = rng::stream(spec.seed, &[K_CENTRES]);
    (0..spec.density.n_centers)
        .map(|_| {
            (
                r.random::<f64>() * spec.tiles_x as f64,
                r.random::<f64>() * spec.tiles_y as f64,
            )
        })
        .collect()
}

fn urbanness(centres: &[(f64, f64)], sigma: f64, tx: f64, ty: f64) -> f64 {
    centres
        .iter()
        .map(|&(cx, cy)| (-((tx - cx).powi(2) + (ty - cy).powi(2)) / (2.0 * sigma * sigma)).exp())
        .fold(0.0, f64::max)
}

/// Row bands of trapezoids with jittered dividing lines.
fn county_lattice(spec: &SceneSpec, extent: &ProjRect) -> Result<CountyMap> {
    let n = spec.n_counties;
    let bands = ((n as f64).sqrt().round() as u32).clamp(1, n);
    let mut r = rng::stream(spec.seed, &[K_COUNTIES]);
    let band_h = extent.height() / bands as f64;
    let mut counties = Vec::with_capacity(n as usize);
    let mut next_id = 1u32;
    for b in 0..bands {
        let m = n / bands + u32::from(b < n % bands);
        let yb = extent.min_y + b as f64 * band_h;
        let yt = if b + 1 == bands {
            extent.max_y
        } else {
            extent.min_y + (b + 1) as f64 * band_h
        };
        let w = extent.width() / m as f64;
        let divider = |j: u32, r: &mut ChaCha8Rng| -> (f64, f64) {
            if j == 0 {
                (extent.min_x, extent.min_x)
            } else if j == m {
                (extent.max_x, extent.max_x)
            } else {
                let base = extent.min_x + j as f64 * w;
                let jb = (r.random::<f64>() - 0.5) * 0.5 * w;
                let jt = (r.random::<f64>() - 0.5) * 0.5 * w;
                (base + jb, base + jt)
            }
        };
        let mut left = divider(0, &mut r);
        for j in 1..=m {
            let right = divider(j, &mut r);
            counties.push(County {
                id: next_id,
                name: format!("County {next_id:02}"),
                rings: vec![vec![(left.0, yb), (right.0, yb), (right.1, yt), (left.1, yt)]],
            });
            next_id += 1;
            left = right;
        }
    }
    CountyMap::new(counties)
}

fn positions(n: u32, size: u32, stride: u32) -> Vec<(u32, u32)> {
    if size >= n {
        return vec![(0, n)];
    }
    let mut out = Vec::new();
    let mut p = 0;
    while p + size < n {
        out.push((p, size));
        p += stride;
    }
    out.push((n - size, size));
    out.dedup();
    out
}

fn sample_year(spec: &YearSpec, r: &mut ChaCha8Rng) -> i32 {
    let pre = (spec.min, spec.max.min(2013));
    let post = (spec.min.max(2014), spec.max);
    let has_pre = pre.0 <= pre.1;
    let has_post = post.0 <= post.1;
    let use_pre = r.random::<f64>() < spec.pre_2014_fraction;
    let (lo, hi) = match (has_pre, has_post) {
        (true, true) if use_pre => pre,
        (_, true) => post,
        _ => pre,
    };
    r.random_range(lo..=hi)
}

fn plan_scenes(spec: &SceneSpec) -> Vec<ScenePlan> {
    let cols = positions(spec.tiles_x, spec.scene_tiles, spec.scene_stride_tiles);
    let rows = positions(spec.tiles_y, spec.scene_tiles, spec.scene_stride_tiles);
    let mut out = Vec::new();
    for &(row0, n_rows) in &rows {
        for &(col0, n_cols) in &cols {
            let i = out.len() as u64;
            let mut r = rng::stream(spec.seed, &[K_YEARS, i]);
            out.push(ScenePlan {
                scene_id: format!("S{i:03}"),
                col0,
                row0,
                n_cols,
                n_rows,
                capture_year: sample_year(&spec.years, &mut r),
            });
        }
    }
    out
}

fn place_tile(
    spec: &SceneSpec,
    grid: &GridSpec,
    centres: &[(f64, f64)],
    idx: TileIndex,
) -> Result<Vec<Structure>> {
    let mut r = rng::stream(spec.seed, &[K_TILE, idx.col as u64, idx.row as u64]);
    let u = urbanness(
        centres,
        spec.density.urban_sigma_tiles,
        idx.col as f64 + 0.5,
        idx.row as f64 + 0.5,
    );
    let lambda = spec.density.background_per_tile + spec.density.peak_per_tile * u;
    let cap = spec.capacity();
    let count = if lambda > 0.0 {
        let p = Poisson::new(lambda).map_err(|e| Error::Generation(e.to_string()))?;
        (p.sample(&mut r) as u32).min(cap)
    } else {
        0
    };
    let mut slots: Vec<u32> = (0..cap).collect();
    slots.shuffle(&mut r);
    let v = &spec.visual;
    let res = spec.resolution_m_per_px;
    let slot_px = (spec.tile_px() / v.slots_per_side) as f64;
    let bounds = grid.tile_bounds(idx)?;
    let p_elec = (spec.electrification.base_rate + spec.electrification.urban_boost * u).min(1.0);
    let mut out = Vec::with_capacity(count as usize);
    for &slot in slots.iter().take(count as usize) {
        let (sc, sr) = (slot % v.slots_per_side, slot / v.slots_per_side);
        let footprint_px = r.random_range(v.footprint_px_min..=v.footprint_px_max);
        // box [c - f/2, c + f/2 + mark] must stay 1 px inside the slot
        let half = footprint_px as f64 / 2.0;
        let lo = 1.0 + half;
        let hi = slot_px - 1.0 - half - v.mark_px as f64;
        let jx = r.random::<f64>();
        let jy = r.random::<f64>();
        let cx_px = sc as f64 * slot_px + lo + jx * (hi - lo);
        // structure rows are counted from the tile's north edge
        let cy_px = sr as f64 * slot_px + lo + jy * (hi - lo);
        let tone = r.random_range(-20..=20);
        let (u_elec, u_res, u_kind, u_dup) = (
            r.random::<f64>(),
            r.random::<f64>(),
            r.random::<f64>(),
            r.random::<f64>(),
        );
        let extra = r.random_range(1..=3u32);
        let connection = (u_elec < p_elec).then(|| {
            if u_res < spec.residential_fraction {
                ConnectionType::Residential
            } else if u_kind < 0.7 {
                ConnectionType::Commercial
            } else {
                ConnectionType::Industrial
            }
        });
        let x = bounds.min_x + cx_px * res;
        let y = bounds.max_y - cy_px * res;
        let (lon, lat) = grid.projection.inverse(x, y);
        let n_customers = match connection {
            Some(_) if u_dup < spec.duplicate_rate => 1 + extra,
            Some(_) => 1,
            None => 0,
        };
        out.push(Structure {
            tile: idx,
            x,
            y,
            point: GeoPoint { lon, lat },
            connection,
            footprint_px,
            tone,
            n_customers,
        });
    }
    Ok(out)
}

/// Analytic per-tile labels from placed structures.
pub fn truth_labels(structures: &[Structure]) -> Result<TileLabelMap> {
    let mut counts: BTreeMap<TileIndex, RawCounts> = BTreeMap::new();
    for s in structures {
        let c = counts.entry(s.tile).or_default();
        c.n_total += 1;
        match s.connection {
            Some(ConnectionType::Residential) => c.n_elec_res += 1,
            Some(_) => c.n_elec_nonres += 1,
            None => {}
        }
    }
    let mut tiles = BTreeMap::new();
    for (idx, c) in counts {
        tiles.insert(idx, derive_class_labels(c)?);
    }
    Ok(TileLabelMap { tiles, outside: 0 })
}

/// Lays out counties, structures, customers and scenes without rendering.
pub fn plan_region(spec: &SceneSpec) -> Result<RegionPlan> {
    spec.validate()?;
    let grid = spec.grid()?;
    let counties = county_lattice(spec, &grid.extent())?;
    let centres = urban_centres(spec);
    let tiles: Vec<TileIndex> = grid.indices().collect();
    let per_tile: Vec<Vec<Structure>> = tiles
        .par_iter()
        .map(|&idx| place_tile(spec, &grid, &centres, idx))
        .collect::<Result<_>>()?;
    let structures: Vec<Structure> = per_tile.into_iter().flatten().collect();
    let mut customers = Vec::new();
    for s in &structures {
        let Some(conn) = s.connection else { continue };
        for k in 0..s.n_customers {
            // duplicates of non-residential customers alternate type group members
            let connection_type = match conn {
                ConnectionType::Residential => conn,
                _ if k % 2 == 1 => ConnectionType::Industrial,
                _ => conn,
            };
            customers.push(CustomerRecord {
                lon: s.point.lon,
                lat: s.point.lat,
                connection_type,
            });
        }
    }
    customers.shuffle(&mut rng::stream(spec.seed, &[K_SHUFFLE]));
    let truth = truth_labels(&structures)?;
    Ok(RegionPlan {
        grid,
        counties,
        structures,
        scenes: plan_scenes(spec),
        customers,
        truth,
    })
}

const SOIL: [f64; 3] = [168.0, 142.0, 106.0];
const GREEN_SHIFT: [f64; 3] = [-58.0, -22.0, -46.0];
const ROOF_DARK: [f64; 3] = [96.0, 88.0, 82.0];
const ROOF_BRIGHT: [f64; 3] = [236.0, 236.0, 228.0];
const MARK: [f64; 3] = [252.0, 214.0, 30.0];
const TEXTURE_CELL_PX: usize = 16;

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders one scene: smooth soil/vegetation texture, structures, noise.
pub fn render_scene(spec: &SceneSpec, plan: &RegionPlan, scene: &ScenePlan) -> Result<RgbRaster> {
    let grid = &plan.grid;
    let res = grid.resolution_m_per_px;
    let tp = grid.tile_px() as usize;
    let w = scene.n_cols as usize * tp;
    let h = scene.n_rows as usize * tp;
    let b = scene.bounds(grid);
    let mut r = rng::stream(spec.seed, &[K_RENDER, rng::str_key(&scene.scene_id)]);
    let v = &spec.visual;

    let lw = w / TEXTURE_CELL_PX + 2;
    let lh = h / TEXTURE_CELL_PX + 2;
    let lattice: Vec<f64> = (0..lw * lh).map(|_| r.random::<f64>()).collect();
    let mut img = vec![0f64; 3 * w * h];
    for i in 0..h {
        let fy = i as f64 / TEXTURE_CELL_PX as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for j in 0..w {
            let fx = j as f64 / TEXTURE_CELL_PX as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let l = |yy: usize, xx: usize| lattice[yy * lw + xx];
            let t = (1.0 - ty) * ((1.0 - tx) * l(y0, x0) + tx * l(y0, x0 + 1))
                + ty * ((1.0 - tx) * l(y0 + 1, x0) + tx * l(y0 + 1, x0 + 1));
            let g = v.texture * t;
            let o = 3 * (i * w + j);
            for c in 0..3 {
                img[o + c] = SOIL[c] + g * GREEN_SHIFT[c];
            }
        }
    }

    let cue = v.cue_strength;
    let fill = |img: &mut [f64], c0: i64, r0: i64, side: i64, rgb: [f64; 3], alpha: f64| {
        for rr in r0.max(0)..(r0 + side).min(h as i64) {
            for cc in c0.max(0)..(c0 + side).min(w as i64) {
                let o = 3 * (rr as usize * w + cc as usize);
                for k in 0..3 {
                    img[o + k] = (1.0 - alpha) * img[o + k] + alpha * rgb[k];
                }
            }
        }
    };
    for s in &plan.structures {
        let t = s.tile;
        if t.col < scene.col0
            || t.col >= scene.col0 + scene.n_cols
            || t.row < scene.row0
            || t.row >= scene.row0 + scene.n_rows
        {
            continue;
        }
        let cf = (s.x - b.min_x) / res;
        let rf = (b.max_y - s.y) / res;
        let f = s.footprint_px as i64;
        let c0 = (cf - f as f64 / 2.0).round() as i64;
        let r0 = (rf - f as f64 / 2.0).round() as i64;
        let tone = s.tone as f64;
        let dark = [ROOF_DARK[0] + tone, ROOF_DARK[1] + tone, ROOF_DARK[2] + tone];
        let roof = match s.connection {
            Some(_) => {
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = dark[k] + cue * (ROOF_BRIGHT[k] + tone - dark[k]);
                }
                c
            }
            None => dark,
        };
        fill(&mut img, c0, r0, f, roof, 1.0);
        if s.connection.is_some() && cue > 0.0 {
            fill(&mut img, c0 + f, r0, v.mark_px as i64, MARK, cue);
        }
    }

    let noise = Normal::new(0.0, v.noise.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;
    let data: Vec<u8> = img
        .iter()
        .map(|&x| to_u8(if v.noise > 0.0 { x + noise.sample(&mut r) } else { x }))
        .collect();
    Ok(RgbRaster {
        width: w as u32,
        height: h as u32,
        transform: GeoTransform {
            origin_x: b.min_x,
            origin_y: b.max_y,
            pixel_width: res,
            pixel_height: res,
        },
        data,
    })
}

/// Low-resolution brightness: per-cell electrified structures per tile,
/// blurred with a Gaussian point-spread function, plus clipped noise.
pub fn generate_nl_raster(
    truth: &TileLabelMap,
    grid: &GridSpec,
    nl: &NightLightsSpec,
    seed: u64,
) -> Result<FloatRaster> {
    if nl.cell_tiles < 10 {
        return Err(Error::Config("nightlights.cell_tiles must be >= 10".into()));
    }
    let ct = nl.cell_tiles;
    let nc = grid.n_cols.div_ceil(ct) as usize;
    let nr = grid.n_rows.div_ceil(ct) as usize;
    // raster rows run north to south
    let mut counts = vec![0f64; nc * nr];
    for (idx, l) in &truth.tiles {
        let c = (idx.col / ct) as usize;
        let r = nr - 1 - (idx.row / ct) as usize;
        counts[r * nc + c] += l.n_elec as f64;
    }
    let per_tile = (ct * ct) as f64;
    let sigma = nl.psf_radius_cells;
    let reach = if sigma > 0.0 { (3.0 * sigma).ceil() as i64 } else { 0 };
    let mut bright = vec![0f64; nc * nr];
    for r in 0..nr as i64 {
        for c in 0..nc as i64 {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let w = if sigma > 0.0 {
                        (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp()
                    } else {
                        1.0
                    };
                    wsum += w;
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < nr as i64 && cc < nc as i64 {
                        acc += w * counts[rr as usize * nc + cc as usize];
                    }
                }
            }
            bright[r as usize * nc + c as usize] = acc / wsum / per_tile;
        }
    }
    let mut rg = rng::stream(seed, &[K_NL]);
    let data: Vec<f32> = if nl.noise > 0.0 {
        let n = Normal::new(0.0, nl.noise).map_err(|e| Error::Generation(e.to_string()))?;
        bright.iter().map(|&b| (b + n.sample(&mut rg)).max(0.0) as f32).collect()
    } else {
        bright.iter().map(|&b| b as f32).collect()
    };
    let cell_m = ct as f64 * grid.tile_size_m;
    Ok(FloatRaster {
        width: nc as u32,
        height: nr as u32,
        transform: GeoTransform {
            origin_x: grid.origin_x,
            origin_y: grid.origin_y + nr as f64 * cell_m,
            pixel_width: cell_m,
            pixel_height: cell_m,
        },
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n_tiles: usize,
    pub n_structures: usize,
    pub n_electrified: usize,
    pub n_customer_records: usize,
    pub n_scenes: usize,
    pub n_counties: usize,
    pub class_counts: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub grid: GridSpec,
    pub summary: SynthSummary,
    /// Every file written, relative to the output directory, sorted.
    pub files: Vec<PathBuf>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Generates and writes a full synthetic region into `out`.
pub fn generate_region(spec: &SceneSpec, out: &Path) -> Result<SynthOutputs> {
    let plan = plan_region(spec)?;
    let scenes_dir = out.join(SCENES_DIR);
    std::fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    let proj = plan.grid.projection.clone();

    let metas: Vec<SceneMeta> = plan
        .scenes
        .par_iter()
        .map(|s| {
            let raster = render_scene(spec, &plan, s)?;
            let name = format!("{}.tif", s.scene_id);
            raster.write_geotiff(&scenes_dir.join(&name), &proj)?;
            Ok(SceneMeta {
                scene_id: s.scene_id.clone(),
                geo_bounds: s.bounds(&plan.grid),
                capture_year: s.capture_year,
                raster: PathBuf::from(name),
            })
        })
        .collect::<Result<_>>()?;
    write_json(&out.join(SCENES_INDEX), &metas)?;

    write_customers_csv(&out.join(CUSTOMERS_CSV), &plan.customers)?;
    let buildings: Vec<GeoPoint> = plan.structures.iter().map(|s| s.point).collect();
    write_buildings_csv(&out.join(BUILDINGS_CSV), &buildings)?;
    plan.counties.write_geojson(&out.join(COUNTIES_GEOJSON), &proj)?;
    plan.truth.write_jsonl(&out.join(TRUTH_JSONL))?;
    write_json(&out.join(GRID_JSON), &plan.grid)?;
    let nl = generate_nl_raster(&plan.truth, &plan.grid, &spec.nightlights, spec.seed)?;
    nl.write_geotiff(&out.join(NIGHTLIGHTS_TIF), &proj)?;

    let mut class_counts = [0usize; 3];
    for idx in plan.grid.indices() {
        class_counts[plan.truth.get(idx).access_class.index()] += 1;
    }
    let mut files: Vec<PathBuf> = [
        SCENES_INDEX,
        CUSTOMERS_CSV,
        BUILDINGS_CSV,
        COUNTIES_GEOJSON,
        TRUTH_JSONL,
        GRID_JSON,
        NIGHTLIGHTS_TIF,
    ]
    .iter()
    .map(PathBuf::from)
    .chain(metas.iter().map(|m| Path::new(SCENES_DIR).join(&m.raster)))
    .collect();
    files.sort();
    Ok(SynthOutputs {
        summary: SynthSummary {
            n_tiles: plan.grid.n_tiles(),
            n_structures: plan.structures.len(),
            n_electrified: plan.n_electrified(),
            n_customer_records: plan.customers.len(),
            n_scenes: metas.len(),
            n_counties: plan.counties.counties.len(),
            class_counts,
        },
        grid: plan.grid,
        files,
    })
}

pub fn read_scene_index(path: &Path) -> Result<Vec<SceneMeta>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_grid(path: &Path) -> Result<GridSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{aggregate_tile_labels, dedupe_customers, read_buildings_csv, read_customers_csv};

    pub(crate) fn small(seed: u64) -> SceneSpec {
        SceneSpec {
            tiles_x: 12,
            tiles_y: 10,
            n_counties: 4,
            scene_tiles: 6,
            scene_stride_tiles: 5,
            density: DensitySpec {
                n_centers: 2,
                urban_sigma_tiles: 3.0,
                ..Default::default()
            },
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn structures_stay_inside_their_tile() {
        let spec = small(3);
        let plan = plan_region(&spec).unwrap();
        assert!(!plan.structures.is_empty());
        for s in &plan.structures {
            let b = plan.grid.tile_bounds(s.tile).unwrap();
            assert!(s.x - b.min_x > 2.0 && b.max_x - s.x > 2.0);
            assert!(s.y - b.min_y > 2.0 && b.max_y - s.y > 2.0);
            assert_eq!(plan.grid.tile_index_of(s.point).unwrap(), s.tile);
        }
    }

    #[test]
    fn every_electrified_structure_has_a_customer() {
        let plan = plan_region(&small(5)).unwrap();
        let dd = dedupe_customers(&plan.customers);
        assert_eq!(dd.points.len(), plan.n_electrified());
        assert!(plan.customers.len() > plan.n_electrified(), "duplicates injected");
    }

    #[test]
    fn zero_density_gives_empty_region() {
        let mut spec = small(1);
        spec.density.peak_per_tile = 0.0;
        spec.density.background_per_tile = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let out = generate_region(&spec, dir.path()).unwrap();
        assert_eq!(out.summary.n_structures, 0);
        assert_eq!(out.summary.class_counts, [out.summary.n_tiles, 0, 0]);
        assert_eq!(read_customers_csv(&dir.path().join(CUSTOMERS_CSV)).unwrap().records.len(), 0);
        assert_eq!(read_buildings_csv(&dir.path().join(BUILDINGS_CSV)).unwrap().records.len(), 0);
    }

    #[test]
    fn overflowing_density_is_rejected() {
        let mut spec = small(1);
        spec.density.peak_per_tile = 40.0;
        assert!(matches!(plan_region(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn truth_matches_label_pipeline_on_written_csvs() {
        let spec = small(11);
        let dir = tempfile::tempdir().unwrap();
        let out = generate_region(&spec, dir.path()).unwrap();
        let cust = read_customers_csv(&dir.path().join(CUSTOMERS_CSV)).unwrap();
        let bld = read_buildings_csv(&dir.path().join(BUILDINGS_CSV)).unwrap();
        let elec = dedupe_customers(&cust.records);
        let labels = aggregate_tile_labels(&elec.points, &bld.records, &out.grid).unwrap();
        let p = dir.path().join("labels.jsonl");
        labels.write_jsonl(&p).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(dir.path().join(TRUTH_JSONL)).unwrap()
        );
    }

    #[test]
    fn scenes_cover_every_tile() {
        let spec = small(2);
        let plan = plan_region(&spec).unwrap();
        let mut covered = std::collections::BTreeSet::new();
        for s in &plan.scenes {
            for c in s.col0..s.col0 + s.n_cols {
                for r in s.row0..s.row0 + s.n_rows {
                    covered.insert(TileIndex::new(c, r));
                }
            }
            assert!((2012..=2017).contains(&s.capture_year));
        }
        assert_eq!(covered.len(), plan.grid.n_tiles());
    }

    #[test]
    fn raising_base_rate_raises_electrified_count() {
        for seed in 0..5 {
            let mut last = 0;
            for base in [0.0, 0.2, 0.5, 0.9] {
                let mut spec = small(seed);
                spec.electrification.base_rate = base;
                spec.electrification.urban_boost = 0.1;
                let n: u32 = plan_region(&spec).unwrap().truth.tiles.values().map(|l| l.n_elec).sum();
                assert!(n >= last, "seed {seed} base {base}");
                last = n;
            }
        }
    }

    #[test]
    fn zero_cue_leaves_no_visual_trace_of_electrification() {
        let mut spec = small(4);
        spec.visual.cue_strength = 0.0;
        spec.visual.noise = 0.0;
        let plan = plan_region(&spec).unwrap();
        let mut flipped = plan.clone();
        for s in &mut flipped.structures {
            s.connection = match s.connection {
                Some(_) => None,
                None => Some(ConnectionType::Residential),
            };
        }
        let a = render_scene(&spec, &plan, &plan.scenes[0]).unwrap();
        let b = render_scene(&spec, &flipped, &plan.scenes[0]).unwrap();
        assert_eq!(a.data, b.data);
    }

    fn nl_truth(cells: &[(u32, u32, u32)]) -> (TileLabelMap, GridSpec) {
        let grid = small(0).grid().unwrap();
        let mut tiles = BTreeMap::new();
        for &(c, r, n) in cells {
            tiles.insert(
                TileIndex::new(c, r),
                derive_class_labels(RawCounts {
                    n_total: n as i64,
                    n_elec_res: n as i64,
                    n_elec_nonres: 0,
                })
                .unwrap(),
            );
        }
        (TileLabelMap { tiles, outside: 0 }, grid)
    }

    #[test]
    fn dark_truth_gives_dark_raster() {
        let (t, g) = nl_truth(&[]);
        let nl = NightLightsSpec {
            noise: 0.0,
            ..Default::default()
        };
        let r = generate_nl_raster(&t, &g, &nl, 0).unwrap();
        assert!(r.data.iter().all(|&v| v == 0.0));
        assert_eq!((r.width, r.height), (2, 1));
    }

    #[test]
    fn brightest_cell_holds_the_cluster() {
        let grid = SceneSpec {
            tiles_x: 40,
            tiles_y: 40,
            ..small(0)
        }
        .grid()
        .unwrap();
        let mut tiles = BTreeMap::new();
        for c in 22..26 {
            for r in 3..6 {
                tiles.insert(
                    TileIndex::new(c, r),
                    derive_class_labels(RawCounts {
                        n_total: 4,
                        n_elec_res: 4,
                        n_elec_nonres: 0,
                    })
                    .unwrap(),
                );
            }
        }
        let t = TileLabelMap { tiles, outside: 0 };
        let r = generate_nl_raster(&t, &grid, &NightLightsSpec { noise: 0.0, ..Default::default() }, 0).unwrap();
        let (imax, _) = r
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        // tiles (22..26, 3..6) lie in cell column 2, the southernmost cell row
        assert_eq!((imax % 4, imax / 4), (2, 3));
    }

    #[test]
    fn unblurred_brightness_ranks_like_counts() {
        let grid = SceneSpec {
            tiles_x: 40,
            tiles_y: 30,
            ..small(0)
        }
        .grid()
        .unwrap();
        let plan = plan_region(&SceneSpec {
            tiles_x: 40,
            tiles_y: 30,
            ..small(8)
        })
        .unwrap();
        let nl = NightLightsSpec {
            noise: 0.0,
            psf_radius_cells: 0.0,
            ..Default::default()
        };
        let r = generate_nl_raster(&plan.truth, &grid, &nl, 0).unwrap();
        let mut counts = vec![0u32; r.data.len()];
        for (idx, l) in &plan.truth.tiles {
            let (x, y) = grid.tile_bounds(*idx).unwrap().center();
            let c = ((x - r.transform.origin_x) / r.transform.pixel_width) as usize;
            let rr = ((r.transform.origin_y - y) / r.transform.pixel_height) as usize;
            counts[rr * r.width as usize + c] += l.n_elec;
        }
        for a in 0..counts.len() {
            for b in 0..counts.len() {
                assert_eq!(counts[a].cmp(&counts[b]), r.data[a].total_cmp(&r.data[b]));
            }
        }
    }
}
