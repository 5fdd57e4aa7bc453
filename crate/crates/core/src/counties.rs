//! County polygons and tile-to-county assignment.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geogrid::{GridSpec, TileIndex};
use crate::projection::Projection;

#[derive(Debug, Clone, PartialEq)]
pub struct County {
    pub id: u32,
    pub name: String,
    /// Rings in projected metres; containment is even-odd over all rings.
    pub rings: Vec<Vec<(f64, f64)>>,
}

impl County {
    fn signed_area_and_moment(&self) -> (f64, f64, f64) {
        let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for ring in &self.rings {
            for (i, &(x0, y0)) in ring.iter().enumerate() {
                let (x1, y1) = ring[(i + 1) % ring.len()];
                let cross = x0 * y1 - x1 * y0;
                a += cross;
                cx += (x0 + x1) * cross;
                cy += (y0 + y1) * cross;
            }
        }
        (a / 2.0, cx, cy)
    }

    pub fn area(&self) -> f64 {
        self.signed_area_and_moment().0.abs()
    }

    /// Area-weighted centroid.
    pub fn centroid(&self) -> (f64, f64) {
        let (a, cx, cy) = self.signed_area_and_moment();
        if a.abs() < f64::EPSILON {
            let pts: Vec<_> = self.rings.iter().flatten().collect();
            let n = pts.len().max(1) as f64;
            return (
                pts.iter().map(|p| p.0).sum::<f64>() / n,
                pts.iter().map(|p| p.1).sum::<f64>() / n,
            );
        }
        (cx / (6.0 * a), cy / (6.0 * a))
    }

    /// Crossing-number containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in &self.rings {
            let n = ring.len();
            for i in 0..n {
                let (xi, yi) = ring[i];
                let (xj, yj) = ring[(i + 1) % n];
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CountyMap {
    /// Sorted by id.
    pub counties: Vec<County>,
}

impl CountyMap {
    pub fn new(mut counties: Vec<County>) -> Result<Self> {
        counties.sort_by_key(|c| c.id);
        if counties.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Input("duplicate county ids".into()));
        }
        Ok(CountyMap { counties })
    }

    pub fn get(&self, id: u32) -> Option<&County> {
        self.counties
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.counties[i])
    }

    /// Area-weighted centroid of all counties together.
    pub fn region_centroid(&self) -> (f64, f64) {
        let (mut a, mut x, mut y) = (0.0, 0.0, 0.0);
        for c in &self.counties {
            let ca = c.area();
            let (cx, cy) = c.centroid();
            a += ca;
            x += ca * cx;
            y += ca * cy;
        }
        (x / a, y / a)
    }

    /// County of a projected point: the lowest-id polygon containing it, or
    /// the county with the nearest centroid when the point lies in no polygon.
    pub fn county_of(&self, x: f64, y: f64) -> Option<u32> {
        if let Some(c) = self.counties.iter().find(|c| c.contains(x, y)) {
            return Some(c.id);
        }
        self.counties
            .iter()
            .map(|c| {
                let (cx, cy) = c.centroid();
                ((cx - x).powi(2) + (cy - y).powi(2), c.id)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    }

    /// Assigns every grid tile to a county by its centre.
    pub fn assign_tiles(&self, grid: &GridSpec) -> Result<BTreeMap<TileIndex, u32>> {
        if self.counties.is_empty() {
            return Err(Error::Input("county map is empty".into()));
        }
        let mut out = BTreeMap::new();
        for idx in grid.indices() {
            let (x, y) = grid.tile_bounds(idx)?.center();
            out.insert(idx, self.county_of(x, y).expect("non-empty map"));
        }
        Ok(out)
    }

    /// Writes RFC 7946 GeoJSON in longitude/latitude.
    pub fn write_geojson(&self, path: &Path, projection: &Projection) -> Result<()> {
        let features: Vec<Value> = self
            .counties
            .iter()
            .map(|c| {
                let rings: Vec<Vec<[f64; 2]>> = c
                    .rings
                    .iter()
                    .map(|ring| {
                        let mut r: Vec<[f64; 2]> = ring
                            .iter()
                            .map(|&(x, y)| {
                                let (lon, lat) = projection.inverse(x, y);
                                [lon, lat]
                            })
                            .collect();
                        if let Some(&first) = r.first() {
                            r.push(first);
                        }
                        r
                    })
                    .collect();
                json!({
                    "type": "Feature",
                    "id": c.id,
                    "properties": { "county_id": c.id, "name": c.name },
                    "geometry": { "type": "Polygon", "coordinates": rings },
                })
            })
            .collect();
        let fc = json!({ "type": "FeatureCollection", "features": features });
        std::fs::write(path, serde_json::to_string_pretty(&fc)?).map_err(|e| Error::io(path, e))
    }

    /// Reads Polygon / MultiPolygon features and projects them.
    pub fn read_geojson(path: &Path, projection: &Projection) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text)?;
        let bad = |m: &str| Error::Input(format!("{}: {m}", path.display()));
        let features = v["features"]
            .as_array()
            .ok_or_else(|| bad("not a FeatureCollection"))?;
        let mut counties = Vec::new();
        for (i, f) in features.iter().enumerate() {
            let props = &f["properties"];
            let id = props["county_id"]
                .as_u64()
                .or_else(|| f["id"].as_u64())
                .unwrap_or(i as u64) as u32;
            let name = props["name"]
                .as_str()
                .map(str::to_string)
                .unwrap_or_else(|| format!("county-{id}"));
            let geom = &f["geometry"];
            let polys: Vec<&Value> = match geom["type"].as_str() {
                Some("Polygon") => vec![&geom["coordinates"]],
                Some("MultiPolygon") => geom["coordinates"]
                    .as_array()
                    .ok_or_else(|| bad("bad MultiPolygon"))?
                    .iter()
                    .collect(),
                other => return Err(bad(&format!("unsupported geometry {other:?}"))),
            };
            let mut rings = Vec::new();
            for poly in polys {
                for ring in poly.as_array().ok_or_else(|| bad("bad polygon"))? {
                    let mut pts: Vec<(f64, f64)> = ring
                        .as_array()
                        .ok_or_else(|| bad("bad ring"))?
                        .iter()
                        .map(|p| {
                            let lon = p[0].as_f64().ok_or_else(|| bad("bad coordinate"))?;
                            let lat = p[1].as_f64().ok_or_else(|| bad("bad coordinate"))?;
                            Ok(projection.forward(lon, lat))
                        })
                        .collect::<Result<_>>()?;
                    if pts.len() > 1 && pts.first() == pts.last() {
                        pts.pop();
                    }
                    if pts.len() >= 3 {
                        rings.push(pts);
                    }
                }
            }
            counties.push(County { id, name, rings });
        }
        CountyMap::new(counties)
    }
}
