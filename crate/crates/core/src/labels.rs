//! Per-tile ground truth from point data.
//!
//! Utility customers are collapsed into electrified structures (one per
//! location and customer-type group), counted per tile together with the
//! surveyed building locations, and turned into the three objective labels:
//! access class, low/high share of electrified structures, and low/high
//! share of residential structures among the electrified ones.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TileRecord;
use crate::error::{Error, Result};
use crate::geogrid::{GeoPoint, GridSpec, TileIndex};

/// Share at or below which a tile is "low".
pub const LOW_SHARE_THRESHOLD: f64 = 0.25;

/// Decimal places kept when matching customer coordinates.
pub const DEDUP_DECIMALS: i32 = 6;

pub const DEFAULT_MIN_YEAR: i32 = 2014;
pub const DEFAULT_MAX_YEAR: i32 = 2017;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionType {
    Residential,
    Commercial,
    Industrial,
}

impl ConnectionType {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "residential" => Some(Self::Residential),
            "commercial" => Some(Self::Commercial),
            "industrial" => Some(Self::Industrial),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Residential => "residential",
            Self::Commercial => "commercial",
            Self::Industrial => "industrial",
        }
    }

    /// Commercial and industrial customers share the non-residential group.
    pub fn structure_kind(&self) -> StructureKind {
        match self {
            Self::Residential => StructureKind::ElectrifiedResidential,
            Self::Commercial | Self::Industrial => StructureKind::ElectrifiedNonresidential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CustomerRecord {
    pub lon: f64,
    pub lat: f64,
    pub connection_type: ConnectionType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    ElectrifiedResidential,
    ElectrifiedNonresidential,
    BuildingUnclassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructurePoint {
    pub lon: f64,
    pub lat: f64,
    pub kind: StructureKind,
}

impl StructurePoint {
    pub fn point(&self) -> GeoPoint {
        GeoPoint {
            lon: self.lon,
            lat: self.lat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessClass {
    NoBuilding,
    Unelectrified,
    Electrified,
}

impl AccessClass {
    pub const ALL: [AccessClass; 3] = [
        AccessClass::NoBuilding,
        AccessClass::Unelectrified,
        AccessClass::Electrified,
    ];

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            AccessClass::NoBuilding => "no_building",
            AccessClass::Unelectrified => "unelectrified",
            AccessClass::Electrified => "electrified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PctClass {
    Low,
    High,
}

impl PctClass {
    pub fn of_share(share: f64) -> Self {
        if share <= LOW_SHARE_THRESHOLD {
            PctClass::Low
        } else {
            PctClass::High
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

/// Raw per-tile tallies before class derivation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RawCounts {
    pub n_total: i64,
    pub n_elec_res: i64,
    pub n_elec_nonres: i64,
}

impl RawCounts {
    fn merge(mut self, other: RawCounts) -> RawCounts {
        self.n_total += other.n_total;
        self.n_elec_res += other.n_elec_res;
        self.n_elec_nonres += other.n_elec_nonres;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileLabels {
    pub n_total: u32,
    pub n_elec: u32,
    pub n_elec_res: u32,
    pub n_elec_nonres: u32,
    pub n_unelec: u32,
    pub access_class: AccessClass,
    /// Electrified share of all structures; `None` when the tile is empty.
    pub pct_elec: Option<f64>,
    /// Defined only for tiles with at least one electrified structure.
    pub pct_class_b: Option<PctClass>,
    /// Residential share of electrified structures; `None` when `n_elec = 0`.
    pub pct_elec_res: Option<f64>,
    pub pct_class_c: Option<PctClass>,
    /// Set when the building survey undercounted electrified structures and
    /// `n_total` was raised to `n_elec`.
    #[serde(default)]
    pub reconciled: bool,
}

impl Default for TileLabels {
    fn default() -> Self {
        derive_class_labels(RawCounts::default()).expect("zero counts are valid")
    }
}

/// Fills class labels and shares from raw counts, reconciling
/// `n_elec > n_total` by raising `n_total`.
pub fn derive_class_labels(counts: RawCounts) -> Result<TileLabels> {
    let RawCounts {
        n_total,
        n_elec_res,
        n_elec_nonres,
    } = counts;
    if n_total < 0 || n_elec_res < 0 || n_elec_nonres < 0 {
        return Err(Error::Input(format!("negative counts {counts:?}")));
    }
    let to_u32 = |v: i64| {
        u32::try_from(v).map_err(|_| Error::Input(format!("count {v} out of range")))
    };
    let n_elec = to_u32(n_elec_res + n_elec_nonres)?;
    let mut n_total = to_u32(n_total)?;
    let reconciled = n_elec > n_total;
    if reconciled {
        n_total = n_elec;
    }
    let n_elec_res = to_u32(n_elec_res)?;
    let access_class = if n_total == 0 {
        AccessClass::NoBuilding
    } else if n_elec >= 1 {
        AccessClass::Electrified
    } else {
        AccessClass::Unelectrified
    };
    let pct_elec = (n_total > 0).then(|| n_elec as f64 / n_total as f64);
    let pct_elec_res = (n_elec > 0).then(|| n_elec_res as f64 / n_elec as f64);
    Ok(TileLabels {
        n_total,
        n_elec,
        n_elec_res,
        n_elec_nonres: to_u32(n_elec_nonres)?,
        n_unelec: n_total - n_elec,
        access_class,
        pct_elec,
        pct_class_b: if n_elec >= 1 {
            pct_elec.map(PctClass::of_share)
        } else {
            None
        },
        pct_elec_res,
        pct_class_c: pct_elec_res.map(PctClass::of_share),
        reconciled,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DedupOutcome {
    pub points: Vec<StructurePoint>,
    pub rejected: usize,
}

fn valid_coord(lon: f64, lat: f64) -> bool {
    lon.is_finite() && lat.is_finite() && lon.abs() <= 180.0 && lat.abs() <= 90.0
}

fn quantize(v: f64) -> i64 {
    (v * 10f64.powi(DEDUP_DECIMALS)).round() as i64
}

fn dequantize(q: i64) -> f64 {
    q as f64 / 10f64.powi(DEDUP_DECIMALS)
}

/// Collapses customers sharing a rounded location and customer-type group
/// into one electrified structure. Output is sorted by (lon, lat, kind).
pub fn dedupe_customers(records: &[CustomerRecord]) -> DedupOutcome {
    let mut rejected = 0;
    let mut keys: BTreeMap<(i64, i64, StructureKind), ()> = BTreeMap::new();
    for r in records {
        if !valid_coord(r.lon, r.lat) {
            rejected += 1;
            continue;
        }
        keys.insert(
            (quantize(r.lon), quantize(r.lat), r.connection_type.structure_kind()),
            (),
        );
    }
    let points = keys
        .into_keys()
        .map(|(lon, lat, kind)| StructurePoint {
            lon: dequantize(lon),
            lat: dequantize(lat),
            kind,
        })
        .collect();
    DedupOutcome { points, rejected }
}

/// Per-tile labels; tiles without any point are implicitly all-zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TileLabelMap {
    pub tiles: BTreeMap<TileIndex, TileLabels>,
    /// Points that fell outside the grid and were not counted.
    pub outside: usize,
}

impl TileLabelMap {
    pub fn get(&self, index: TileIndex) -> TileLabels {
        self.tiles.get(&index).copied().unwrap_or_default()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (idx, labels) in &self.tiles {
            let line = serde_json::to_string(&TileLabelLine {
                tile_col: idx.col,
                tile_row: idx.row,
                labels: *labels,
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tiles = BTreeMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: TileLabelLine = serde_json::from_str(&line)?;
            tiles.insert(TileIndex::new(l.tile_col, l.tile_row), l.labels);
        }
        Ok(TileLabelMap { tiles, outside: 0 })
    }
}

/// One JSONL line: tile index plus all label fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileLabelLine {
    pub tile_col: u32,
    pub tile_row: u32,
    #[serde(flatten)]
    pub labels: TileLabels,
}

type CountMap = BTreeMap<TileIndex, RawCounts>;

fn tally(
    points: &[StructurePoint],
    grid: &GridSpec,
    add: impl Fn(&StructurePoint) -> RawCounts + Sync,
) -> (CountMap, usize) {
    const CHUNK: usize = 4096;
    points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut m = CountMap::new();
            let mut outside = 0;
            for p in chunk {
                match grid.tile_index_of(p.point()) {
                    Ok(idx) => {
                        let e = m.entry(idx).or_default();
                        *e = e.merge(add(p));
                    }
                    Err(_) => outside += 1,
                }
            }
            (m, outside)
        })
        .reduce(|| (CountMap::new(), 0), merge_counts)
}

fn merge_counts(a: (CountMap, usize), b: (CountMap, usize)) -> (CountMap, usize) {
    let (mut big, small) = if a.0.len() >= b.0.len() { (a, b) } else { (b, a) };
    for (k, v) in small.0 {
        let e = big.0.entry(k).or_default();
        *e = e.merge(v);
    }
    (big.0, big.1 + small.1)
}

/// Counts electrified structures and surveyed buildings per tile.
pub fn aggregate_tile_labels(
    electrified: &[StructurePoint],
    buildings: &[StructurePoint],
    grid: &GridSpec,
) -> Result<TileLabelMap> {
    let elec = tally(electrified, grid, |p| match p.kind {
        StructureKind::ElectrifiedResidential => RawCounts {
            n_elec_res: 1,
            ..Default::default()
        },
        StructureKind::ElectrifiedNonresidential => RawCounts {
            n_elec_nonres: 1,
            ..Default::default()
        },
        StructureKind::BuildingUnclassified => RawCounts::default(),
    });
    let bld = tally(buildings, grid, |_| RawCounts {
        n_total: 1,
        ..Default::default()
    });
    let (counts, outside) = merge_counts(elec, bld);
    let mut tiles = BTreeMap::new();
    for (idx, c) in counts {
        tiles.insert(idx, derive_class_labels(c)?);
    }
    Ok(TileLabelMap { tiles, outside })
}

/// Keeps tiles captured within `[min_year, max_year]`, preserving order.
pub fn temporal_filter(tiles: Vec<TileRecord>, min_year: i32, max_year: i32) -> Vec<TileRecord> {
    tiles
        .into_iter()
        .filter(|t| (min_year..=max_year).contains(&t.capture_year))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvLoad<T> {
    pub records: Vec<T>,
    pub rejected: usize,
}

impl<T> Default for CsvLoad<T> {
    fn default() -> Self {
        CsvLoad {
            records: Vec::new(),
            rejected: 0,
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Input(format!("{}: missing column `{name}`", path.display())))
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).from_reader(file))
}

/// Reads `lon,lat,connection_type`; malformed rows are counted, not fatal.
pub fn read_customers_csv(path: &Path) -> Result<CsvLoad<CustomerRecord>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let (ilon, ilat, ityp) = (
        column(&headers, "lon", path)?,
        column(&headers, "lat", path)?,
        column(&headers, "connection_type", path)?,
    );
    let mut out = CsvLoad::default();
    for row in rdr.records() {
        let row = row?;
        let parsed = (|| {
            let lon: f64 = row.get(ilon)?.trim().parse().ok()?;
            let lat: f64 = row.get(ilat)?.trim().parse().ok()?;
            let connection_type = ConnectionType::parse(row.get(ityp)?)?;
            valid_coord(lon, lat).then_some(CustomerRecord {
                lon,
                lat,
                connection_type,
            })
        })();
        match parsed {
            Some(r) => out.records.push(r),
            None => out.rejected += 1,
        }
    }
    Ok(out)
}

/// Reads `lon,lat` building locations.
pub fn read_buildings_csv(path: &Path) -> Result<CsvLoad<StructurePoint>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let (ilon, ilat) = (column(&headers, "lon", path)?, column(&headers, "lat", path)?);
    let mut out = CsvLoad::default();
    for row in rdr.records() {
        let row = row?;
        let parsed = (|| {
            let lon: f64 = row.get(ilon)?.trim().parse().ok()?;
            let lat: f64 = row.get(ilat)?.trim().parse().ok()?;
            valid_coord(lon, lat).then_some(StructurePoint {
                lon,
                lat,
                kind: StructureKind::BuildingUnclassified,
            })
        })();
        match parsed {
            Some(r) => out.records.push(r),
            None => out.rejected += 1,
        }
    }
    Ok(out)
}

pub fn write_customers_csv(path: &Path, records: &[CustomerRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lon", "lat", "connection_type"])?;
    for r in records {
        w.write_record([
            format!("{:.9}", r.lon),
            format!("{:.9}", r.lat),
            r.connection_type.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_buildings_csv(path: &Path, points: &[GeoPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lon", "lat"])?;
    for p in points {
        w.write_record([format!("{:.9}", p.lon), format!("{:.9}", p.lat)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::ProjRect;
    use crate::projection::Projection;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cust(lon: f64, lat: f64, t: ConnectionType) -> CustomerRecord {
        CustomerRecord {
            lon,
            lat,
            connection_type: t,
        }
    }

    #[test]
    fn same_type_customers_collapse() {
        let recs = vec![cust(37.1, 0.2, ConnectionType::Residential); 3];
        let out = dedupe_customers(&recs);
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.points[0].kind, StructureKind::ElectrifiedResidential);
    }

    #[test]
    fn commercial_and_industrial_share_a_group() {
        let recs = vec![
            cust(37.1, 0.2, ConnectionType::Commercial),
            cust(37.1, 0.2, ConnectionType::Industrial),
        ];
        let out = dedupe_customers(&recs);
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.points[0].kind, StructureKind::ElectrifiedNonresidential);
    }

    #[test]
    fn residential_and_commercial_stay_apart() {
        let recs = vec![
            cust(37.1, 0.2, ConnectionType::Residential),
            cust(37.1, 0.2, ConnectionType::Commercial),
        ];
        assert_eq!(dedupe_customers(&recs).points.len(), 2);
    }

    #[test]
    fn malformed_coordinates_rejected_and_counted() {
        let recs = vec![
            cust(f64::NAN, 0.2, ConnectionType::Residential),
            cust(37.0, 91.0, ConnectionType::Residential),
            cust(37.0, 0.0, ConnectionType::Residential),
        ];
        let out = dedupe_customers(&recs);
        assert_eq!((out.points.len(), out.rejected), (1, 2));
    }

    #[test]
    fn rounding_merges_sub_decimeter_jitter() {
        let recs = vec![
            cust(37.100_000_01, 0.2, ConnectionType::Residential),
            cust(37.100_000_03, 0.2, ConnectionType::Residential),
            cust(37.100_002, 0.2, ConnectionType::Residential),
        ];
        assert_eq!(dedupe_customers(&recs).points.len(), 2);
    }

    #[test]
    fn class_derivation_examples() {
        let empty = derive_class_labels(RawCounts::default()).unwrap();
        assert_eq!(empty.access_class, AccessClass::NoBuilding);
        assert_eq!(empty.pct_elec, None);
        assert_eq!(empty.pct_class_b, None);

        let unelec = derive_class_labels(RawCounts {
            n_total: 7,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(unelec.access_class, AccessClass::Unelectrified);
        assert_eq!(unelec.n_unelec, 7);
        assert_eq!(unelec.pct_class_b, None);

        let l = derive_class_labels(RawCounts {
            n_total: 8,
            n_elec_res: 1,
            n_elec_nonres: 3,
        })
        .unwrap();
        assert_eq!(l.access_class, AccessClass::Electrified);
        assert_eq!(l.n_elec, 4);
        assert_eq!(l.pct_elec, Some(0.5));
        assert_eq!(l.pct_class_b, Some(PctClass::High));
        assert_eq!(l.pct_elec_res, Some(0.25));
        assert_eq!(l.pct_class_c, Some(PctClass::Low));
    }

    #[test]
    fn quarter_share_is_low() {
        let l = derive_class_labels(RawCounts {
            n_total: 4,
            n_elec_res: 1,
            n_elec_nonres: 0,
        })
        .unwrap();
        assert_eq!((l.n_unelec, l.pct_elec), (3, Some(0.25)));
        assert_eq!(l.pct_class_b, Some(PctClass::Low));
    }

    #[test]
    fn negative_counts_rejected() {
        assert!(derive_class_labels(RawCounts {
            n_total: -1,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn undercounted_survey_is_reconciled() {
        let l = derive_class_labels(RawCounts {
            n_total: 1,
            n_elec_res: 2,
            n_elec_nonres: 1,
        })
        .unwrap();
        assert!(l.reconciled);
        assert_eq!((l.n_total, l.n_elec, l.n_unelec), (3, 3, 0));
    }

    fn test_grid() -> GridSpec {
        GridSpec::over_projected(
            &ProjRect {
                min_x: -1250.0,
                min_y: -1250.0,
                max_x: 1250.0,
                max_y: 1250.0,
            },
            250.0,
            2.5,
            Projection::transverse_mercator(37.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn empty_inputs_give_empty_map() {
        let m = aggregate_tile_labels(&[], &[], &test_grid()).unwrap();
        assert!(m.tiles.is_empty());
        let l = m.get(TileIndex::new(3, 3));
        assert_eq!((l.n_total, l.access_class), (0, AccessClass::NoBuilding));
    }

    #[test]
    fn one_tile_worked_example() {
        let g = test_grid();
        let b = g.tile_bounds(TileIndex::new(2, 5)).unwrap();
        let at = |dx: f64, dy: f64, kind| {
            let (lon, lat) = g.projection.inverse(b.min_x + dx, b.min_y + dy);
            StructurePoint { lon, lat, kind }
        };
        let buildings: Vec<_> = [(10.0, 10.0), (100.0, 50.0), (200.0, 200.0), (30.0, 220.0)]
            .iter()
            .map(|&(x, y)| at(x, y, StructureKind::BuildingUnclassified))
            .collect();
        let customers: Vec<_> = (0..3)
            .map(|_| {
                let p = at(100.0, 50.0, StructureKind::ElectrifiedResidential);
                cust(p.lon, p.lat, ConnectionType::Residential)
            })
            .collect();
        let elec = dedupe_customers(&customers).points;
        let m = aggregate_tile_labels(&elec, &buildings, &g).unwrap();
        assert_eq!(m.tiles.len(), 1);
        let l = m.get(TileIndex::new(2, 5));
        assert_eq!((l.n_total, l.n_elec, l.n_elec_res, l.n_unelec), (4, 1, 1, 3));
        assert_eq!(l.pct_elec, Some(0.25));
        assert_eq!(l.pct_class_b, Some(PctClass::Low));
    }

    #[test]
    fn tallies_match_double_loop() {
        let g = test_grid();
        let ext = g.extent();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Vec::new();
        for _ in 0..5000 {
            let x = rng.random_range(ext.min_x..ext.max_x);
            let y = rng.random_range(ext.min_y..ext.max_y);
            let (lon, lat) = g.projection.inverse(x, y);
            let kind = match rng.random_range(0..3) {
                0 => StructureKind::ElectrifiedResidential,
                1 => StructureKind::ElectrifiedNonresidential,
                _ => StructureKind::BuildingUnclassified,
            };
            pts.push(StructurePoint { lon, lat, kind });
        }
        let (elec, bld): (Vec<_>, Vec<_>) = pts
            .iter()
            .partition(|p| p.kind != StructureKind::BuildingUnclassified);
        let m = aggregate_tile_labels(&elec, &bld, &g).unwrap();
        let mut total = 0;
        for idx in g.indices() {
            let tb = g.tile_bounds(idx).unwrap();
            let inside = |p: &&StructurePoint| {
                let (x, y) = g.projection.forward(p.lon, p.lat);
                tb.contains_half_open(x, y)
            };
            let nb = bld.iter().filter(inside).count() as i64;
            let nr = elec
                .iter()
                .filter(inside)
                .filter(|p| p.kind == StructureKind::ElectrifiedResidential)
                .count() as i64;
            let nn = elec.iter().filter(inside).count() as i64 - nr;
            let expect = derive_class_labels(RawCounts {
                n_total: nb,
                n_elec_res: nr,
                n_elec_nonres: nn,
            })
            .unwrap();
            assert_eq!(m.get(idx), expect);
            total += m.get(idx).n_total as usize;
        }
        // every building was inside the grid, and reconciliation only adds
        assert!(total >= bld.len());
        assert_eq!(m.outside, 0);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        let mut m = TileLabelMap::default();
        m.tiles.insert(
            TileIndex::new(1, 2),
            derive_class_labels(RawCounts {
                n_total: 5,
                n_elec_res: 1,
                n_elec_nonres: 1,
            })
            .unwrap(),
        );
        m.tiles.insert(TileIndex::new(0, 0), TileLabels::default());
        m.write_jsonl(&p).unwrap();
        assert_eq!(TileLabelMap::read_jsonl(&p).unwrap(), m);
    }

    #[test]
    fn csv_reading_counts_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(
            &p,
            "lon,lat,connection_type\n37.1,0.2,residential\nx,0.2,commercial\n37.2,0.1,farm\n37.2,0.1,Industrial\n",
        )
        .unwrap();
        let c = read_customers_csv(&p).unwrap();
        assert_eq!(c.records.len(), 2);
        assert_eq!(c.rejected, 2);
        assert_eq!(c.records[1].connection_type, ConnectionType::Industrial);
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(raw in prop::collection::vec((0u8..20, 0u8..20, 0u8..3), 0..200)) {
            let recs: Vec<_> = raw.iter().map(|&(a, b, t)| cust(
                37.0 + a as f64 * 1e-5,
                0.1 + b as f64 * 1e-5,
                [ConnectionType::Residential, ConnectionType::Commercial, ConnectionType::Industrial][t as usize],
            )).collect();
            let once = dedupe_customers(&recs).points;
            let back: Vec<_> = once.iter().map(|p| cust(p.lon, p.lat, match p.kind {
                StructureKind::ElectrifiedResidential => ConnectionType::Residential,
                _ => ConnectionType::Commercial,
            })).collect();
            prop_assert_eq!(dedupe_customers(&back).points, once);
        }

        #[test]
        fn label_invariants(total in 0i64..50, res in 0i64..30, nonres in 0i64..30) {
            let l = derive_class_labels(RawCounts { n_total: total, n_elec_res: res, n_elec_nonres: nonres }).unwrap();
            prop_assert_eq!(l.n_elec, l.n_elec_res + l.n_elec_nonres);
            prop_assert!(l.n_elec <= l.n_total);
            prop_assert_eq!(l.n_unelec, l.n_total - l.n_elec);
            prop_assert_eq!(l.n_elec as i64, res + nonres);
            prop_assert_eq!(l.access_class == AccessClass::NoBuilding, l.n_total == 0);
            prop_assert_eq!(l.access_class == AccessClass::Electrified, l.n_elec >= 1);
            if let Some(p) = l.pct_elec_res {
                prop_assert_eq!(l.pct_class_c == Some(PctClass::Low), p <= 0.25);
            }
            prop_assert_eq!(l.pct_class_b.is_some(), l.n_elec >= 1);
        }
    }
}
