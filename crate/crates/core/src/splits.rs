//! Geographic evaluation protocol.
//!
//! Five whole counties are held out as the out-of-sample test set: one per
//! map quadrant (around the region centroid) plus the county closest to the
//! centre. Tiles of the remaining counties are split 70/20/10 into train,
//! validation and in-sample test, stratified per county by structures per
//! tile so each split sees a similar density distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::counties::CountyMap;
use crate::dataset::TileRecord;
use crate::error::{Error, Result};
use crate::geogrid::TileIndex;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestIn,
    TestOut,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestIn, Split::TestOut];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIn => "test_in",
            Split::TestOut => "test_out",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Upper edges of the structures-per-tile strata; the last stratum is open.
/// The default `[0, 2, 5, 10]` gives bins 0, 1-2, 3-5, 6-10, 11+.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBins {
    pub upper_edges: Vec<u32>,
}

impl Default for DensityBins {
    fn default() -> Self {
        DensityBins {
            upper_edges: vec![0, 2, 5, 10],
        }
    }
}

impl DensityBins {
    pub fn n_bins(&self) -> usize {
        self.upper_edges.len() + 1
    }

    pub fn bin_of(&self, n_total: u32) -> usize {
        self.upper_edges
            .iter()
            .position(|&e| n_total <= e)
            .unwrap_or(self.upper_edges.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    NorthEast,
    NorthWest,
    SouthWest,
    SouthEast,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::NorthEast,
        Quadrant::NorthWest,
        Quadrant::SouthWest,
        Quadrant::SouthEast,
    ];

    pub fn of(dx: f64, dy: f64) -> Self {
        match (dx >= 0.0, dy >= 0.0) {
            (true, true) => Quadrant::NorthEast,
            (false, true) => Quadrant::NorthWest,
            (false, false) => Quadrant::SouthWest,
            (true, false) => Quadrant::SouthEast,
        }
    }
}

/// Per-county histogram of structures per tile (`n_total` -> tile count).
pub type DensityHistogram = BTreeMap<u32, usize>;

pub fn density_histograms(records: &[TileRecord]) -> BTreeMap<u32, DensityHistogram> {
    let mut out: BTreeMap<u32, DensityHistogram> = BTreeMap::new();
    for r in records {
        *out.entry(r.county_id)
            .or_default()
            .entry(r.labels.n_total)
            .or_default() += 1;
    }
    out
}

/// Lower median of a histogram; 0 for an empty one.
pub fn histogram_median(h: &DensityHistogram) -> f64 {
    let n: usize = h.values().sum();
    if n == 0 {
        return 0.0;
    }
    let target = (n - 1) / 2;
    let mut seen = 0;
    for (&v, &c) in h {
        seen += c;
        if seen > target {
            return v as f64;
        }
    }
    unreachable!("target below total count")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfSampleSelection {
    pub quadrant_picks: BTreeMap<Quadrant, u32>,
    pub center: u32,
    pub region_centroid: (f64, f64),
    /// Population variance of the quadrant picks' median densities.
    pub density_spread: f64,
    pub seed: u64,
}

impl OutOfSampleSelection {
    pub fn counties(&self) -> BTreeSet<u32> {
        self.quadrant_picks
            .values()
            .copied()
            .chain(std::iter::once(self.center))
            .collect()
    }
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Picks one county per quadrant maximising the spread of median densities,
/// then the remaining county closest to the region centroid.
///
/// Ties go to the lexicographically smallest tuple of county ids in quadrant
/// order, so the result does not depend on `seed`; the seed is recorded for
/// provenance.
pub fn select_out_of_sample(
    counties: &CountyMap,
    stats: &BTreeMap<u32, DensityHistogram>,
    seed: u64,
) -> Result<OutOfSampleSelection> {
    if counties.counties.len() < 5 {
        return Err(Error::Protocol(format!(
            "need at least 5 counties, found {}",
            counties.counties.len()
        )));
    }
    let (cx, cy) = counties.region_centroid();
    let empty = DensityHistogram::new();
    // (median, id) candidates per quadrant, keeping the lowest id per median
    let mut cands: BTreeMap<Quadrant, BTreeMap<u64, (f64, u32)>> = BTreeMap::new();
    for c in &counties.counties {
        let (x, y) = c.centroid();
        let med = histogram_median(stats.get(&c.id).unwrap_or(&empty));
        cands
            .entry(Quadrant::of(x - cx, y - cy))
            .or_default()
            .entry(med.to_bits())
            .or_insert((med, c.id));
    }
    let lists: Vec<Vec<(f64, u32)>> = Quadrant::ALL
        .iter()
        .map(|q| {
            let mut v: Vec<_> = cands
                .get(q)
                .map(|m| m.values().copied().collect())
                .unwrap_or_default();
            v.sort_by_key(|&(_, id)| id);
            if v.is_empty() {
                Err(Error::Protocol(format!("no county centroid in quadrant {q:?}")))
            } else {
                Ok(v)
            }
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, [u32; 4])> = None;
    let mut idx = [0usize; 4];
    loop {
        let pick: [(f64, u32); 4] = std::array::from_fn(|q| lists[q][idx[q]]);
        let spread = variance(&pick.map(|p| p.0));
        let ids = pick.map(|p| p.1);
        let better = match &best {
            None => true,
            Some((s, b)) => spread > *s || (spread == *s && ids < *b),
        };
        if better {
            best = Some((spread, ids));
        }
        // odometer over candidate lists
        let mut q = 0;
        loop {
            idx[q] += 1;
            if idx[q] < lists[q].len() {
                break;
            }
            idx[q] = 0;
            q += 1;
            if q == 4 {
                break;
            }
        }
        if q == 4 {
            break;
        }
    }
    let (density_spread, ids) = best.expect("at least one combination");
    let chosen: BTreeSet<u32> = ids.iter().copied().collect();
    let center = counties
        .counties
        .iter()
        .filter(|c| !chosen.contains(&c.id))
        .map(|c| {
            let (x, y) = c.centroid();
            ((x - cx).powi(2) + (y - cy).powi(2), c.id)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .ok_or_else(|| Error::Protocol("no county left for the centre pick".into()))?;
    Ok(OutOfSampleSelection {
        quadrant_picks: Quadrant::ALL.iter().copied().zip(ids).collect(),
        center,
        region_centroid: (cx, cy),
        density_spread,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test_in: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.2,
            test_in: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test_in];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {self:?} must sum to 1")));
        }
        Ok(())
    }

    /// Largest-remainder allocation of `n` items; ties favour train, then val.
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let quotas = [self.train, self.val, self.test_in].map(|f| f * n as f64);
        let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
        let mut left = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - counts[a] as f64;
            let rb = quotas[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        counts
    }
}

/// Counties smaller than this go wholly to train.
pub const MIN_COUNTY_TILES: usize = 10;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<TileIndex, Split>,
    pub seed: u64,
    pub out_counties: BTreeSet<u32>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn get(&self, index: TileIndex) -> Option<Split> {
        self.assignments.get(&index).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|&&s| s == split).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["tile_col", "tile_row", "split"])?;
        for (idx, s) in &self.assignments {
            w.write_record([idx.col.to_string(), idx.row.to_string(), s.as_str().into()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<BTreeMap<TileIndex, Split>> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut out = BTreeMap::new();
        for row in rdr.deserialize::<(u32, u32, String)>() {
            let (col, r, s) = row?;
            let split = Split::parse(&s)
                .ok_or_else(|| Error::Input(format!("{}: unknown split `{s}`", path.display())))?;
            out.insert(TileIndex::new(col, r), split);
        }
        Ok(out)
    }
}

/// Seeded, density-stratified train/val/test_in split of in-sample tiles.
pub fn stratified_split(
    tiles: &[TileRecord],
    fractions: SplitFractions,
    bins: &DensityBins,
    seed: u64,
) -> Result<SplitAssignment> {
    fractions.validate()?;
    if tiles.is_empty() {
        return Err(Error::Input("no tiles to split".into()));
    }
    let mut by_county: BTreeMap<u32, Vec<&TileRecord>> = BTreeMap::new();
    for t in tiles {
        by_county.entry(t.county_id).or_default().push(t);
    }
    let mut out = SplitAssignment {
        seed,
        ..Default::default()
    };
    for (county, recs) in by_county {
        if recs.len() < MIN_COUNTY_TILES {
            let msg = format!(
                "county {county} has only {} tiles; all assigned to train",
                recs.len()
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
            for r in recs {
                out.assignments.insert(r.index, Split::Train);
            }
            continue;
        }
        let mut strata: Vec<Vec<TileIndex>> = vec![Vec::new(); bins.n_bins()];
        for r in &recs {
            strata[bins.bin_of(r.labels.n_total)].push(r.index);
        }
        for (b, mut members) in strata.into_iter().enumerate() {
            members.sort();
            let mut rng = rng::stream(seed, &[county as u64, b as u64]);
            members.shuffle(&mut rng);
            let [n_train, n_val, _] = fractions.allocate(members.len());
            for (i, idx) in members.into_iter().enumerate() {
                let s = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::TestIn
                };
                out.assignments.insert(idx, s);
            }
        }
    }
    Ok(out)
}

/// Full protocol: out-county tiles to `test_out`, the rest stratified.
pub fn assign_splits(
    tiles: &[TileRecord],
    out_counties: &BTreeSet<u32>,
    fractions: SplitFractions,
    bins: &DensityBins,
    seed: u64,
) -> Result<SplitAssignment> {
    let (out, inside): (Vec<TileRecord>, Vec<TileRecord>) = tiles
        .iter()
        .cloned()
        .partition(|t| out_counties.contains(&t.county_id));
    let mut a = stratified_split(&inside, fractions, bins, seed)?;
    for t in out {
        a.assignments.insert(t.index, Split::TestOut);
    }
    a.out_counties = out_counties.clone();
    Ok(a)
}

/// Tiles that break the held-out-county rule: an out-county tile outside
/// `test_out`, or an in-sample tile inside it.
pub fn leakage(assignment: &SplitAssignment, tiles: &[TileRecord]) -> Vec<TileIndex> {
    tiles
        .iter()
        .filter(|t| {
            let is_out = assignment.out_counties.contains(&t.county_id);
            let in_test_out = assignment.get(t.index) == Some(Split::TestOut);
            is_out != in_test_out
        })
        .map(|t| t.index)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountySplitStats {
    pub county_id: u32,
    pub n_tiles: usize,
    /// Tile counts for train, val, test_in.
    pub counts: [usize; 3],
    pub fractions: [f64; 3],
    pub chi_square: f64,
    pub dof: usize,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub counties: Vec<CountySplitStats>,
    pub global_counts: BTreeMap<Split, usize>,
    pub global_fractions: [f64; 3],
    pub alpha: f64,
    pub pass: bool,
}

/// Chi-square statistic of homogeneity over a rows x bins table, ignoring
/// empty rows and columns. Returns (statistic, degrees of freedom).
pub fn chi_square_homogeneity(table: &[Vec<usize>]) -> (f64, usize) {
    let rows: Vec<&Vec<usize>> = table.iter().filter(|r| r.iter().sum::<usize>() > 0).collect();
    if rows.is_empty() {
        return (0.0, 0);
    }
    let ncols = rows[0].len();
    let col_tot: Vec<usize> = (0..ncols).map(|j| rows.iter().map(|r| r[j]).sum()).collect();
    let cols: Vec<usize> = (0..ncols).filter(|&j| col_tot[j] > 0).collect();
    let n: usize = col_tot.iter().sum();
    let mut stat = 0.0;
    for r in &rows {
        let rt: usize = r.iter().sum();
        for &j in &cols {
            let e = rt as f64 * col_tot[j] as f64 / n as f64;
            stat += (r[j] as f64 - e).powi(2) / e;
        }
    }
    let dof = (rows.len().saturating_sub(1)) * (cols.len().saturating_sub(1));
    (stat, dof)
}

/// Checks that train/val/test_in have similar density distributions per
/// county: PASS iff the chi-square statistic stays below the critical value
/// at significance `alpha`.
pub fn verify_split(
    assignment: &SplitAssignment,
    tiles: &[TileRecord],
    bins: &DensityBins,
    alpha: f64,
) -> SplitReport {
    let mut tables: BTreeMap<u32, Vec<Vec<usize>>> = BTreeMap::new();
    let mut global_counts: BTreeMap<Split, usize> = BTreeMap::new();
    for t in tiles {
        let Some(s) = assignment.get(t.index) else {
            continue;
        };
        *global_counts.entry(s).or_default() += 1;
        let row = match s {
            Split::Train => 0,
            Split::Val => 1,
            Split::TestIn => 2,
            Split::TestOut => continue,
        };
        let tab = tables
            .entry(t.county_id)
            .or_insert_with(|| vec![vec![0; bins.n_bins()]; 3]);
        tab[row][bins.bin_of(t.labels.n_total)] += 1;
    }
    let mut counties = Vec::new();
    for (county_id, tab) in tables {
        let counts: [usize; 3] = std::array::from_fn(|i| tab[i].iter().sum());
        let n: usize = counts.iter().sum();
        let (chi_square, dof) = chi_square_homogeneity(&tab);
        let threshold = if dof == 0 {
            f64::INFINITY
        } else {
            ChiSquared::new(dof as f64)
                .map(|d| d.inverse_cdf(1.0 - alpha))
                .unwrap_or(f64::INFINITY)
        };
        counties.push(CountySplitStats {
            county_id,
            n_tiles: n,
            counts,
            fractions: counts.map(|c| c as f64 / n.max(1) as f64),
            chi_square,
            dof,
            threshold,
            pass: dof == 0 || chi_square < threshold,
        });
    }
    let in_total: usize = [Split::Train, Split::Val, Split::TestIn]
        .iter()
        .map(|s| global_counts.get(s).copied().unwrap_or(0))
        .sum();
    let global_fractions = [Split::Train, Split::Val, Split::TestIn]
        .map(|s| global_counts.get(&s).copied().unwrap_or(0) as f64 / in_total.max(1) as f64);
    SplitReport {
        pass: counties.iter().all(|c| c.pass),
        counties,
        global_counts,
        global_fractions,
        alpha,
    }
}
