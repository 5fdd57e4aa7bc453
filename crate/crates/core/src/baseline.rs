//! Nighttime-lights baseline: threshold a coarse brightness raster and
//! label every tile by the cell that contains it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{binary_report, BinaryArea, RECALL_NOTE};
use crate::geogrid::{GridSpec, TileIndex};
use crate::raster::FloatRaster;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NlClassification {
    pub labels: BTreeMap<TileIndex, BinaryArea>,
    /// Tiles whose centre falls outside the raster.
    pub uncovered: Vec<TileIndex>,
}

/// Brightness of the NL cell containing each tile's centre.
pub fn tile_brightness(
    raster: &FloatRaster,
    grid: &GridSpec,
    tiles: &[TileIndex],
) -> Result<Vec<Option<f32>>> {
    tiles
        .iter()
        .map(|&t| {
            let (x, y) = grid.tile_bounds(t)?.center();
            Ok(raster.sample(x, y))
        })
        .collect()
}

/// Electrified area iff the containing cell is brighter than `threshold`.
pub fn nl_classify(
    raster: &FloatRaster,
    grid: &GridSpec,
    threshold: f64,
    tiles: &[TileIndex],
) -> Result<NlClassification> {
    let mut out = NlClassification::default();
    for (&t, b) in tiles.iter().zip(tile_brightness(raster, grid, tiles)?) {
        match b {
            Some(b) => {
                let area = if b as f64 > threshold {
                    BinaryArea::ElectrifiedArea
                } else {
                    BinaryArea::UnelectrifiedArea
                };
                out.labels.insert(t, area);
            }
            None => out.uncovered.push(t),
        }
    }
    Ok(out)
}

/// Mean of the two per-class recalls; classes without examples are skipped.
pub fn balanced_accuracy(preds: &[BinaryArea], labels: &[BinaryArea]) -> f64 {
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for (p, l) in preds.iter().zip(labels) {
        total[l.index()] += 1;
        if p == l {
            correct[l.index()] += 1;
        }
    }
    let recalls: Vec<f64> = (0..2)
        .filter(|&k| total[k] > 0)
        .map(|k| correct[k] as f64 / total[k] as f64)
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub balanced_accuracy: f64,
}

/// Picks the threshold with the best balanced accuracy. Candidates are the
/// distinct brightness values plus one below the minimum; ties keep the
/// lowest threshold.
pub fn calibrate_threshold(brightness: &[f64], labels: &[BinaryArea]) -> Result<Calibration> {
    if brightness.len() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", labels.len()),
            format!("{} brightness values", brightness.len()),
        ));
    }
    if brightness.is_empty() {
        return Err(Error::Input("no tiles to calibrate on".into()));
    }
    let mut order: Vec<usize> = (0..brightness.len()).collect();
    order.sort_by(|&a, &b| brightness[a].total_cmp(&brightness[b]));
    let n_pos = labels
        .iter()
        .filter(|&&l| l == BinaryArea::ElectrifiedArea)
        .count();
    let n_neg = labels.len() - n_pos;
    let score = |tp: usize, tn: usize| {
        let mut parts = Vec::with_capacity(2);
        if n_pos > 0 {
            parts.push(tp as f64 / n_pos as f64);
        }
        if n_neg > 0 {
            parts.push(tn as f64 / n_neg as f64);
        }
        parts.iter().sum::<f64>() / parts.len() as f64
    };
    // threshold below everything: all predicted electrified
    let mut tp = n_pos;
    let mut tn = 0;
    let mut best = Calibration {
        threshold: brightness[order[0]] - 1.0,
        balanced_accuracy: score(tp, tn),
    };
    let mut i = 0;
    while i < order.len() {
        let v = brightness[order[i]];
        while i < order.len() && brightness[order[i]] == v {
            match labels[order[i]] {
                BinaryArea::ElectrifiedArea => tp -= 1,
                BinaryArea::UnelectrifiedArea => tn += 1,
            }
            i += 1;
        }
        let s = score(tp, tn);
        if s > best.balanced_accuracy {
            best = Calibration {
                threshold: v,
                balanced_accuracy: s,
            };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    /// `None` when the split has no tiles of that area type.
    pub unelectrified_area: Option<f64>,
    pub electrified_area: Option<f64>,
}

/// Two rows (baseline, model) of per-class recall on binary area labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub rows: [ComparisonRow; 2],
    pub n: usize,
}

pub const BASELINE_ROW: &str = "Baseline (nighttime lights)";
pub const MODEL_ROW: &str = "Elec. access (ours)";

pub fn compare_baseline(
    model_preds: &[BinaryArea],
    baseline_preds: &[BinaryArea],
    labels: &[BinaryArea],
) -> Result<BaselineComparison> {
    let row = |name: &str, preds: &[BinaryArea]| -> Result<ComparisonRow> {
        let r = binary_report(preds, labels)?;
        Ok(ComparisonRow {
            name: name.to_string(),
            unelectrified_area: r.accuracy_of(BinaryArea::NAMES[0]),
            electrified_area: r.accuracy_of(BinaryArea::NAMES[1]),
        })
    };
    Ok(BaselineComparison {
        rows: [row(BASELINE_ROW, baseline_preds)?, row(MODEL_ROW, model_preds)?],
        n: labels.len(),
    })
}

impl BaselineComparison {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {RECALL_NOTE}");
        let _ = writeln!(s, "| {:<28} | {:>14} | {:>12} |", "Model", "Unelec. areas", "Elec. areas");
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {:<28} | {:>14} | {:>12} |",
                r.name,
                cell(r.unelectrified_area),
                cell(r.electrified_area)
            );
        }
        s
    }

    /// Parses the table produced by [`BaselineComparison::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<ComparisonRow> = text
            .lines()
            .filter(|l| l.starts_with('|'))
            .skip(1)
            .map(|l| {
                let cells: Vec<&str> = l.trim_matches('|').split('|').map(str::trim).collect();
                let num = |i: usize| match cells.get(i) {
                    Some(&"n/a") => Ok(None),
                    Some(c) => c
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::Input(format!("bad comparison row `{l}`"))),
                    None => Err(Error::Input(format!("bad comparison row `{l}`"))),
                };
                Ok(ComparisonRow {
                    name: cells.first().copied().unwrap_or_default().to_string(),
                    unelectrified_area: num(1)?,
                    electrified_area: num(2)?,
                })
            })
            .collect::<Result<_>>()?;
        let rows: [ComparisonRow; 2] = rows
            .try_into()
            .map_err(|_| Error::Input("comparison table must have two rows".into()))?;
        Ok(BaselineComparison { rows, n: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{GeoTransform, ProjRect};
    use crate::projection::Projection;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use BinaryArea::*;

    fn grid() -> GridSpec {
        GridSpec::over_projected(
            &ProjRect {
                min_x: 0.0,
                min_y: 0.0,
                max_x: 5000.0,
                max_y: 5000.0,
            },
            250.0,
            2.5,
            Projection::transverse_mercator(37.0, 0.0),
        )
        .unwrap()
    }

    fn raster(values: Vec<f32>) -> FloatRaster {
        FloatRaster {
            width: 2,
            height: 2,
            transform: GeoTransform {
                origin_x: 0.0,
                origin_y: 5000.0,
                pixel_width: 2500.0,
                pixel_height: 2500.0,
            },
            data: values,
        }
    }

    #[test]
    fn dark_raster_gives_no_electrified_area() {
        let g = grid();
        let tiles: Vec<_> = g.indices().collect();
        let c = nl_classify(&raster(vec![0.0; 4]), &g, 0.0, &tiles).unwrap();
        assert!(c.labels.values().all(|&a| a == UnelectrifiedArea));
        assert!(c.uncovered.is_empty());
    }

    #[test]
    fn single_bright_cell_lights_its_tiles_only() {
        let g = grid();
        let tiles: Vec<_> = g.indices().collect();
        // top-left cell = north-west quarter of the grid
        let c = nl_classify(&raster(vec![5.0, 0.0, 0.0, 0.0]), &g, 1.0, &tiles).unwrap();
        for (t, a) in &c.labels {
            let nw = t.col < 10 && t.row >= 10;
            assert_eq!(*a == ElectrifiedArea, nw, "{t}");
        }
        assert_eq!(c.labels.values().filter(|&&a| a == ElectrifiedArea).count(), 100);
    }

    #[test]
    fn uncovered_tiles_flagged() {
        let g = grid();
        let mut r = raster(vec![1.0; 4]);
        r.width = 1;
        r.data = vec![1.0, 1.0];
        let tiles: Vec<_> = g.indices().collect();
        let c = nl_classify(&r, &g, 0.5, &tiles).unwrap();
        assert_eq!(c.uncovered.len(), 200);
    }

    #[test]
    fn calibration_matches_exhaustive_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.random_range(5..200);
            let b: Vec<f64> = (0..n).map(|_| (rng.random_range(0..30) as f64) * 0.5).collect();
            let l: Vec<BinaryArea> = b
                .iter()
                .map(|&v| {
                    if rng.random::<f64>() < v / 15.0 {
                        ElectrifiedArea
                    } else {
                        UnelectrifiedArea
                    }
                })
                .collect();
            let cal = calibrate_threshold(&b, &l).unwrap();
            // oracle: sweep a fine threshold grid and classify naively
            let mut best = f64::NEG_INFINITY;
            let mut t = -1.0;
            while t <= 16.0 {
                let p: Vec<_> = b
                    .iter()
                    .map(|&v| if v > t { ElectrifiedArea } else { UnelectrifiedArea })
                    .collect();
                best = best.max(balanced_accuracy(&p, &l));
                t += 0.01;
            }
            assert!((cal.balanced_accuracy - best).abs() < 1e-12);
            let p: Vec<_> = b
                .iter()
                .map(|&v| if v > cal.threshold { ElectrifiedArea } else { UnelectrifiedArea })
                .collect();
            assert!((balanced_accuracy(&p, &l) - cal.balanced_accuracy).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_threshold_never_adds_electrified_tiles() {
        let g = grid();
        let tiles: Vec<_> = g.indices().collect();
        let r = raster(vec![0.5, 3.0, 1.5, 7.0]);
        let mut last = usize::MAX;
        for t in [-1.0, 0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let c = nl_classify(&r, &g, t, &tiles).unwrap();
            let n = c.labels.values().filter(|&&a| a == ElectrifiedArea).count();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn perfect_agreement_gives_ones() {
        let l = vec![ElectrifiedArea, UnelectrifiedArea, ElectrifiedArea];
        let c = compare_baseline(&l, &l, &l).unwrap();
        for r in &c.rows {
            assert_eq!((r.unelectrified_area, r.electrified_area), (Some(1.0), Some(1.0)));
        }
    }

    #[test]
    fn swapping_inputs_swaps_rows() {
        let l = vec![ElectrifiedArea, UnelectrifiedArea, ElectrifiedArea, UnelectrifiedArea];
        let a = vec![ElectrifiedArea, ElectrifiedArea, UnelectrifiedArea, UnelectrifiedArea];
        let b = vec![ElectrifiedArea, UnelectrifiedArea, ElectrifiedArea, ElectrifiedArea];
        let x = compare_baseline(&a, &b, &l).unwrap();
        let y = compare_baseline(&b, &a, &l).unwrap();
        assert_eq!(x.rows[0].electrified_area, y.rows[1].electrified_area);
        assert_eq!(x.rows[1].unelectrified_area, y.rows[0].unelectrified_area);
    }

    #[test]
    fn hand_computed_recalls() {
        let l = vec![ElectrifiedArea, ElectrifiedArea, ElectrifiedArea, UnelectrifiedArea, UnelectrifiedArea];
        let m = vec![ElectrifiedArea, ElectrifiedArea, UnelectrifiedArea, UnelectrifiedArea, ElectrifiedArea];
        let b = vec![UnelectrifiedArea; 5];
        let c = compare_baseline(&m, &b, &l).unwrap();
        assert_eq!(c.rows[0].electrified_area, Some(0.0));
        assert_eq!(c.rows[0].unelectrified_area, Some(1.0));
        assert!((c.rows[1].electrified_area.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.rows[1].unelectrified_area, Some(0.5));
    }

    #[test]
    fn missing_area_type_round_trips_as_na() {
        let c = compare_baseline(&[ElectrifiedArea; 2], &[UnelectrifiedArea; 2], &[ElectrifiedArea; 2]).unwrap();
        assert_eq!(c.rows[0].unelectrified_area, None);
        let back = BaselineComparison::from_text(&c.to_text()).unwrap();
        assert_eq!(back.rows, c.rows);
        assert!(serde_json::from_str::<BaselineComparison>(&serde_json::to_string(&c).unwrap()).is_ok());
    }

    #[test]
    fn reference_table_parses() {
        let reference = BaselineComparison {
            rows: [
                ComparisonRow {
                    name: BASELINE_ROW.into(),
                    unelectrified_area: Some(0.98),
                    electrified_area: Some(0.64),
                },
                ComparisonRow {
                    name: MODEL_ROW.into(),
                    unelectrified_area: Some(0.98),
                    electrified_area: Some(0.75),
                },
            ],
            n: 0,
        };
        let text = reference.to_text();
        assert!(text.contains("Unelec. areas") && text.contains("Elec. areas"));
        assert_eq!(BaselineComparison::from_text(&text).unwrap(), reference);
    }
}
