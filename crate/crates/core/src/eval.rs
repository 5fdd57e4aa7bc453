//! Accuracy and R² reports, county aggregation and the 3-class to binary
//! collapse used for the nighttime-lights comparison.
//!
//! Per-class "accuracy" is recall: correct predictions within a class divided
//! by the number of tiles whose true label is that class. Every text report
//! states this in its header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::TileIndex;
use crate::labels::AccessClass;

pub const RECALL_NOTE: &str = "per-class accuracy = recall (correct in class / tiles in class)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassAccuracy>,
    pub overall_accuracy: f64,
    pub n: usize,
    /// Classes with no true examples; omitted from `per_class`.
    pub absent_classes: Vec<String>,
}

impl ClassificationReport {
    pub fn accuracy_of(&self, class: &str) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.class == class)
            .map(|c| c.accuracy)
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} labels"), format!("{b} predictions")));
    }
    if a == 0 {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    Ok(())
}

/// Per-class recall and overall accuracy over class indices into `class_names`.
pub fn classification_report(
    preds: &[usize],
    labels: &[usize],
    class_names: &[&str],
) -> Result<ClassificationReport> {
    check_aligned(labels.len(), preds.len())?;
    let k = class_names.len();
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Input(format!("class index {bad} outside 0..{k}")));
    }
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut absent_classes = Vec::new();
    for c in 0..k {
        if total[c] == 0 {
            absent_classes.push(class_names[c].to_string());
        } else {
            per_class.push(ClassAccuracy {
                class: class_names[c].to_string(),
                correct: correct[c],
                total: total[c],
                accuracy: correct[c] as f64 / total[c] as f64,
            });
        }
    }
    Ok(ClassificationReport {
        per_class,
        overall_accuracy: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        n: labels.len(),
        absent_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    pub n: usize,
    pub flag: Option<String>,
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(preds: &[f64], targets: &[f64]) -> Option<f64> {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

pub fn regression_report(preds: &[f64], targets: &[f64]) -> Result<RegressionReport> {
    check_aligned(targets.len(), preds.len())?;
    if targets.len() < 2 {
        return Ok(RegressionReport {
            r2: None,
            n: targets.len(),
            flag: Some("fewer than 2 targets; R² undefined".into()),
        });
    }
    let r2 = r_squared(preds, targets);
    Ok(RegressionReport {
        r2,
        n: targets.len(),
        flag: r2.is_none().then(|| "zero target variance; R² undefined".to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountyRow {
    pub county_id: u32,
    pub predicted_total: f64,
    pub actual_total: f64,
    pub n_tiles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountyAggregate {
    pub rows: Vec<CountyRow>,
    pub r2: Option<f64>,
    pub flag: Option<String>,
}

/// Sums per-tile predictions and targets per county, in ascending tile-index
/// order, and scores R² across county totals.
pub fn county_aggregate(
    tiles: &[TileIndex],
    preds: &[f64],
    targets: &[f64],
    county_of: &BTreeMap<TileIndex, u32>,
) -> Result<CountyAggregate> {
    check_aligned(tiles.len(), preds.len())?;
    check_aligned(tiles.len(), targets.len())?;
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by_key(|&i| tiles[i]);
    let mut acc: BTreeMap<u32, CountyRow> = BTreeMap::new();
    for i in order {
        let county_id = *county_of
            .get(&tiles[i])
            .ok_or_else(|| Error::Input(format!("tile {} has no county", tiles[i])))?;
        let row = acc.entry(county_id).or_insert(CountyRow {
            county_id,
            predicted_total: 0.0,
            actual_total: 0.0,
            n_tiles: 0,
        });
        row.predicted_total += preds[i];
        row.actual_total += targets[i];
        row.n_tiles += 1;
    }
    let rows: Vec<CountyRow> = acc.into_values().collect();
    let p: Vec<f64> = rows.iter().map(|r| r.predicted_total).collect();
    let t: Vec<f64> = rows.iter().map(|r| r.actual_total).collect();
    let (r2, flag) = if rows.len() < 2 {
        (None, Some("fewer than 2 counties; county R² undefined".to_string()))
    } else {
        match r_squared(&p, &t) {
            Some(r) => (Some(r), None),
            None => (None, Some("county totals have zero variance".to_string())),
        }
    };
    Ok(CountyAggregate { rows, r2, flag })
}

impl CountyAggregate {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["county_id", "predicted_total", "actual_total"])?;
        for r in &self.rows {
            w.write_record([
                r.county_id.to_string(),
                r.predicted_total.to_string(),
                r.actual_total.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryArea {
    UnelectrifiedArea,
    ElectrifiedArea,
}

impl BinaryArea {
    pub const NAMES: [&'static str; 2] = ["unelectrified_area", "electrified_area"];

    pub fn index(&self) -> usize {
        *self as usize
    }
}

/// Groups no-building and unelectrified tiles into "unelectrified area".
pub fn collapse_to_binary(classes: &[usize]) -> Result<Vec<BinaryArea>> {
    classes
        .iter()
        .map(|&c| match AccessClass::from_index(c) {
            Some(AccessClass::Electrified) => Ok(BinaryArea::ElectrifiedArea),
            Some(_) => Ok(BinaryArea::UnelectrifiedArea),
            None => Err(Error::Input(format!("unknown access class {c}"))),
        })
        .collect()
}

pub fn binary_report(preds: &[BinaryArea], labels: &[BinaryArea]) -> Result<ClassificationReport> {
    let p: Vec<usize> = preds.iter().map(BinaryArea::index).collect();
    let l: Vec<usize> = labels.iter().map(BinaryArea::index).collect();
    classification_report(&p, &l, &BinaryArea::NAMES)
}

/// Full evaluation of one task on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub split: String,
    pub n_tiles: usize,
    pub note: String,
    pub classification: Option<ClassificationReport>,
    /// Access classes collapsed to unelectrified/electrified area.
    #[serde(default)]
    pub binary: Option<ClassificationReport>,
    pub regression: Option<RegressionReport>,
    pub county: Option<CountyAggregate>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task {} on {} ({} tiles)", self.task_id, self.split, self.n_tiles);
        let _ = writeln!(s, "# {}", self.note);
        if let Some(c) = &self.classification {
            let _ = writeln!(s, "{:<22} {:>8} {:>8} {:>8}", "label", "correct", "total", "acc");
            for row in &c.per_class {
                let _ = writeln!(
                    s,
                    "{:<22} {:>8} {:>8} {:>8.3}",
                    row.class, row.correct, row.total, row.accuracy
                );
            }
            let _ = writeln!(s, "{:<22} {:>8} {:>8} {:>8.3}", "overall", "", c.n, c.overall_accuracy);
            for a in &c.absent_classes {
                let _ = writeln!(s, "! class {a} absent from labels");
            }
        }
        if let Some(b) = &self.binary {
            for row in &b.per_class {
                let _ = writeln!(s, "{:<22} {:>8} {:>8} {:>8.3}", row.class, row.correct, row.total, row.accuracy);
            }
        }
        if let Some(r) = &self.regression {
            let _ = writeln!(s, "per-tile R²: {}", fmt_opt(r.r2));
            if let Some(f) = &r.flag {
                let _ = writeln!(s, "! {f}");
            }
        }
        if let Some(c) = &self.county {
            let _ = writeln!(s, "county R² ({} counties): {}", c.rows.len(), fmt_opt(c.r2));
            if let Some(f) = &c.flag {
                let _ = writeln!(s, "! {f}");
            }
        }
        s
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into())
}
