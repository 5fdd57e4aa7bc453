//! Staged, restartable pipeline over a working directory.
//!
//! Each stage writes its outputs under its own subdirectory and finishes by
//! writing `manifests/<stage>.json` with the config hash, seed, upstream
//! manifest hashes and the sha256 of every artifact. A stage whose manifest
//! matches the current stage configuration and upstream hashes, and whose
//! artifacts are intact, is skipped.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::baseline::{calibrate_threshold, compare_baseline, nl_classify, tile_brightness, BaselineComparison};
use crate::counties::CountyMap;
use crate::dataset::{load_images, read_records_jsonl, write_records_jsonl, TileRecord};
use crate::error::{Error, Result};
use crate::eval::{
    binary_report, classification_report, collapse_to_binary, county_aggregate, fmt_opt, regression_report,
    BinaryArea, EvalReport, RECALL_NOTE,
};
use crate::geogrid::{
    extract_tile, make_grid, select_tile_sources, GridSpec, Scene, SceneMeta, TileIndex, TileManifestEntry,
};
use crate::labels::{
    aggregate_tile_labels, dedupe_customers, read_buildings_csv, read_customers_csv, temporal_filter, TileLabelMap,
};
use crate::models::{predict, train, Prediction, TaskId, TaskSpec, Target, TrainedModel};
use crate::projection::Projection;
use crate::raster::{write_png_rgb, FloatRaster, RgbRaster};
use crate::splits::{assign_splits, density_histograms, leakage, select_out_of_sample, verify_split, Split, SplitAssignment};
use crate::synthdata::{self, generate_region, read_grid, read_scene_index};

pub use config::PipelineConfig;
pub use manifest::{Manifest, WorkdirLock};
use manifest::{artifact, sha256_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Tile,
    Label,
    Split,
    Train(TaskId),
    Evaluate(TaskId, Split),
    Baseline,
    Report,
}

impl Stage {
    /// Manifest and output name.
    pub fn name(&self) -> String {
        match self {
            Stage::Synth => "synth".into(),
            Stage::Tile => "tile".into(),
            Stage::Label => "label".into(),
            Stage::Split => "split".into(),
            Stage::Train(t) => format!("train_{t}"),
            Stage::Evaluate(t, s) => format!("evaluate_{t}_{s}"),
            Stage::Baseline => "baseline".into(),
            Stage::Report => "report".into(),
        }
    }
}

/// The CLI spelling, e.g. `evaluate access_3class test_in`.
impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Train(t) => write!(f, "train {t}"),
            Stage::Evaluate(t, s) => write!(f, "evaluate {t} {s}"),
            other => f.write_str(&other.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub manifest: PathBuf,
    /// True when the stage was up to date and not re-run.
    pub cached: bool,
    pub summary: Value,
    pub warnings: Vec<String>,
}

struct StageOutput {
    artifacts: Vec<PathBuf>,
    summary: Value,
    warnings: Vec<String>,
}

pub const TILE_DIR: &str = "tile";
pub const TILES_JSONL: &str = "tile/tiles.jsonl";
pub const TILE_GRID: &str = "tile/grid.json";
pub const LABELS_JSONL: &str = "label/labels.jsonl";
pub const SPLIT_CSV: &str = "split/split.csv";
pub const RECORDS_JSONL: &str = "split/records.jsonl";
pub const MODELS_DIR: &str = "models";
pub const EVAL_DIR: &str = "eval";
pub const BASELINE_DIR: &str = "baseline";
pub const REPORT_DIR: &str = "report";

pub struct Pipeline {
    pub config: PipelineConfig,
    pub workdir: PathBuf,
    /// Re-run stages even when their manifests are current.
    pub force: bool,
}

fn precondition(stage: Stage, reason: impl Into<String>, hint: impl Into<String>) -> Error {
    Error::Precondition {
        stage: stage.to_string(),
        reason: reason.into(),
        hint: hint.into(),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_tile_entries(path: &Path) -> Result<Vec<TileManifestEntry>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn same_projection(a: &Projection, b: &Projection) -> bool {
    [(0.0, 0.0), (1000.0, -2000.0)].iter().all(|&(x, y)| {
        let (p, q) = (a.inverse(x, y), b.inverse(x, y));
        (p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9
    })
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let workdir = config.workdir.clone();
        Ok(Pipeline {
            config,
            workdir,
            force: false,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }

    /// Hash of the effective configuration, independent of its location.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.config.clone();
        c.workdir = PathBuf::new();
        sha256_json(&c)
    }

    fn uses_synth(&self) -> bool {
        self.config.synth.is_some()
    }

    fn stage_key(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let v = match stage {
            Stage::Synth => json!({ "synth": c.synth_spec() }),
            Stage::Tile => json!({
                "scenes": c.inputs.scenes, "grid_file": c.inputs.grid, "grid": c.grid,
                "limit_tiles": c.limit_tiles, "synth": self.uses_synth(),
            }),
            Stage::Label => json!({ "customers": c.inputs.customers, "buildings": c.inputs.buildings }),
            Stage::Split => json!({
                "counties": c.inputs.counties, "years": c.years, "split": c.split, "seed": c.seed,
            }),
            Stage::Train(t) => json!({ "task": t, "model": c.model_for(t), "limit_tiles": c.limit_tiles }),
            Stage::Evaluate(t, s) => json!({ "task": t, "split": s, "limit_tiles": c.limit_tiles }),
            Stage::Baseline => json!({ "nightlights": c.inputs.nightlights, "limit_tiles": c.limit_tiles }),
            Stage::Report => json!({ "tasks": c.tasks }),
        };
        sha256_json(&v)
    }

    /// Upstream stages whose manifests must exist.
    fn requires(&self, stage: Stage) -> Vec<Stage> {
        let i = &self.config.inputs;
        let synth_if = |missing: bool| {
            if missing && self.uses_synth() {
                vec![Stage::Synth]
            } else {
                vec![]
            }
        };
        let mut v = match stage {
            Stage::Synth => vec![],
            Stage::Tile => synth_if(i.scenes.is_none() || i.grid.is_none() && self.config.grid.region.is_none()),
            Stage::Label => {
                let mut v = synth_if(i.customers.is_none() || i.buildings.is_none());
                v.push(Stage::Tile);
                v
            }
            Stage::Split => {
                let mut v = synth_if(i.counties.is_none());
                v.extend([Stage::Tile, Stage::Label]);
                v
            }
            Stage::Train(_) => vec![Stage::Split],
            Stage::Evaluate(t, _) => vec![Stage::Split, Stage::Train(t)],
            Stage::Baseline => {
                let mut v = synth_if(i.nightlights.is_none());
                v.extend([Stage::Split, Stage::Train(TaskId::Access3class)]);
                v
            }
            Stage::Report => vec![],
        };
        v.sort();
        v.dedup();
        v
    }

    fn optional_inputs(&self, stage: Stage) -> Vec<Stage> {
        if stage != Stage::Report {
            return vec![];
        }
        let mut v = Vec::new();
        for t in TaskId::ALL {
            for s in [Split::TestIn, Split::TestOut] {
                v.push(Stage::Evaluate(t, s));
            }
        }
        v.push(Stage::Baseline);
        v
    }

    /// Runs one stage under the working-directory lock.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let _lock = WorkdirLock::acquire(&self.workdir)?;
        self.execute(stage)
    }

    /// Stages run by [`Pipeline::run_all`], in order.
    pub fn plan(&self) -> Vec<Stage> {
        let mut v = Vec::new();
        if self.uses_synth() {
            v.push(Stage::Synth);
        }
        v.extend([Stage::Tile, Stage::Label, Stage::Split]);
        for &t in &self.config.tasks {
            v.extend([
                Stage::Train(t),
                Stage::Evaluate(t, Split::TestIn),
                Stage::Evaluate(t, Split::TestOut),
            ]);
        }
        let has_nl = self.config.inputs.nightlights.is_some() || self.uses_synth();
        if has_nl && self.config.tasks.contains(&TaskId::Access3class) {
            v.push(Stage::Baseline);
        }
        v.push(Stage::Report);
        v
    }

    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        let _lock = WorkdirLock::acquire(&self.workdir)?;
        self.plan().into_iter().map(|s| self.execute(s)).collect()
    }

    fn execute(&self, stage: Stage) -> Result<StageOutcome> {
        let config_hash = self.config_hash()?;
        let stage_key = self.stage_key(stage)?;
        let mut inputs = BTreeMap::new();
        let mut warnings = Vec::new();
        for up in self.requires(stage) {
            let Some((m, hash)) = Manifest::read(&self.workdir, &up.name())? else {
                return Err(precondition(
                    stage,
                    format!("missing outputs of stage `{up}`"),
                    format!("run `elecmap {up}` first"),
                ));
            };
            if m.config_hash != config_hash {
                warnings.push(format!("upstream stage `{up}` was produced with a different configuration"));
            }
            inputs.insert(up.name(), hash);
        }
        for up in self.optional_inputs(stage) {
            if let Some((_, hash)) = Manifest::read(&self.workdir, &up.name())? {
                inputs.insert(up.name(), hash);
            }
        }
        for w in &warnings {
            log::warn!("{stage}: {w}");
        }

        let name = stage.name();
        if !self.force {
            if let Some((m, _)) = Manifest::read(&self.workdir, &name)? {
                if m.stage_key == stage_key && m.inputs == inputs && m.artifacts_intact(&self.workdir) {
                    log::info!("{stage}: up to date");
                    return Ok(StageOutcome {
                        stage,
                        manifest: manifest::manifest_path(&self.workdir, &name),
                        cached: true,
                        summary: m.summary,
                        warnings: m.warnings,
                    });
                }
            }
        }
        let mp = manifest::manifest_path(&self.workdir, &name);
        if mp.exists() {
            std::fs::remove_file(&mp).map_err(|e| Error::io(&mp, e))?;
        }
        log::info!("{stage}: running");
        let out = match stage {
            Stage::Synth => self.synth(),
            Stage::Tile => self.tile(),
            Stage::Label => self.label(),
            Stage::Split => self.split(),
            Stage::Train(t) => self.train(t),
            Stage::Evaluate(t, s) => self.evaluate(t, s),
            Stage::Baseline => self.baseline(),
            Stage::Report => self.report(),
        }?;
        warnings.extend(out.warnings);
        let mut artifacts = out
            .artifacts
            .par_iter()
            .map(|p| artifact(&self.workdir, p))
            .collect::<Result<Vec<_>>>()?;
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            stage: name.clone(),
            config_hash,
            stage_key,
            seed: self.config.seed,
            inputs,
            artifacts,
            summary: out.summary,
            warnings,
        };
        let manifest = m.write(&self.workdir, &name)?;
        Ok(StageOutcome {
            stage,
            manifest,
            cached: false,
            summary: m.summary,
            warnings: m.warnings,
        })
    }

    fn synth(&self) -> Result<StageOutput> {
        let spec = self.config.synth_spec().ok_or_else(|| {
            precondition(Stage::Synth, "the configuration has no [synth] section", "add a [synth] table")
        })?;
        let dir = self.path("synth");
        fresh_dir(&dir)?;
        let out = generate_region(&spec, &dir)?;
        Ok(StageOutput {
            artifacts: out.files.iter().map(|f| dir.join(f)).collect(),
            summary: serde_json::to_value(&out.summary)?,
            warnings: vec![],
        })
    }

    fn input_or_synth(&self, configured: &Option<PathBuf>, synth_rel: &str, stage: Stage, what: &str) -> Result<PathBuf> {
        let p = match configured {
            Some(p) => p.clone(),
            None if self.uses_synth() => self.path("synth").join(synth_rel),
            None => {
                return Err(precondition(
                    stage,
                    format!("no {what} configured"),
                    format!("set inputs.{what} or add a [synth] section"),
                ))
            }
        };
        if !p.exists() {
            return Err(precondition(
                stage,
                format!("{what} file {} does not exist", p.display()),
                if configured.is_some() {
                    format!("fix inputs.{what}")
                } else {
                    "run `elecmap synth` first".into()
                },
            ));
        }
        Ok(p)
    }

    fn resolve_grid(&self) -> Result<GridSpec> {
        let c = &self.config;
        if let Some(p) = &c.inputs.grid {
            return read_grid(p);
        }
        if self.uses_synth() {
            return read_grid(&self.path("synth").join(synthdata::GRID_JSON));
        }
        let Some(region) = &c.grid.region else {
            return Err(precondition(
                Stage::Tile,
                "no grid available",
                "set inputs.grid or grid.region",
            ));
        };
        let centre = region.center();
        make_grid(
            region,
            c.grid.tile_size_m,
            c.grid.resolution_m_per_px,
            Projection::transverse_mercator(centre.lon, centre.lat),
        )
    }

    fn tile(&self) -> Result<StageOutput> {
        let index = self.input_or_synth(&self.config.inputs.scenes, synthdata::SCENES_INDEX, Stage::Tile, "scenes")?;
        let base = index.parent().unwrap_or(Path::new(".")).to_path_buf();
        let metas: Vec<SceneMeta> = read_scene_index(&index)?;
        for m in &metas {
            m.validate()?;
        }
        let grid = self.resolve_grid()?;
        let sources = select_tile_sources(&metas, &grid);
        let mut chosen: Vec<(TileIndex, usize)> = sources.chosen.into_iter().collect();
        if let Some(n) = self.config.limit_tiles {
            chosen.truncate(n);
        }
        let mut by_scene: BTreeMap<usize, Vec<TileIndex>> = BTreeMap::new();
        for (idx, s) in &chosen {
            by_scene.entry(*s).or_default().push(*idx);
        }
        let dir = self.path(TILE_DIR);
        fresh_dir(&dir)?;
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut entries = Vec::with_capacity(chosen.len());
        let mut years: BTreeMap<i32, usize> = BTreeMap::new();
        for (si, tiles) in by_scene {
            let meta = &metas[si];
            let (raster, proj) = RgbRaster::read_geotiff(&base.join(&meta.raster))?;
            if !same_projection(&proj, &grid.projection) {
                return Err(Error::Input(format!(
                    "scene {} is in `{proj}`, the grid in `{}`",
                    meta.scene_id, grid.projection
                )));
            }
            let scene = Scene {
                meta: meta.clone(),
                raster,
            };
            let written: Vec<TileManifestEntry> = tiles
                .par_iter()
                .map(|&idx| {
                    let t = extract_tile(&scene, idx, &grid, self.config.grid.resampling)?;
                    let rel = format!("{TILE_DIR}/images/{idx}.png");
                    write_png_rgb(&self.workdir.join(&rel), t.size, t.size, &t.pixels)?;
                    Ok(TileManifestEntry {
                        tile_col: idx.col,
                        tile_row: idx.row,
                        scene_id: meta.scene_id.clone(),
                        capture_year: meta.capture_year,
                        image_path: rel,
                    })
                })
                .collect::<Result<_>>()?;
            *years.entry(meta.capture_year).or_default() += written.len();
            entries.extend(written);
        }
        entries.sort_by_key(|e| e.index());
        let jsonl = self.path(TILES_JSONL);
        {
            let f = File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
            let mut w = BufWriter::new(f);
            for e in &entries {
                writeln!(w, "{}", serde_json::to_string(e)?).map_err(|er| Error::io(&jsonl, er))?;
            }
            w.flush().map_err(|e| Error::io(&jsonl, e))?;
        }
        write_json(&self.path(TILE_GRID), &grid)?;
        let mut artifacts: Vec<PathBuf> = entries.iter().map(|e| self.workdir.join(&e.image_path)).collect();
        artifacts.extend([jsonl, self.path(TILE_GRID)]);
        let mut warnings = Vec::new();
        if !sources.skipped.is_empty() {
            warnings.push(format!("{} grid tiles are not fully covered by any scene", sources.skipped.len()));
        }
        Ok(StageOutput {
            artifacts,
            summary: json!({
                "n_tiles": entries.len(),
                "n_uncovered": sources.skipped.len(),
                "n_scenes": metas.len(),
                "tiles_per_capture_year": years,
                "grid": { "n_cols": grid.n_cols, "n_rows": grid.n_rows, "tile_px": grid.tile_px() },
            }),
            warnings,
        })
    }

    fn label(&self) -> Result<StageOutput> {
        let c = &self.config.inputs;
        let cust = self.input_or_synth(&c.customers, synthdata::CUSTOMERS_CSV, Stage::Label, "customers")?;
        let bld = self.input_or_synth(&c.buildings, synthdata::BUILDINGS_CSV, Stage::Label, "buildings")?;
        let grid = read_grid(&self.path(TILE_GRID))?;
        let customers = read_customers_csv(&cust)?;
        let buildings = read_buildings_csv(&bld)?;
        let dd = dedupe_customers(&customers.records);
        let labels = aggregate_tile_labels(&dd.points, &buildings.records, &grid)?;
        fresh_dir(&self.path("label"))?;
        let out = self.path(LABELS_JSONL);
        labels.write_jsonl(&out)?;
        let reconciled = labels.tiles.values().filter(|l| l.reconciled).count();
        let mut warnings = Vec::new();
        let rejected = customers.rejected + dd.rejected + buildings.rejected;
        if rejected > 0 {
            warnings.push(format!("{rejected} malformed point rows were skipped"));
        }
        if labels.outside > 0 {
            warnings.push(format!("{} points fall outside the grid", labels.outside));
        }
        Ok(StageOutput {
            artifacts: vec![out],
            summary: json!({
                "n_customer_records": customers.records.len(),
                "n_customer_rows_rejected": customers.rejected + dd.rejected,
                "n_electrified_structures": dd.points.len(),
                "n_buildings": buildings.records.len(),
                "n_building_rows_rejected": buildings.rejected,
                "n_points_outside_grid": labels.outside,
                "n_labelled_tiles": labels.tiles.len(),
                "n_reconciled_tiles": reconciled,
            }),
            warnings,
        })
    }

    fn load_split(&self) -> Result<(Vec<TileRecord>, BTreeMap<TileIndex, Split>)> {
        Ok((
            read_records_jsonl(&self.path(RECORDS_JSONL))?,
            SplitAssignment::read_csv(&self.path(SPLIT_CSV))?,
        ))
    }

    fn split(&self) -> Result<StageOutput> {
        let c = &self.config;
        let counties_path =
            self.input_or_synth(&c.inputs.counties, synthdata::COUNTIES_GEOJSON, Stage::Split, "counties")?;
        let grid = read_grid(&self.path(TILE_GRID))?;
        let entries = read_tile_entries(&self.path(TILES_JSONL))?;
        let labels = TileLabelMap::read_jsonl(&self.path(LABELS_JSONL))?;
        let counties = CountyMap::read_geojson(&counties_path, &grid.projection)?;
        let county_of = counties.assign_tiles(&grid)?;
        let records: Vec<TileRecord> = entries
            .iter()
            .map(|e| {
                let idx = e.index();
                Ok(TileRecord {
                    index: idx,
                    county_id: *county_of
                        .get(&idx)
                        .ok_or_else(|| Error::Input(format!("tile {idx} is not on the grid")))?,
                    capture_year: e.capture_year,
                    image_path: e.image_path.clone(),
                    labels: labels.get(idx),
                })
            })
            .collect::<Result<_>>()?;
        let n_before = records.len();
        let records = temporal_filter(records, c.years.min, c.years.max);
        let n_excluded = n_before - records.len();
        let stats = density_histograms(&records);
        let selection = select_out_of_sample(&counties, &stats, c.seed)?;
        let bins = &c.split.density_bins;
        let assignment = assign_splits(&records, &selection.counties(), c.split.fractions, bins, c.seed)?;
        let leaked = leakage(&assignment, &records);
        if !leaked.is_empty() {
            return Err(Error::Validation(format!(
                "{} tiles leak between test_out and the in-sample splits",
                leaked.len()
            )));
        }
        let report = verify_split(&assignment, &records, bins, c.split.alpha);
        let dir = self.path("split");
        fresh_dir(&dir)?;
        assignment.write_csv(&self.path(SPLIT_CSV))?;
        write_records_jsonl(&self.path(RECORDS_JSONL), &records)?;
        let counts: BTreeMap<String, usize> =
            Split::ALL.iter().map(|s| (s.to_string(), assignment.count(*s))).collect();
        let summary = json!({
            "n_tiles": n_before,
            "n_excluded_by_year": n_excluded,
            "year_window": [c.years.min, c.years.max],
            "out_of_sample": selection,
            "split_counts": counts,
            "verification": report,
        });
        let summary_path = dir.join("summary.json");
        write_json(&summary_path, &summary)?;
        if !report.pass {
            let failing: Vec<u32> = report.counties.iter().filter(|c| !c.pass).map(|c| c.county_id).collect();
            return Err(Error::Validation(format!(
                "density distributions differ across splits in counties {failing:?} (see {})",
                summary_path.display()
            )));
        }
        Ok(StageOutput {
            artifacts: vec![self.path(SPLIT_CSV), self.path(RECORDS_JSONL), summary_path],
            summary,
            warnings: assignment.warnings.clone(),
        })
    }

    /// Eligible records of one split with their targets, capped by
    /// `limit_tiles`.
    fn task_records(
        &self,
        task: TaskId,
        split: Split,
        records: &[TileRecord],
        assign: &BTreeMap<TileIndex, Split>,
    ) -> (Vec<TileRecord>, Vec<Target>) {
        let spec = TaskSpec {
            id: task,
            regression_min_structures: self.config.model_for(task).regression_min_structures,
        };
        let mut recs = Vec::new();
        let mut targets = Vec::new();
        for r in records {
            if assign.get(&r.index) != Some(&split) {
                continue;
            }
            if let Some(t) = spec.target(&r.labels) {
                recs.push(r.clone());
                targets.push(t);
            }
        }
        if let Some(n) = self.config.limit_tiles {
            recs.truncate(n);
            targets.truncate(n);
        }
        (recs, targets)
    }

    fn train(&self, task: TaskId) -> Result<StageOutput> {
        let (records, assign) = self.load_split()?;
        let cfg = self.config.model_for(task);
        let (tr, tt) = self.task_records(task, Split::Train, &records, &assign);
        let (va, vt) = self.task_records(task, Split::Val, &records, &assign);
        if tr.is_empty() {
            return Err(Error::Validation(format!("no eligible training tiles for {task}")));
        }
        let ti = load_images(&tr, &self.workdir, cfg.input_px)?;
        let vi = load_images(&va, &self.workdir, cfg.input_px)?;
        let model = train(task, &cfg, &ti, &tt, &vi, &vt)?;
        let dir = self.path(MODELS_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (bin, json_path) = model.save(&dir, task.as_str())?;
        let best = &model.history[model.best_epoch as usize - 1];
        Ok(StageOutput {
            artifacts: vec![bin, json_path],
            summary: json!({
                "task": task,
                "n_train": tr.len(),
                "n_val": va.len(),
                "epochs_run": model.history.len(),
                "best_epoch": model.best_epoch,
                "best_val_metric": best.val_metric,
                "train_loss_at_best": best.train_loss,
                "n_params": model.net.n_params(),
            }),
            warnings: vec![],
        })
    }

    fn evaluate(&self, task: TaskId, split: Split) -> Result<StageOutput> {
        let (records, assign) = self.load_split()?;
        let model = TrainedModel::load(&self.path(MODELS_DIR), task.as_str())?;
        let (recs, targets) = self.task_records(task, split, &records, &assign);
        if recs.is_empty() {
            return Err(Error::Validation(format!("split {split} has no eligible tiles for {task}")));
        }
        let images = load_images(&recs, &self.workdir, model.config.input_px)?;
        let preds = predict(&model, &images)?;
        let dir = self.path(EVAL_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = format!("{task}_{split}");
        let mut artifacts = Vec::new();

        let mut report = EvalReport {
            task_id: task.to_string(),
            split: split.to_string(),
            n_tiles: recs.len(),
            note: RECALL_NOTE.into(),
            classification: None,
            binary: None,
            regression: None,
            county: None,
        };
        let target_values: Vec<f64> = targets
            .iter()
            .map(|t| match t {
                Target::Class(c) => *c as f64,
                Target::Count(v) => *v,
            })
            .collect();
        let pred_values: Vec<f64> = preds.iter().map(Prediction::value).collect();
        if task.is_regression() {
            report.regression = Some(regression_report(&pred_values, &target_values)?);
            let tiles: Vec<TileIndex> = recs.iter().map(|r| r.index).collect();
            let county_of: BTreeMap<TileIndex, u32> = recs.iter().map(|r| (r.index, r.county_id)).collect();
            let agg = county_aggregate(&tiles, &pred_values, &target_values, &county_of)?;
            let cp = dir.join(format!("{stem}_counties.csv"));
            agg.write_csv(&cp)?;
            artifacts.push(cp);
            report.county = Some(agg);
        } else {
            let p: Vec<usize> = preds.iter().filter_map(Prediction::class).collect();
            let l: Vec<usize> = target_values.iter().map(|&v| v as usize).collect();
            report.classification = Some(classification_report(&p, &l, task.class_names())?);
            if task == TaskId::Access3class {
                report.binary = Some(binary_report(&collapse_to_binary(&p)?, &collapse_to_binary(&l)?)?);
            }
        }
        let jp = dir.join(format!("{stem}.json"));
        write_json(&jp, &report)?;
        let tp = dir.join(format!("{stem}.txt"));
        write_text(&tp, &report.to_text())?;
        let pp = dir.join(format!("{stem}_predictions.csv"));
        let mut w = csv::Writer::from_path(&pp)?;
        w.write_record(["tile_col", "tile_row", "county_id", "target", "prediction"])?;
        for ((r, t), p) in recs.iter().zip(&target_values).zip(&pred_values) {
            w.write_record([
                r.index.col.to_string(),
                r.index.row.to_string(),
                r.county_id.to_string(),
                t.to_string(),
                p.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&pp, e))?;
        artifacts.extend([jp, tp, pp]);
        Ok(StageOutput {
            artifacts,
            summary: serde_json::to_value(&report)?,
            warnings: report
                .classification
                .iter()
                .flat_map(|c| c.absent_classes.iter().map(|a| format!("class {a} has no tiles in {split}")))
                .collect(),
        })
    }

    fn baseline(&self) -> Result<StageOutput> {
        let nl_path =
            self.input_or_synth(&self.config.inputs.nightlights, synthdata::NIGHTLIGHTS_TIF, Stage::Baseline, "nightlights")?;
        let (raster, _) = FloatRaster::read_geotiff(&nl_path)?;
        let grid = read_grid(&self.path(TILE_GRID))?;
        let (records, assign) = self.load_split()?;
        let task = TaskId::Access3class;
        let model = TrainedModel::load(&self.path(MODELS_DIR), task.as_str())?;

        let binary_of = |recs: &[TileRecord]| -> Result<Vec<BinaryArea>> {
            collapse_to_binary(&recs.iter().map(|r| r.labels.access_class.index()).collect::<Vec<_>>())
        };
        let (val, _) = self.task_records(task, Split::Val, &records, &assign);
        let val_tiles: Vec<TileIndex> = val.iter().map(|r| r.index).collect();
        let val_labels = binary_of(&val)?;
        let mut b = Vec::new();
        let mut l = Vec::new();
        for (br, lab) in tile_brightness(&raster, &grid, &val_tiles)?.into_iter().zip(val_labels) {
            if let Some(br) = br {
                b.push(br as f64);
                l.push(lab);
            }
        }
        let cal = calibrate_threshold(&b, &l)?;

        let dir = self.path(BASELINE_DIR);
        fresh_dir(&dir)?;
        let mut artifacts = Vec::new();
        let mut per_split = BTreeMap::new();
        let mut warnings = Vec::new();
        for split in [Split::TestIn, Split::TestOut] {
            let (recs, _) = self.task_records(task, split, &records, &assign);
            if recs.is_empty() {
                warnings.push(format!("split {split} is empty; no comparison"));
                continue;
            }
            let tiles: Vec<TileIndex> = recs.iter().map(|r| r.index).collect();
            let nl = nl_classify(&raster, &grid, cal.threshold, &tiles)?;
            let covered: Vec<TileRecord> = recs.iter().filter(|r| nl.labels.contains_key(&r.index)).cloned().collect();
            if !nl.uncovered.is_empty() {
                warnings.push(format!("{} {split} tiles lie outside the nighttime-lights raster", nl.uncovered.len()));
            }
            let images = load_images(&covered, &self.workdir, model.config.input_px)?;
            let model_classes: Vec<usize> = predict(&model, &images)?.iter().filter_map(Prediction::class).collect();
            let model_bin = collapse_to_binary(&model_classes)?;
            let base_bin: Vec<BinaryArea> = covered.iter().map(|r| nl.labels[&r.index]).collect();
            let labels = binary_of(&covered)?;
            let cmp = compare_baseline(&model_bin, &base_bin, &labels)?;
            let jp = dir.join(format!("{split}.json"));
            write_json(&jp, &cmp)?;
            let tp = dir.join(format!("{split}.txt"));
            write_text(&tp, &cmp.to_text())?;
            artifacts.extend([jp, tp]);
            per_split.insert(split.to_string(), cmp);
        }
        Ok(StageOutput {
            artifacts,
            summary: json!({
                "threshold": cal.threshold,
                "val_balanced_accuracy": cal.balanced_accuracy,
                "comparisons": per_split,
            }),
            warnings,
        })
    }

    fn report(&self) -> Result<StageOutput> {
        let mut evals: BTreeMap<(TaskId, Split), EvalReport> = BTreeMap::new();
        for t in TaskId::ALL {
            for s in [Split::TestIn, Split::TestOut] {
                let p = self.path(EVAL_DIR).join(format!("{t}_{s}.json"));
                if Manifest::read(&self.workdir, &Stage::Evaluate(t, s).name())?.is_some() && p.exists() {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    evals.insert((t, s), serde_json::from_str(&text)?);
                }
            }
        }
        if evals.is_empty() {
            return Err(precondition(
                Stage::Report,
                "no evaluation outputs found",
                "run `elecmap evaluate <task> <split>` first",
            ));
        }
        let mut baselines: BTreeMap<Split, BaselineComparison> = BTreeMap::new();
        if Manifest::read(&self.workdir, &Stage::Baseline.name())?.is_some() {
            for s in [Split::TestIn, Split::TestOut] {
                let p = self.path(BASELINE_DIR).join(format!("{s}.json"));
                if p.exists() {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    baselines.insert(s, serde_json::from_str(&text)?);
                }
            }
        }
        let dir = self.path(REPORT_DIR);
        fresh_dir(&dir)?;
        let text = render_report(&evals, &baselines);
        let tp = dir.join("report.txt");
        write_text(&tp, &text)?;
        let mut artifacts = vec![tp];
        let mut scatter = Vec::new();
        for ((t, s), e) in &evals {
            if let Some(c) = &e.county {
                let p = dir.join(format!("county_{t}_{s}.csv"));
                c.write_csv(&p)?;
                scatter.push(p.file_name().map(|f| f.to_string_lossy().to_string()));
                artifacts.push(p);
            }
        }
        let evals_json: BTreeMap<String, &EvalReport> =
            evals.iter().map(|((t, s), e)| (format!("{t}/{s}"), e)).collect();
        let baselines_json: BTreeMap<String, &BaselineComparison> =
            baselines.iter().map(|(s, b)| (s.to_string(), b)).collect();
        let summary = json!({ "evaluations": evals_json, "baseline": baselines_json, "county_scatter": scatter });
        let jp = dir.join("report.json");
        write_json(&jp, &summary)?;
        artifacts.push(jp);
        Ok(StageOutput {
            artifacts,
            summary: json!({ "n_evaluations": evals.len(), "has_baseline": !baselines.is_empty() }),
            warnings: vec![],
        })
    }
}

fn acc(e: Option<&EvalReport>, class: Option<&str>) -> String {
    let Some(c) = e.and_then(|e| e.classification.as_ref()) else {
        return "n/a".into();
    };
    fmt_opt(match class {
        Some(k) => c.accuracy_of(k),
        None => Some(c.overall_accuracy),
    })
}

fn r2(e: Option<&EvalReport>, county: bool) -> String {
    let Some(e) = e else { return "n/a".into() };
    if county {
        fmt_opt(e.county.as_ref().and_then(|c| c.r2))
    } else {
        fmt_opt(e.regression.as_ref().and_then(|r| r.r2))
    }
}

fn row(out: &mut String, label: &str, a: String, b: String) {
    out.push_str(&format!("| {label:<30} | {a:>9} | {b:>13} |\n"));
}

fn header(out: &mut String, title: &str) {
    out.push_str(&format!("\n{title}\n"));
    row(out, "", "In-sample".into(), "Out-of-sample".into());
}

/// Text tables: access vs nighttime lights, access classes, extent of
/// electrification and customer type.
pub fn render_report(
    evals: &BTreeMap<(TaskId, Split), EvalReport>,
    baselines: &BTreeMap<Split, BaselineComparison>,
) -> String {
    let get = |t: TaskId, s: Split| evals.get(&(t, s));
    let (i, o) = (Split::TestIn, Split::TestOut);
    let mut s = format!("# {RECALL_NOTE}\n");

    if !baselines.is_empty() {
        s.push_str("\nElectrified vs unelectrified areas, compared with nighttime lights\n");
        for (split, b) in baselines {
            s.push_str(&format!("[{split}]\n{}", b.to_text().lines().skip(1).collect::<Vec<_>>().join("\n")));
            s.push('\n');
        }
    }

    let a = TaskId::Access3class;
    header(&mut s, "Access: no buildings / unelectrified / electrified");
    for (label, k) in [
        ("No buildings", Some("no_building")),
        ("Unelectrified", Some("unelectrified")),
        ("Electrified", Some("electrified")),
        ("Overall", None),
    ] {
        row(&mut s, label, acc(get(a, i), k), acc(get(a, o), k));
    }

    for (title, cls, reg, low, high) in [
        (
            "Extent of electrification",
            TaskId::PctElecBinary,
            TaskId::CountElecReg,
            "Low % electrified (<= 25%)",
            "High % electrified (> 25%)",
        ),
        (
            "Customer type",
            TaskId::PctResBinary,
            TaskId::CountResReg,
            "Low % residential (<= 25%)",
            "High % residential (> 25%)",
        ),
    ] {
        header(&mut s, title);
        row(&mut s, low, acc(get(cls, i), Some("low")), acc(get(cls, o), Some("low")));
        row(&mut s, high, acc(get(cls, i), Some("high")), acc(get(cls, o), Some("high")));
        row(&mut s, "Overall accuracy", acc(get(cls, i), None), acc(get(cls, o), None));
        row(&mut s, &format!("{reg} R²"), r2(get(reg, i), false), r2(get(reg, o), false));
        row(&mut s, &format!("{reg} county R²"), r2(get(reg, i), true), r2(get(reg, o), true));
    }
    s
}
