//! Pipeline configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{GeoRect, Resampling, DEFAULT_RESOLUTION_M_PER_PX, DEFAULT_TILE_SIZE_M};
use crate::labels::{DEFAULT_MAX_YEAR, DEFAULT_MIN_YEAR};
use crate::models::{ModelConfig, TaskId};
use crate::rng;
use crate::splits::{DensityBins, SplitFractions};
use crate::synthdata::SceneSpec;

/// External input files. Unset entries fall back to the synth stage outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    /// JSON list of scene metadata; raster paths are relative to it.
    pub scenes: Option<PathBuf>,
    pub customers: Option<PathBuf>,
    pub buildings: Option<PathBuf>,
    pub counties: Option<PathBuf>,
    /// Serialized grid; when unset the grid is laid over `grid.region`.
    pub grid: Option<PathBuf>,
    pub nightlights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub tile_size_m: f64,
    pub resolution_m_per_px: f64,
    pub region: Option<GeoRect>,
    pub resampling: Resampling,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            tile_size_m: DEFAULT_TILE_SIZE_M,
            resolution_m_per_px: DEFAULT_RESOLUTION_M_PER_PX,
            region: None,
            resampling: Resampling::Bilinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YearWindow {
    pub min: i32,
    pub max: i32,
}

impl Default for YearWindow {
    fn default() -> Self {
        YearWindow {
            min: DEFAULT_MIN_YEAR,
            max: DEFAULT_MAX_YEAR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: SplitFractions,
    pub density_bins: DensityBins,
    /// Significance level of the per-county homogeneity test.
    pub alpha: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: SplitFractions::default(),
            density_bins: DensityBins::default(),
            alpha: 0.001,
        }
    }
}

/// Per-task changes on top of the shared `[model]` table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskOverride {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<u32>,
    pub epochs: Option<u32>,
    pub width_divisor: Option<u32>,
    pub max_class_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    pub seed: u64,
    pub limit_tiles: Option<usize>,
    /// Tasks trained and evaluated by `run`.
    pub tasks: Vec<TaskId>,
    pub inputs: InputPaths,
    pub grid: GridConfig,
    pub years: YearWindow,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub task_overrides: BTreeMap<TaskId, TaskOverride>,
    pub synth: Option<SceneSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workdir: PathBuf::from("work"),
            seed: 0,
            limit_tiles: None,
            tasks: vec![TaskId::Access3class, TaskId::CountElecReg],
            inputs: InputPaths::default(),
            grid: GridConfig::default(),
            years: YearWindow::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            task_overrides: BTreeMap::new(),
            synth: None,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Loads a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let i = &mut cfg.inputs;
        for p in [
            &mut i.scenes,
            &mut i.customers,
            &mut i.buildings,
            &mut i.counties,
            &mut i.grid,
            &mut i.nightlights,
        ] {
            resolve(base, p);
        }
        resolve(base, &mut cfg.model.init_weights);
        if cfg.workdir.is_relative() {
            cfg.workdir = base.join(&cfg.workdir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.years.min > self.years.max {
            return Err(Error::Config("years.min exceeds years.max".into()));
        }
        self.split.fractions.validate()?;
        if !(self.split.alpha > 0.0 && self.split.alpha < 1.0) {
            return Err(Error::Config("split.alpha must lie in (0, 1)".into()));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        for task in &self.tasks {
            self.model_for(*task).validate()?;
        }
        if self.limit_tiles == Some(0) {
            return Err(Error::Config("limit_tiles must be positive".into()));
        }
        Ok(())
    }

    /// Synthetic spec with the pipeline seed applied.
    pub fn synth_spec(&self) -> Option<SceneSpec> {
        self.synth.clone().map(|mut s| {
            s.seed = self.seed;
            s
        })
    }

    /// Effective model config for a task: shared table, overrides, a
    /// task-specific seed, and the tile size of the grid.
    pub fn model_for(&self, task: TaskId) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(o) = self.task_overrides.get(&task) {
            if let Some(v) = o.learning_rate {
                m.learning_rate = v;
            }
            if let Some(v) = o.batch_size {
                m.batch_size = v;
            }
            if let Some(v) = o.epochs {
                m.epochs = v;
            }
            if let Some(v) = o.width_divisor {
                m.width_divisor = v;
            }
            if o.max_class_ratio.is_some() {
                m.max_class_ratio = o.max_class_ratio;
            }
        }
        m.seed = rng::derive_seed(self.seed, &[rng::str_key(task.as_str())]);
        m.input_px = self.tile_px();
        m
    }

    pub fn tile_size_m(&self) -> f64 {
        self.synth.as_ref().map_or(self.grid.tile_size_m, |s| s.tile_size_m)
    }

    pub fn resolution_m_per_px(&self) -> f64 {
        self.synth
            .as_ref()
            .map_or(self.grid.resolution_m_per_px, |s| s.resolution_m_per_px)
    }

    pub fn tile_px(&self) -> u32 {
        (self.tile_size_m() / self.resolution_m_per_px()).round() as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let c = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn overrides_apply_per_task() {
        let c = PipelineConfig::from_toml_str(
            r#"
            seed = 4
            [model]
            epochs = 60
            [task_overrides.count_elec_reg]
            epochs = 70
            "#,
        )
        .unwrap();
        assert_eq!(c.model_for(TaskId::Access3class).epochs, 60);
        assert_eq!(c.model_for(TaskId::CountElecReg).epochs, 70);
        assert_ne!(
            c.model_for(TaskId::Access3class).seed,
            c.model_for(TaskId::CountElecReg).seed
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("sed = 1").is_err());
    }
}
