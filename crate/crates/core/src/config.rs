//! TOML run configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::TrainConfig;
use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::preprocess::PreprocessConfig;
use crate::roi::PatchOptions;
use crate::search::SearchConfig;
use crate::triage::{RegionMode, DEFAULT_THRESHOLD};

pub const SEED_ENV: &str = "MPMRI_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub val_fraction: f64,
    pub patch: PatchOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { val_fraction: 1.0 / 3.0, patch: PatchOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriageConfig {
    pub threshold: f64,
    pub top_k: usize,
    /// Forced region mode; by default sub-regions are used when both zone
    /// masks exist and the whole gland otherwise.
    pub region_mode: Option<RegionMode>,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, top_k: 3, region_mode: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Cohort manifest for preprocess/build-dataset/search/train.
    pub manifest: Option<PathBuf>,
    /// Manifest of the patients to score in predict/report.
    pub predict_manifest: Option<PathBuf>,
    /// Output directory of phantom-gen.
    pub phantom_dir: PathBuf,
    /// Root for every other artifact.
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            predict_manifest: None,
            phantom_dir: PathBuf::from("phantom"),
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for the per-patient stages; 0 means all cores.
    pub jobs: usize,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub dataset: DatasetConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub triage: TriageConfig,
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            paths: PathsConfig::default(),
            preprocess: PreprocessConfig::default(),
            dataset: DatasetConfig::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            triage: TriageConfig::default(),
            phantom: PhantomSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Reads `path`, resolves relative paths against its directory and
    /// applies the `MPMRI_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let base = std::env::current_dir()?.join(path.parent().unwrap_or(Path::new("")));
        let mut cfg = Self::from_toml(&text, &base)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.phantom_dir);
        fix(&mut self.paths.work_dir);
        if let Some(p) = self.paths.manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.predict_manifest.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.train.validate()?;
        self.search.space.validate()?;
        self.phantom.validate()?;
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return Err(Error::InvalidConfig("dataset.val_fraction must lie in (0, 1)".into()));
        }
        if self.triage.top_k == 0 {
            return Err(Error::InvalidConfig("triage.top_k must be >= 1".into()));
        }
        Ok(())
    }

    /// Training manifest: explicit, else the phantom cohort's.
    pub fn manifest_path(&self) -> PathBuf {
        self.paths.manifest.clone().unwrap_or_else(|| self.paths.phantom_dir.join("manifest.json"))
    }

    pub fn predict_manifest_path(&self) -> PathBuf {
        self.paths.predict_manifest.clone().unwrap_or_else(|| self.manifest_path())
    }

    pub fn processed_dir(&self) -> PathBuf {
        self.paths.work_dir.join("processed")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.work_dir.join("dataset")
    }

    pub fn search_dir(&self) -> PathBuf {
        self.paths.work_dir.join("search")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.paths.work_dir.join("models")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.paths.work_dir.join("predictions")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.work_dir.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("", Path::new("/base")).unwrap();
        assert_eq!(cfg.train.patience, 10);
        assert_eq!(cfg.search.budget, 20);
        assert_eq!(cfg.paths.work_dir, PathBuf::from("/base/work"));
        assert_eq!(cfg.manifest_path(), PathBuf::from("/base/phantom/manifest.json"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 3", Path::new(".")), Err(Error::InvalidConfig(_))));
        assert!(RunConfig::from_toml("[train]\npatience = 4\nbogus = 1", Path::new(".")).is_err());
    }

    #[test]
    fn sections_and_paths() {
        let text = r#"
seed = 7
jobs = 2
[paths]
manifest = "data/m.json"
work_dir = "/abs/work"
[dataset.patch]
out_size = [32, 32]
[phantom]
n_patients = 4
slice_count_range = [8, 10]
[search.space]
conv_blocks = [1, 2]
[triage]
region_mode = "whole_gland"
"#;
        let cfg = RunConfig::from_toml(text, Path::new("/cfg")).unwrap();
        cfg.validate().unwrap();
        assert_eq!((cfg.seed, cfg.jobs), (7, 2));
        assert_eq!(cfg.manifest_path(), PathBuf::from("/cfg/data/m.json"));
        assert_eq!(cfg.paths.work_dir, PathBuf::from("/abs/work"));
        assert_eq!(cfg.dataset.patch.out_size, (32, 32));
        assert_eq!(cfg.phantom.slice_count_range, (8, 10));
        assert_eq!(cfg.search.space.conv_blocks, vec![1, 2]);
        assert_eq!(cfg.search.space.filters.len(), 4);
        assert_eq!(cfg.triage.region_mode, Some(RegionMode::WholeGland));
    }
}
