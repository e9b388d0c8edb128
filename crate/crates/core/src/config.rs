//! Run configuration: one TOML table per component, named after its type.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::{DegradationPipeline, TrainingDegradation};
use crate::error::{Error, Result};
use crate::objective::WeightingParams;
use crate::schedule::{NoiseSchedule, ScheduleConfig, StudentTimestepSet};
use crate::trainer::{DistillConfig, TeacherConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Procedural,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Image folder for `source = "folder"`.
    pub path: Option<PathBuf>,
    /// HR patch edge length.
    pub patch: u32,
    /// Number of training patches (procedural) or crops per image (folder).
    pub count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Procedural,
            path: None,
            patch: 64,
            count: 1000,
            eval_count: 32,
            seed: 1,
            eval_seed: 1001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub blend_r: f64,
    pub baseline_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 4, blend_r: 1.0, baseline_steps: 50, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "NoiseSchedule")]
    pub schedule: ScheduleConfig,
    #[serde(rename = "StudentTimestepSet")]
    pub anchors: StudentTimestepSet,
    #[serde(rename = "WeightingParams")]
    pub weighting: WeightingParams,
    #[serde(rename = "TrainingDegradation")]
    pub degradation: TrainingDegradation,
    /// Fixed pipeline for held-out evaluation pairs; defaults to the training distribution.
    #[serde(rename = "DegradationPipeline", skip_serializing_if = "Option::is_none")]
    pub eval_pipeline: Option<DegradationPipeline>,
    #[serde(rename = "Dataset")]
    pub dataset: DatasetConfig,
    #[serde(rename = "TeacherConfig")]
    pub teacher: TeacherConfig,
    #[serde(rename = "DistillConfig")]
    pub distill: DistillConfig,
    #[serde(rename = "Sampler")]
    pub sampler: SamplerConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let sched = self.noise_schedule().map_err(|e| Error::Config(e.to_string()))?;
        StudentTimestepSet::new(self.anchors.anchors().to_vec())
            .and_then(|a| a.validate_against(&sched))
            .map_err(|e| Error::Config(format!("StudentTimestepSet: {e}")))?;
        self.weighting.validate()?;
        self.degradation.validate()?;
        let d = &self.dataset;
        if d.patch == 0 || !d.patch.is_multiple_of(4 * self.degradation.scale) {
            return Err(Error::Config(format!(
                "Dataset.patch {} must be a positive multiple of {}",
                d.patch,
                4 * self.degradation.scale
            )));
        }
        if d.source == DataSource::Folder && d.path.is_none() {
            return Err(Error::Config("Dataset.path is required for folder datasets".into()));
        }
        if self.teacher.batch_size == 0 || self.distill.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let s = &self.sampler;
        if s.steps == 0 || s.steps > self.anchors.len() || !(0.0..=1.0).contains(&s.blend_r) || s.baseline_steps == 0 {
            return Err(Error::Config(format!("invalid Sampler section {s:?}")));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.schedule)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Sets a dotted key such as `WeightingParams.mu` from its TOML literal
    /// (bare words are taken as strings), then re-validates.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = parse_literal(value);
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let text = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
        let updated = RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("setting `{key}` = {value}: {e}")))?;
        *self = updated;
        Ok(())
    }
}

fn parse_literal(value: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {value}")).map(|p| p.v).unwrap_or_else(|_| toml::Value::String(value.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::WeightingForm;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("[NoiseSchedule]"));
        assert!(text.contains("[WeightingParams]"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn set_overrides_keys() {
        let mut cfg = RunConfig::default();
        cfg.set("WeightingParams.nu", "1.3").unwrap();
        cfg.set("WeightingParams.form", "linear").unwrap();
        cfg.set("DistillConfig.teacher_cond", "lr").unwrap();
        cfg.set("TrainingDegradation.order", "2").unwrap();
        cfg.set("Sampler.steps", "2").unwrap();
        cfg.set("StudentTimestepSet.anchors", "[999, 499]").unwrap();
        assert_eq!(cfg.weighting.nu, 1.3);
        assert_eq!(cfg.weighting.form, WeightingForm::Linear);
        assert_eq!(cfg.degradation.order, 2);
        assert_eq!(cfg.anchors.anchors(), &[999, 499]);
        assert!(matches!(RunConfig::default().set("WeightingParams.mu", "-1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("Nope.x", "1"), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_sections() {
        assert!(RunConfig::from_toml("[NoiseSchedule]\nbeta_start = 2.0").is_err());
        assert!(RunConfig::from_toml("[StudentTimestepSet]\nanchors = [1, 5]").is_err());
        assert!(RunConfig::from_toml("[Dataset]\npatch = 30").is_err());
        assert!(RunConfig::from_toml("[Sampler]\nsteps = 9").is_err());
        assert!(RunConfig::from_toml("[Dataset]\nsource = \"folder\"").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.set("Sampler.blend_r", "0.5").unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
