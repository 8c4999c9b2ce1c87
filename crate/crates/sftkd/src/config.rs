//! Experiment configuration: a TOML file naming the data, the mask, the
//! architectures, the stages to run, and the training hyperparameters.
//!
//! Parsing rejects unknown keys outright, and validation reports every
//! problem in one pass rather than failing on the first.

use crate::kspace::DfWeight;
use crate::loss::KdMethod;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Pipeline stages in their canonical execution order.
pub const STAGE_NAMES: [&str; 5] = ["teacher", "student", "std-kd", "sft", "sft-kd"];

fn default_channels() -> usize {
    32
}
fn default_df_weight() -> String {
    "inf".into()
}
fn default_epochs() -> usize {
    150
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    4
}
fn default_distill_weight() -> f64 {
    0.1
}
fn default_stages() -> Vec<String> {
    STAGE_NAMES.iter().map(|s| s.to_string()).collect()
}
fn default_kd_methods() -> Vec<String> {
    vec!["at".into()]
}

/// Architecture section: cascade depths and widths for both models.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub teacher_d: usize,
    pub student_d: usize,
    pub cascades: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// "inf" for exact replacement, or a positive blend weight.
    #[serde(default = "default_df_weight")]
    pub df_weight: String,
}

/// Training section shared by every stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_distill_weight")]
    pub distill_weight: f64,
    #[serde(default)]
    pub sft_stop_gradient: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

/// A full experiment: datasets, mask, architectures, stages, methods, seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub mask: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_kd_methods")]
    pub kd_methods: Vec<String>,
    #[serde(default = "default_stages")]
    pub stages: Vec<String>,
    pub model: ModelSection,
    pub training: TrainingSection,
}

impl ExperimentConfig {
    /// Parsed KD methods in config order (call after [`Self::validate`]).
    pub fn methods(&self) -> Vec<KdMethod> {
        self.kd_methods
            .iter()
            .map(|m| m.parse().expect("validated method name"))
            .collect()
    }

    /// Parsed data-fidelity weight (call after [`Self::validate`]).
    pub fn df_weight(&self) -> DfWeight {
        parse_df_weight(&self.model.df_weight).expect("validated df weight")
    }

    pub fn runs_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }

    /// Check every field, collecting all problems into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();

        for (label, path, want_dir) in [
            ("train_data", &self.train_data, true),
            ("val_data", &self.val_data, true),
            ("mask", &self.mask, false),
        ] {
            let ok = if want_dir { path.is_dir() } else { path.is_file() };
            if !ok {
                problems.push(format!(
                    "{label} path {} does not exist or has the wrong kind",
                    path.display()
                ));
            }
        }

        if self.seeds.is_empty() {
            problems.push("seeds list is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                problems.push(format!("seed {s} listed twice"));
            }
        }

        if self.kd_methods.is_empty() {
            problems.push("kd_methods list is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.kd_methods {
            match m.parse::<KdMethod>() {
                Ok(parsed) => {
                    if !seen.insert(parsed.name()) {
                        problems.push(format!("kd method {m:?} listed twice"));
                    }
                }
                Err(e) => problems.push(e.to_string()),
            }
        }

        if self.stages.is_empty() {
            problems.push("stages list is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.stages {
            if !STAGE_NAMES.contains(&s.as_str()) {
                problems.push(format!(
                    "unknown stage {s:?} (expected one of {})",
                    STAGE_NAMES.join(", ")
                ));
            } else if !seen.insert(s.as_str()) {
                problems.push(format!("stage {s:?} listed twice"));
            }
        }
        if self.runs_stage("std-kd") && !self.runs_stage("teacher") {
            problems.push("stage std-kd needs stage teacher".into());
        }
        if self.runs_stage("sft-kd") && !self.runs_stage("sft") {
            problems.push("stage sft-kd needs stage sft".into());
        }

        if self.model.teacher_d < 2 {
            problems.push(format!("teacher_d {} must be at least 2", self.model.teacher_d));
        }
        if self.model.student_d < 2 {
            problems.push(format!("student_d {} must be at least 2", self.model.student_d));
        }
        if self.model.cascades < 1 {
            problems.push("cascades must be at least 1".into());
        }
        if (self.runs_stage("sft") || self.runs_stage("sft-kd")) && self.model.cascades < 2 {
            problems.push("joint branch training needs at least 2 cascades".into());
        }
        if self.model.channels < 1 {
            problems.push("channels must be at least 1".into());
        }
        if let Err(e) = parse_df_weight(&self.model.df_weight) {
            problems.push(e.to_string());
        }

        if self.training.epochs < 1 {
            problems.push("epochs must be at least 1".into());
        }
        if !(self.training.lr >= 0.0) || !self.training.lr.is_finite() {
            problems.push(format!("lr {} is not usable", self.training.lr));
        }
        if self.training.batch_size < 1 {
            problems.push("batch_size must be at least 1".into());
        }
        if !(self.training.distill_weight >= 0.0) || !self.training.distill_weight.is_finite() {
            problems.push(format!(
                "distill_weight {} must be finite and non-negative",
                self.training.distill_weight
            ));
        }
        if let Some(clip) = self.training.clip_norm {
            if !(clip > 0.0) || !clip.is_finite() {
                problems.push(format!("clip_norm {clip} must be positive"));
            }
        }
        let needs_pairs = self
            .kd_methods
            .iter()
            .filter_map(|m| m.parse::<KdMethod>().ok())
            .any(KdMethod::needs_batch_pairs);
        if needs_pairs && self.training.batch_size < 2 {
            problems.push("sp/cc distillation needs batch_size >= 2".into());
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} problem(s):\n  - {}",
                problems.len(),
                problems.join("\n  - ")
            )))
        }
    }
}

fn parse_df_weight(s: &str) -> Result<DfWeight> {
    if s == "inf" {
        return Ok(DfWeight::Infinite);
    }
    match s.parse::<f64>() {
        Ok(v) => DfWeight::finite(v),
        Err(_) => Err(Error::Config(format!(
            "df_weight {s:?} must be \"inf\" or a positive number"
        ))),
    }
}

/// Read and validate an experiment configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        let images = crate::data::gen_dataset(16, 16, 3, 3, 7).unwrap();
        crate::data::write_dataset(&dir.path().join("train"), &images, 16, 16, 7, 3, None)
            .unwrap();
        crate::data::write_dataset(&dir.path().join("val"), &images, 16, 16, 7, 3, None).unwrap();
        let mask = crate::kspace::CartesianMask::generate(16, 16, 2, 0.2, 1).unwrap();
        mask.save(&dir.path().join("mask.txt")).unwrap();
        let text = format!(
            r#"
train_data = "{base}/train"
val_data = "{base}/val"
mask = "{base}/mask.txt"
output_dir = "{base}/out"
seeds = [1, 2]

[model]
teacher_d = 3
student_d = 2
cascades = 2

[training]
epochs = 2
"#,
            base = dir.path().display()
        );
        (dir, text)
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let (_dir, text) = world();
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.channels, 32);
        assert_eq!(cfg.training.lr, 1e-3);
        assert_eq!(cfg.training.batch_size, 4);
        assert_eq!(cfg.kd_methods, vec!["at"]);
        assert_eq!(cfg.stages, STAGE_NAMES.to_vec());
        assert_eq!(cfg.methods(), vec![KdMethod::At]);
        assert_eq!(cfg.df_weight(), DfWeight::Infinite);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_dir, text) = world();
        let bad = text.replace("[training]", "not_a_key = 1\n[training]");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
        let bad = text.replace("epochs = 2", "epochs = 2\nmomentum = 0.9");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn validation_collects_every_problem() {
        let (_dir, text) = world();
        let mut cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        cfg.mask = PathBuf::from("/nonexistent/mask.txt");
        cfg.seeds = vec![];
        cfg.kd_methods = vec!["vdsr".into()];
        cfg.model.teacher_d = 1;
        cfg.training.epochs = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        for needle in ["mask path", "seeds list", "vdsr", "teacher_d", "epochs"] {
            assert!(msg.contains(needle), "missing {needle:?} in: {msg}");
        }
    }

    #[test]
    fn stage_dependencies_are_enforced() {
        let (_dir, text) = world();
        let mut cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        cfg.stages = vec!["std-kd".into()];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("needs stage teacher"), "got: {msg}");

        cfg.stages = vec!["sft-kd".into(), "teacher".into(), "std-kd".into()];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("needs stage sft"), "got: {msg}");

        cfg.stages = vec!["teacher".into(), "student".into()];
        cfg.validate().unwrap();
    }
}
