use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::IterativeParams;
use crate::error::{invalid, Error, Result};
use crate::postproc::PostprocParams;
use crate::prompt_gen::PromptGenParams;
use crate::volume::{CtWindow, Dims, Spacing, SpacingBounds};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    #[default]
    TextOnly,
    Hybrid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    /// All class prompts in one decoder invocation per patch.
    #[default]
    Parallel,
    /// One decoder invocation per class per patch.
    Sequential,
}

impl std::fmt::Display for Execution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Execution::Parallel => "parallel",
            Execution::Sequential => "sequential",
        })
    }
}

impl std::str::FromStr for Execution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Execution::Parallel),
            "sequential" => Ok(Execution::Sequential),
            other => Err(invalid(format!("unknown execution mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stages {
    Coarse,
    #[default]
    TwoStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub spacing: Spacing,
    pub crop: Dims,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub roi_scale: f64,
    pub budget_factor: f64,
    pub budget_slack: f64,
    /// Sliding-window overlap as a fraction of the crop.
    pub overlap: f64,
    /// Gaussian blend sigma as a fraction of the crop.
    pub sigma_scale: f64,
    /// Scale factor of the dynamic spacing rule.
    pub alpha: f64,
    pub spacing_bounds: SpacingBounds,
    /// Apply the dynamic spacing rule before the coarse pass too, using the
    /// whole volume as the reference region.
    pub stage1_dynamic_spacing: bool,
    /// Spacing bounds by canonical class name, used when that class is the
    /// stage-2 reference target.
    pub class_spacing_bounds: BTreeMap<String, SpacingBounds>,
    /// CT intensity window; soft tissue when absent.
    pub ct_window: Option<CtWindow>,
    pub iterative: IterativeParams,
    pub postproc: PostprocParams,
    /// Corruption parameters for simulating coarse prompts from ground truth.
    pub prompt_gen: PromptGenParams,
    pub mode: PromptMode,
    pub execution: Execution,
    pub stages: Stages,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig { spacing: [1.5, 1.5, 3.0], crop: [224, 224, 128] },
            stage2: StageConfig { spacing: [1.0, 1.0, 1.0], crop: [192, 192, 192] },
            roi_scale: 1.25,
            budget_factor: 1.8,
            budget_slack: 1.9,
            overlap: 0.5,
            sigma_scale: 0.125,
            alpha: 1.0,
            spacing_bounds: SpacingBounds::default(),
            stage1_dynamic_spacing: false,
            class_spacing_bounds: BTreeMap::new(),
            ct_window: None,
            iterative: IterativeParams::default(),
            postproc: PostprocParams::default(),
            prompt_gen: PromptGenParams::default(),
            mode: PromptMode::TextOnly,
            execution: Execution::Parallel,
            stages: Stages::TwoStage,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Small crops for CPU runs of the toy backbone on phantom-sized volumes.
    pub fn desk() -> Self {
        Self {
            stage1: StageConfig { spacing: [1.5, 1.5, 3.0], crop: [32, 32, 16] },
            stage2: StageConfig { spacing: [1.0, 1.0, 1.0], crop: [48, 48, 48] },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.1..=1.5).contains(&self.roi_scale) {
            return Err(invalid(format!("roi_scale must lie in [1.1, 1.5], got {}", self.roi_scale)));
        }
        for s in [&self.stage1, &self.stage2] {
            if s.crop.contains(&0) {
                return Err(invalid("crop sizes must be positive"));
            }
            if s.spacing.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(invalid("stage spacings must be positive"));
            }
        }
        if !(self.budget_factor > 0.0 && self.budget_slack > 0.0) {
            return Err(invalid("budget factor and slack must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(invalid("overlap must lie in [0, 1)"));
        }
        if !(self.sigma_scale > 0.0 && self.alpha > 0.0) {
            return Err(invalid("sigma_scale and alpha must be positive"));
        }
        self.spacing_bounds.validate()?;
        for b in self.class_spacing_bounds.values() {
            b.validate()?;
        }
        self.iterative.validate()?;
        self.prompt_gen.validate()?;
        self.postproc.validate()
    }

    /// Reads JSON, or TOML when the extension is `.toml`, and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::desk().validate().unwrap();
        let bad = PipelineConfig { roi_scale: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let mut bad = PipelineConfig::default();
        bad.stage2.crop = [0, 1, 1];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loads_json_and_toml() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"roi_scale": 1.4, "execution": "sequential", "stage2": {"spacing": [1,1,1], "crop": [32,32,32]}}"#).unwrap();
        let c = PipelineConfig::load(&j).unwrap();
        assert_eq!((c.roi_scale, c.execution, c.stage2.crop), (1.4, Execution::Sequential, [32, 32, 32]));
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "mode = \"hybrid\"\nseed = 7\n[iterative]\niterations = 3\n").unwrap();
        let c = PipelineConfig::load(&t).unwrap();
        assert_eq!((c.mode, c.seed, c.iterative.iterations), (PromptMode::Hybrid, 7, 3));
        std::fs::write(&j, r#"{"prompt_gen": {"p_zero": 0.25}}"#).unwrap();
        assert_eq!(PipelineConfig::load(&j).unwrap().prompt_gen.p_zero, 0.25);
        std::fs::write(&j, r#"{"prompt_gen": {"p_zero": 1.5}}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&j), Err(Error::Config(_))));
        std::fs::write(&j, r#"{"roi_scale": 2.0}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&j), Err(Error::Config(_))));
        std::fs::write(&j, r#"{"no_such_field": 1}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&j), Err(Error::Config(_))));
    }
}
