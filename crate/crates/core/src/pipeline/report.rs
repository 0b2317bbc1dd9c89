use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Execution, PromptMode, Stages};
use super::roi::RoiBox;
use crate::text::InstanceLabel;
use crate::volume::{Dims, Modality, Spacing};

/// One output channel: label `label` in the label map, channel `label - 1`
/// in the probability map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub label: u16,
    pub class_id: u32,
    pub name: String,
    pub modality: Modality,
    pub instance_label: InstanceLabel,
    pub sentences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnresolvedPrompt {
    pub sentence: String,
    pub instance_label: InstanceLabel,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub phases_ms: BTreeMap<String, f64>,
    pub backbone_forwards: u64,
    pub head_forwards: u64,
    pub patches: BTreeMap<String, usize>,
    pub fallback: bool,
    /// Analytic estimate of the largest set of live buffers, in bytes.
    pub peak_bytes: u64,
    pub execution: Execution,
    pub mode: PromptMode,
    pub stages: Stages,
    pub stage1_spacing: Option<Spacing>,
    pub stage1_dims: Option<Dims>,
    pub stage2_spacing: Option<Spacing>,
    pub stage2_dims: Option<Dims>,
    pub roi: Option<RoiBox>,
    pub classes: Vec<ClassEntry>,
    pub unresolved: Vec<UnresolvedPrompt>,
}

impl RunReport {
    pub(crate) fn time<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        *self.phases_ms.entry(phase.to_string()).or_default() += ms;
        out
    }

    pub(crate) fn note_peak(&mut self, bytes: u64) {
        self.peak_bytes = self.peak_bytes.max(bytes);
    }

    pub fn total_ms(&self) -> f64 {
        self.phases_ms.values().sum()
    }
}

/// Live `f32` buffers while one sliding-window stage runs: the native-grid
/// probability maps, the stage image, prompt, accumulator and weight sum, and
/// one patch's decoder working set (`F`, `F_a`, `F_r`, prompt, three
/// predictions, the running sum, two masks).
pub fn stage_bytes(native_voxels: usize, stage_voxels: usize, patch_voxels: usize, channels: usize, n: usize, execution: Execution) -> u64 {
    let active = match execution {
        Execution::Parallel => n,
        Execution::Sequential => 1,
    };
    let f32s = 2 * n * native_voxels + (2 + 2 * n) * stage_voxels + patch_voxels * (3 * channels + 5 * active + 1);
    (4 * f32s + 2 * patch_voxels) as u64
}
