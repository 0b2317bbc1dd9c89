//! On-disk sessions: one directory per session holding the volume, a state
//! file, the latest probability and label maps and the scribble buffer.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use medalseg_core::pipeline::{
    prepare_volume, resolve_queries, ClassEntry, PipelineConfig, PromptMode, PromptRequest, Queries, RunOutput,
    RunReport, Scribbles, Stages,
};
use medalseg_core::volume::nifti_io;
use medalseg_core::{Dims, LabelMap, Modality, ProbabilityMap, Spacing, Volume};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ApiError;
use crate::render::SlicePlane;
use crate::rle;
use crate::Kit;

const VOLUME: &str = "volume.nii.gz";
const STATE: &str = "state.json";
const COARSE: &str = "coarse.nii.gz";
const PROBABILITIES: &str = "probabilities.nii.gz";
const LABELS: &str = "labels.nii.gz";
const SCRIBBLES: &str = "scribbles.json";

/// Session ids are generated as UUIDs; anything that could escape the data
/// directory is rejected before touching the disk.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Hex SHA-256 of the label map's dims and little-endian voxel values.
pub fn labels_sha256(labels: &LabelMap) -> String {
    let mut h = Sha256::new();
    for d in labels.dims() {
        h.update((d as u64).to_le_bytes());
    }
    for v in labels.data().iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Add,
    Erase,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScribbleStroke {
    pub class_id: u32,
    pub axis: usize,
    pub index: usize,
    /// Alternating run lengths over the slice in row-major order, starting
    /// with background.
    pub counts: Vec<u32>,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub modality: Modality,
    pub dims: Dims,
    pub spacing: Spacing,
    pub created_ms: u64,
    pub updated_ms: u64,
    #[serde(default)]
    pub prompts: Vec<PromptRequest>,
    #[serde(default)]
    pub mode: PromptMode,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default)]
    pub report: Option<RunReport>,
    #[serde(default)]
    pub labels_sha256: Option<String>,
}

/// What `GET /sessions/{id}` returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub modality: Modality,
    pub dims: Dims,
    pub spacing: Spacing,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub classes: Vec<ClassEntry>,
    pub report: Option<RunReport>,
    pub labels_sha256: Option<String>,
    pub has_scribbles: bool,
    pub busy: bool,
}

#[derive(Serialize, Deserialize)]
struct ScribbleChannel {
    class_id: u32,
    add: Vec<u32>,
    erase: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ScribbleFile {
    dims: Dims,
    channels: Vec<ScribbleChannel>,
}

/// The latest run of a session.
#[derive(Clone)]
pub struct SessionResult {
    pub queries: Arc<Queries>,
    pub coarse: Arc<ProbabilityMap>,
    pub probabilities: Arc<ProbabilityMap>,
    pub labels: Arc<LabelMap>,
}

pub struct Session {
    pub state: SessionState,
    pub volume: Arc<Volume>,
    /// Display intensities in `[0, 255]`.
    pub gray: Arc<Array3<f32>>,
    pub result: Option<SessionResult>,
    /// Same channel order as the result's classes.
    pub scribbles: Option<Scribbles>,
    dir: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

fn io_err(e: std::io::Error) -> ApiError {
    ApiError::internal(e.to_string())
}

impl Session {
    pub fn create(dir: PathBuf, id: String, volume: Volume, config: &PipelineConfig) -> Result<Self, ApiError> {
        let gray = prepare_volume(&volume, config)?.into_data();
        std::fs::create_dir_all(&dir).map_err(io_err)?;
        nifti_io::write_volume(dir.join(VOLUME), &volume)?;
        let t = now_ms();
        let state = SessionState {
            id,
            modality: volume.modality(),
            dims: volume.dims(),
            spacing: volume.spacing(),
            created_ms: t,
            updated_ms: t,
            prompts: Vec::new(),
            mode: PromptMode::TextOnly,
            stages: Stages::TwoStage,
            report: None,
            labels_sha256: None,
        };
        let s = Self { state, volume: Arc::new(volume), gray: Arc::new(gray), result: None, scribbles: None, dir };
        s.save_state()?;
        Ok(s)
    }

    /// Reads a session directory back; the class manifest is re-resolved
    /// from the stored prompts.
    pub fn load(dir: PathBuf, kit: &Kit, config: &PipelineConfig) -> Result<Self, ApiError> {
        let state: SessionState = serde_json::from_slice(&std::fs::read(dir.join(STATE)).map_err(io_err)?)
            .map_err(|e| ApiError::internal(format!("corrupt session state: {e}")))?;
        let volume = nifti_io::read_volume(dir.join(VOLUME), state.modality)?;
        let gray = prepare_volume(&volume, config)?.into_data();
        let mut s = Self { state, volume: Arc::new(volume), gray: Arc::new(gray), result: None, scribbles: None, dir };
        if s.state.report.is_some() && dir_has(&s.dir, LABELS) {
            let queries = resolve_queries(&s.state.prompts, kit.models())?;
            let channels: Vec<u32> = queries.classes.iter().map(|c| c.class_id).collect();
            let coarse = nifti_io::read_probabilities(s.dir.join(COARSE), channels.clone())?;
            let probabilities = nifti_io::read_probabilities(s.dir.join(PROBABILITIES), channels)?;
            let labels = nifti_io::read_labels(s.dir.join(LABELS), Some(queries.len()))?;
            s.scribbles = Some(s.read_scribbles(&queries)?);
            s.result = Some(SessionResult {
                queries: Arc::new(queries),
                coarse: Arc::new(coarse),
                probabilities: Arc::new(probabilities),
                labels: Arc::new(labels),
            });
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.state.id
    }

    pub fn classes(&self) -> &[ClassEntry] {
        self.result.as_ref().map_or(&[], |r| &r.queries.classes)
    }

    pub fn info(&self, busy: bool) -> SessionInfo {
        let st = &self.state;
        SessionInfo {
            id: st.id.clone(),
            modality: st.modality,
            dims: st.dims,
            spacing: st.spacing,
            created_ms: st.created_ms,
            updated_ms: st.updated_ms,
            classes: self.classes().to_vec(),
            report: st.report.clone(),
            labels_sha256: st.labels_sha256.clone(),
            has_scribbles: self.scribbles.as_ref().is_some_and(|s| !s.is_empty()),
            busy,
        }
    }

    pub fn labels_path(&self) -> PathBuf {
        self.dir.join(LABELS)
    }

    /// Stores a fresh segmentation. Scribbles survive only if the class
    /// manifest is unchanged.
    pub fn set_segmentation(
        &mut self,
        prompts: Vec<PromptRequest>,
        queries: Queries,
        out: RunOutput,
        mode: PromptMode,
        stages: Stages,
    ) -> Result<(), ApiError> {
        let same_classes = self.classes().iter().map(|c| c.class_id).eq(queries.classes.iter().map(|c| c.class_id));
        if !same_classes || self.scribbles.is_none() {
            self.scribbles = Some(Scribbles::zeros(queries.len(), self.state.dims));
        }
        self.state.prompts = prompts;
        self.state.mode = mode;
        self.state.stages = stages;
        self.store(Arc::new(queries), out)?;
        self.save_scribbles()
    }

    /// Stores a refined result for the current queries.
    pub fn set_refined(&mut self, out: RunOutput) -> Result<(), ApiError> {
        let queries = self
            .result
            .as_ref()
            .map(|r| r.queries.clone())
            .ok_or_else(|| ApiError::unprocessable("session has not been segmented"))?;
        self.state.mode = PromptMode::Hybrid;
        self.state.stages = Stages::TwoStage;
        self.store(queries, out)
    }

    fn store(&mut self, queries: Arc<Queries>, out: RunOutput) -> Result<(), ApiError> {
        nifti_io::write_probabilities(self.dir.join(COARSE), &out.coarse)?;
        nifti_io::write_probabilities(self.dir.join(PROBABILITIES), &out.probabilities)?;
        nifti_io::write_labels(self.dir.join(LABELS), &out.labels)?;
        self.state.labels_sha256 = Some(labels_sha256(&out.labels));
        self.state.report = Some(out.report);
        self.result = Some(SessionResult {
            queries,
            coarse: Arc::new(out.coarse),
            probabilities: Arc::new(out.probabilities),
            labels: Arc::new(out.labels),
        });
        self.touch()
    }

    /// Rasterizes one 2-D stroke into the native-resolution buffer. The
    /// last stroke over a voxel wins: add clears an earlier erase and vice
    /// versa.
    pub fn apply_stroke(&mut self, stroke: &ScribbleStroke) -> Result<(), ApiError> {
        let k = self
            .classes()
            .iter()
            .position(|c| c.class_id == stroke.class_id)
            .ok_or_else(|| ApiError::unprocessable(format!("class {} is not in this session's manifest", stroke.class_id)))?;
        let plane = SlicePlane::new(self.state.dims, stroke.axis, stroke.index)?;
        let mask = rle::decode(&stroke.counts, plane.len())?;
        let s = self.scribbles.as_mut().ok_or_else(|| ApiError::unprocessable("session has not been segmented"))?;
        let (set, clear) = match stroke.polarity {
            Polarity::Add => (&mut s.add, &mut s.erase),
            Polarity::Erase => (&mut s.erase, &mut s.add),
        };
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let [x, y, z] = plane.voxel(i);
            set[[k, x, y, z]] = 1;
            clear[[k, x, y, z]] = 0;
        }
        self.save_scribbles()?;
        self.touch()
    }

    pub fn clear_scribbles(&mut self) -> Result<(), ApiError> {
        if let Some(s) = self.scribbles.as_mut() {
            s.add.fill(0);
            s.erase.fill(0);
            self.save_scribbles()?;
            self.touch()?;
        }
        Ok(())
    }

    fn touch(&mut self) -> Result<(), ApiError> {
        self.state.updated_ms = now_ms().max(self.state.updated_ms);
        self.save_state()
    }

    fn save_state(&self) -> Result<(), ApiError> {
        let bytes = serde_json::to_vec_pretty(&self.state).map_err(|e| ApiError::internal(e.to_string()))?;
        write_atomic(&self.dir.join(STATE), &bytes).map_err(io_err)
    }

    fn save_scribbles(&self) -> Result<(), ApiError> {
        let Some(s) = &self.scribbles else { return Ok(()) };
        let channels = self
            .classes()
            .iter()
            .enumerate()
            .map(|(k, c)| ScribbleChannel {
                class_id: c.class_id,
                add: rle::encode(s.add.index_axis(Axis(0), k).iter().map(|v| *v != 0)),
                erase: rle::encode(s.erase.index_axis(Axis(0), k).iter().map(|v| *v != 0)),
            })
            .collect();
        let file = ScribbleFile { dims: self.state.dims, channels };
        let bytes = serde_json::to_vec(&file).map_err(|e| ApiError::internal(e.to_string()))?;
        write_atomic(&self.dir.join(SCRIBBLES), &bytes).map_err(io_err)
    }

    fn read_scribbles(&self, queries: &Queries) -> Result<Scribbles, ApiError> {
        let dims = self.state.dims;
        let mut s = Scribbles::zeros(queries.len(), dims);
        if !dir_has(&self.dir, SCRIBBLES) {
            return Ok(s);
        }
        let file: ScribbleFile = serde_json::from_slice(&std::fs::read(self.dir.join(SCRIBBLES)).map_err(io_err)?)
            .map_err(|e| ApiError::internal(format!("corrupt scribble file: {e}")))?;
        if file.dims != dims {
            return Err(ApiError::internal("scribble file dims differ from the volume"));
        }
        let n = dims.iter().product();
        for ch in &file.channels {
            let Some(k) = queries.classes.iter().position(|c| c.class_id == ch.class_id) else { continue };
            for (src, dst) in [(&ch.add, &mut s.add), (&ch.erase, &mut s.erase)] {
                let flat = rle::decode(src, n)?;
                for (v, m) in dst.index_axis_mut(Axis(0), k).iter_mut().zip(flat) {
                    *v = u8::from(m);
                }
            }
        }
        Ok(s)
    }
}

fn dir_has(dir: &Path, name: &str) -> bool {
    dir.join(name).is_file()
}
