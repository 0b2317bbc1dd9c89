//! Two-stage coarse-to-fine inference.
//!
//! Stage 1 segments a low-resolution copy of the whole volume without spatial
//! prompts. Its probabilities, optionally merged with user scribbles, become
//! the spatial prompts of stage 2, which runs at high resolution inside a
//! region of interest around the coarse foreground.

mod config;
mod predictor;
mod report;
mod roi;
mod sliding;

use ndarray::{Array2, Array4, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

pub use config::{Execution, PipelineConfig, PromptMode, StageConfig, Stages};
pub use predictor::DecoderPredictor;
pub use report::{stage_bytes, ClassEntry, RunReport, UnresolvedPrompt};
pub use roi::{bounding_box, enforce_memory_budget, extent_mm, extract_roi, RoiBox};
pub use sliding::{gaussian_weights, sliding_window_infer, tiling, window_starts, PatchContext, PatchPredictor, WindowParams};

use crate::decoder::{Backbone, Refiner};
use crate::error::{invalid, shape, Error, Result};
use crate::postproc::{argmax_labelmap, refine_segmentation};
use crate::text::{InstanceLabel, PromptResolver, TextEncoder};
use crate::volume::{
    dynamic_target_spacing, normalize_intensity, resample_linear, resampled_dims, Dims, IntensityDomain, LabelMap,
    Modality, ProbabilityMap, ResampleSpec, Volume,
};

const STAGE1: u64 = 1;
const STAGE2: u64 = 2;

/// A free-text prompt as supplied by the user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub sentence: String,
    pub instance_label: InstanceLabel,
}

impl PromptRequest {
    pub fn new(sentence: impl Into<String>, instance_label: InstanceLabel) -> Self {
        Self { sentence: sentence.into(), instance_label }
    }
}

/// The trained (or toy) components a run needs.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub backbone: &'a dyn Backbone,
    pub refiner: &'a dyn Refiner,
    pub encoder: &'a dyn TextEncoder,
    pub resolver: &'a PromptResolver,
}

/// Resolved, de-duplicated classes and their text embeddings `Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Queries {
    pub classes: Vec<ClassEntry>,
    pub unresolved: Vec<UnresolvedPrompt>,
    pub z: Array2<f32>,
}

impl Queries {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// The queries restricted to the first `n` classes.
    pub fn take(&self, n: usize) -> Queries {
        let n = n.min(self.len());
        Queries {
            classes: self.classes[..n].to_vec(),
            unresolved: self.unresolved.clone(),
            z: self.z.slice(ndarray::s![..n, ..]).to_owned(),
        }
    }
}

/// Resolves every prompt; failures are collected rather than fatal. Two
/// prompts naming the same class share one output channel. Fails only when
/// nothing resolves, with the first prompt's error.
pub fn resolve_queries(prompts: &[PromptRequest], models: Models<'_>) -> Result<Queries> {
    if prompts.is_empty() {
        return Err(invalid("no prompts given"));
    }
    let mut classes: Vec<ClassEntry> = Vec::new();
    let mut unresolved = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut first_err = None;
    for p in prompts {
        match models.resolver.resolve(&p.sentence, p.instance_label) {
            Ok(r) => {
                if let Some(c) = classes.iter_mut().find(|c| {
                    c.modality == r.modality && c.instance_label == r.instance_label && c.class_id == r.class_id
                }) {
                    c.sentences.push(p.sentence.clone());
                    continue;
                }
                rows.push(models.encoder.encode(&r));
                classes.push(ClassEntry {
                    label: classes.len() as u16 + 1,
                    class_id: r.class_id,
                    name: r.canonical_name,
                    modality: r.modality,
                    instance_label: r.instance_label,
                    sentences: vec![p.sentence.clone()],
                });
            }
            Err(e) => {
                unresolved.push(UnresolvedPrompt {
                    sentence: p.sentence.clone(),
                    instance_label: p.instance_label,
                    error: e.to_string(),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    if classes.is_empty() {
        return Err(first_err.expect("at least one prompt failed"));
    }
    let dim = models.encoder.dim();
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let z = Array2::from_shape_vec((classes.len(), dim), flat).map_err(|e| shape(e.to_string()))?;
    Ok(Queries { classes, unresolved, z })
}

/// User annotations at native resolution, one channel per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Scribbles {
    pub add: Array4<u8>,
    pub erase: Array4<u8>,
}

impl Scribbles {
    pub fn zeros(n: usize, dims: Dims) -> Self {
        let z = Array4::zeros((n, dims[0], dims[1], dims[2]));
        Self { add: z.clone(), erase: z }
    }

    pub fn is_empty(&self) -> bool {
        self.add.iter().chain(self.erase.iter()).all(|v| *v == 0)
    }

    /// Voxelwise max with the added strokes, then zero where erased.
    pub fn merge_into(&self, p: &mut Array4<f32>) -> Result<()> {
        if p.shape() != self.add.shape() || p.shape() != self.erase.shape() {
            return Err(shape(format!("scribbles {:?} vs prompts {:?}", self.add.shape(), p.shape())));
        }
        Zip::from(p).and(&self.add).and(&self.erase).for_each(|p, &a, &e| {
            if a != 0 {
                *p = p.max(1.0);
            }
            if e != 0 {
                *p = 0.0;
            }
        });
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub labels: LabelMap,
    pub probabilities: ProbabilityMap,
    /// Stage-1 probabilities on the native grid; the source of stage-2
    /// prompts and of re-runs with new scribbles.
    pub coarse: ProbabilityMap,
    pub report: RunReport,
}

/// Normalizes raw volumes to `[0, 255]`; normalized ones pass through.
pub fn prepare_volume(volume: &Volume, config: &PipelineConfig) -> Result<Volume> {
    match volume.domain() {
        IntensityDomain::Normalized => Ok(volume.clone()),
        IntensityDomain::Raw => {
            let window = if volume.modality() == Modality::CT { config.ct_window } else { None };
            normalize_intensity(volume, window)
        }
    }
}

fn resample_channels(a: &Array4<f32>, dims: Dims) -> Array4<f32> {
    let mut out = Array4::<f32>::zeros((a.shape()[0], dims[0], dims[1], dims[2]));
    for (mut o, ch) in out.outer_iter_mut().zip(a.outer_iter()) {
        o.assign(&resample_linear(ch, dims));
    }
    out
}

fn voxels(d: Dims) -> usize {
    d.iter().product()
}

/// Sliding-window plus iterative inference of one stage on `image`.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    name: &str,
    stage: u64,
    image: ArrayView3<f32>,
    prompt: &Array4<f32>,
    crop: Dims,
    queries: &Queries,
    models: Models<'_>,
    config: &PipelineConfig,
    native: Dims,
    report: &mut RunReport,
) -> Result<Array4<f32>> {
    let params = WindowParams { crop, overlap: config.overlap, sigma_scale: config.sigma_scale };
    let dims = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let padded = [0, 1, 2].map(|i| dims[i].max(crop[i]));
    let mut pred = DecoderPredictor::new(
        models.backbone,
        models.refiner,
        queries.z.view(),
        &config.iterative,
        config.execution,
        config.seed,
        stage,
    );
    let out = sliding_window_infer(image, prompt.view(), &params, &mut pred, None)?;
    report.backbone_forwards += pred.backbone_forwards;
    report.head_forwards += pred.head_forwards;
    report.patches.insert(name.to_string(), tiling(padded, &params).len());
    report.note_peak(stage_bytes(
        voxels(native),
        voxels(padded),
        voxels(crop),
        models.backbone.channels(),
        queries.len(),
        config.execution,
    ));
    Ok(out)
}

/// Low-resolution whole-volume pass with empty prompts. Returns the
/// probabilities resampled to the native grid.
pub fn stage1_coarse(
    image: &Volume,
    queries: &Queries,
    models: Models<'_>,
    config: &PipelineConfig,
    report: &mut RunReport,
) -> Result<ProbabilityMap> {
    let native = image.dims();
    let target = if config.stage1_dynamic_spacing {
        let spec = ResampleSpec::new(config.stage1.spacing, config.stage1.crop, config.alpha)?;
        dynamic_target_spacing(image.spacing(), native, &spec, config.spacing_bounds)
    } else {
        config.stage1.spacing
    };
    let dims = resampled_dims(native, image.spacing(), target);
    report.stage1_spacing = Some(target);
    report.stage1_dims = Some(dims);
    let small = resample_linear(image.data().view(), dims);
    let prompt = Array4::<f32>::zeros((queries.len(), dims[0], dims[1], dims[2]));
    let p = run_stage("stage1", STAGE1, small.view(), &prompt, config.stage1.crop, queries, models, config, native, report)?;
    let channels = queries.classes.iter().map(|c| c.class_id).collect();
    ProbabilityMap::new(resample_channels(&p, native), channels, image.spacing())
}

/// High-resolution pass inside the ROI around the prompt foreground, with
/// `prompts` (native grid) as soft spatial prompts. Outside the ROI the
/// result keeps `outside`.
pub fn stage2_fine(
    image: &Volume,
    queries: &Queries,
    prompts: &Array4<f32>,
    outside: &Array4<f32>,
    models: Models<'_>,
    config: &PipelineConfig,
    report: &mut RunReport,
) -> Result<Array4<f32>> {
    let native = image.dims();
    let spacing = image.spacing();
    let channels: Vec<u32> = queries.classes.iter().map(|c| c.class_id).collect();
    let prompt_map = ProbabilityMap::new(prompts.clone(), channels, spacing)?;
    let fg = argmax_labelmap(&prompt_map, 0.5);
    let (roi, reference) = report.time("roi", |report| match extract_roi(&fg, config.roi_scale) {
        Ok(roi) => {
            let smallest = roi::smallest_component_box(&fg, config.postproc.connectivity);
            (roi, smallest)
        }
        Err(Error::EmptyForeground) => {
            report.fallback = true;
            (RoiBox::full(native), None)
        }
        Err(e) => unreachable!("{e}"),
    });
    let (ref_dims, bounds) = match reference {
        Some((label, d)) => {
            let name = &queries.classes[label as usize - 1].name;
            (d, config.class_spacing_bounds.get(name).copied().unwrap_or(config.spacing_bounds))
        }
        None => (roi.dims(), config.spacing_bounds),
    };
    let spec = ResampleSpec::new(config.stage2.spacing, config.stage2.crop, config.alpha)?;
    let t = dynamic_target_spacing(spacing, ref_dims, &spec, bounds);
    let t = enforce_memory_budget(extent_mm(roi.dims(), spacing), config.stage2.crop, t, config.budget_factor, config.budget_slack);
    let dims = resampled_dims(roi.dims(), spacing, t);
    report.roi = Some(roi);
    report.stage2_spacing = Some(t);
    report.stage2_dims = Some(dims);

    report.time("stage2", |report| {
        let img = resample_linear(roi.crop(image.data().view()), dims);
        let prm = resample_channels(&roi.crop4(prompts.view()).to_owned(), dims);
        let p = run_stage("stage2", STAGE2, img.view(), &prm, config.stage2.crop, queries, models, config, native, report)?;
        let mut out = outside.clone();
        roi.paste4(&mut out, &resample_channels(&p, roi.dims()));
        Ok(out)
    })
}

/// Stage 2 and post-processing from existing coarse probabilities.
pub fn run_from_coarse(
    image: &Volume,
    queries: &Queries,
    coarse: &ProbabilityMap,
    scribbles: Option<&Scribbles>,
    models: Models<'_>,
    config: &PipelineConfig,
    mut report: RunReport,
) -> Result<RunOutput> {
    if coarse.dims() != image.dims() || coarse.n_channels() != queries.len() {
        return Err(shape("coarse probabilities do not match the volume and queries"));
    }
    let mut prompts = coarse.data().clone();
    if config.mode == PromptMode::Hybrid {
        if let Some(s) = scribbles {
            s.merge_into(&mut prompts)?;
        }
    }
    let fine = stage2_fine(image, queries, &prompts, coarse.data(), models, config, &mut report)?;
    let channels: Vec<u32> = queries.classes.iter().map(|c| c.class_id).collect();
    let probabilities = ProbabilityMap::new(fine, channels, image.spacing())?;
    let labels = report.time("postproc", |_| refine_segmentation(&probabilities, &config.postproc))?;
    Ok(RunOutput { labels, probabilities, coarse: coarse.clone(), report })
}

fn new_report(queries: &Queries, config: &PipelineConfig) -> RunReport {
    RunReport {
        execution: config.execution,
        mode: config.mode,
        stages: config.stages,
        classes: queries.classes.clone(),
        unresolved: queries.unresolved.clone(),
        ..Default::default()
    }
}

/// Full run on already-resolved queries.
pub fn run_queries(
    volume: &Volume,
    queries: &Queries,
    scribbles: Option<&Scribbles>,
    models: Models<'_>,
    config: &PipelineConfig,
) -> Result<RunOutput> {
    config.validate()?;
    if queries.is_empty() {
        return Err(invalid("no queries to segment"));
    }
    if queries.z.ncols() != models.backbone.text_dim() {
        return Err(shape(format!(
            "text embeddings of width {} for a backbone expecting {}",
            queries.z.ncols(),
            models.backbone.text_dim()
        )));
    }
    let mut report = new_report(queries, config);
    let image = report.time("normalize", |_| prepare_volume(volume, config))?;
    let coarse = report.time("stage1", |report| stage1_coarse(&image, queries, models, config, report))?;
    match config.stages {
        Stages::Coarse => {
            let labels = report.time("postproc", |_| refine_segmentation(&coarse, &config.postproc))?;
            report.fallback = labels.foreground_voxels() == 0;
            Ok(RunOutput { labels, probabilities: coarse.clone(), coarse, report })
        }
        Stages::TwoStage => run_from_coarse(&image, queries, &coarse, scribbles, models, config, report),
    }
}

/// Resolves the prompts, then [`run_queries`].
pub fn run(
    volume: &Volume,
    prompts: &[PromptRequest],
    scribbles: Option<&Scribbles>,
    models: Models<'_>,
    config: &PipelineConfig,
) -> Result<RunOutput> {
    let start = std::time::Instant::now();
    let queries = resolve_queries(prompts, models)?;
    let text_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut out = run_queries(volume, &queries, scribbles, models, config)?;
    out.report.phases_ms.insert("text".into(), text_ms);
    Ok(out)
}

/// Re-runs stage 2 from stored coarse probabilities with new scribbles.
pub fn refine(
    volume: &Volume,
    queries: &Queries,
    coarse: &ProbabilityMap,
    scribbles: Option<&Scribbles>,
    models: Models<'_>,
    config: &PipelineConfig,
) -> Result<RunOutput> {
    config.validate()?;
    let mut report = new_report(queries, config);
    let image = report.time("normalize", |_| prepare_volume(volume, config))?;
    run_from_coarse(&image, queries, coarse, scribbles, models, config, report)
}

/// Per-class mask of a label map as `f32` prompt channels.
pub fn labels_to_prompts(labels: &LabelMap, n: usize) -> Array4<f32> {
    let d = labels.dims();
    let mut out = Array4::<f32>::zeros((n, d[0], d[1], d[2]));
    for (k, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
        Zip::from(&mut ch).and(labels.data()).for_each(|o, &l| *o = f32::from(l as usize == k + 1));
    }
    out
}
