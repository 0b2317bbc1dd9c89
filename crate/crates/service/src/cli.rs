//! Command-line front end. Exit codes: 0 success, 1 other failure, 2 missing
//! input file, 3 unresolved prompts, 4 invalid configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use medalseg_core::bench::{run_bench, write_records_csv, BenchParams, BenchPostproc};
use medalseg_core::metrics::{evaluate, EvalClass, EvalParams, Matching, OverlapMeasure};
use medalseg_core::phantom::PhantomSpec;
use medalseg_core::pipeline::{
    resolve_queries, run_queries, Execution, PipelineConfig, PromptMode, PromptRequest, Scribbles, Stages,
};
use medalseg_core::postproc::refine_segmentation;
use medalseg_core::volume::nifti_io;
use medalseg_core::{Error as CoreError, Modality, MultiChannelMask, Volume};
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::server::{AppState, ServerConfig, DATA_DIR_ENV};
use crate::{Kit, PromptInput};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    MissingFile(String),
    #[error("{0}")]
    Unresolved(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::MissingFile(_) => 2,
            CliError::Unresolved(_) => 3,
            CliError::Config(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CliError::Config(m),
            CoreError::UnresolvedClass { .. } | CoreError::UnresolvedModality(_) => CliError::Unresolved(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "medalseg", version, about = "Text- and scribble-prompted volumetric segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Segment a volume from text prompts, optionally with scribbles.
    Segment(SegmentArgs),
    /// Score a prediction against ground truth.
    Metrics(MetricsArgs),
    /// Time parallel against sequential class decoding.
    Bench(BenchArgs),
    /// Turn a probability stack into a label map.
    Postproc(PostprocArgs),
    /// Write a synthetic phantom with its ground truth and prompts.
    Phantom(PhantomArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    TextOnly,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Coarse,
    TwoStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExecArg {
    Parallel,
    Sequential,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Parallel => Execution::Parallel,
            ExecArg::Sequential => Execution::Sequential,
        }
    }
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Toy backbone sidecar file; the bundled one when absent.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Pipeline configuration (JSON or TOML); desk-sized crops when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "CT")]
    pub modality: Modality,
    /// JSON list of prompts: sentences or {"sentence", "instance_label"}.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// An extra anatomy prompt; repeatable.
    #[arg(long = "prompt")]
    pub prompt: Vec<String>,
    #[arg(long, value_enum, default_value = "text-only")]
    pub mode: ModeArg,
    /// Channel manifest of voxels to add to the spatial prompts (hybrid mode).
    #[arg(long)]
    pub scribbles: Option<PathBuf>,
    /// Channel manifest of voxels to clear from the spatial prompts.
    #[arg(long)]
    pub erase: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "two-stage")]
    pub stage: StageArg,
    #[arg(long, value_enum)]
    pub execution: Option<ExecArg>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one probability NIfTI per class.
    #[arg(long)]
    pub probabilities: bool,
    /// Fail if any prompt does not resolve.
    #[arg(long)]
    pub strict: bool,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// JSON list of {"label", "name", "instance", "nsd_tolerance"}; every
    /// label of the ground truth when absent.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// NSD tolerance in mm.
    #[arg(long, default_value_t = 1.0)]
    pub nsd_tolerance: f64,
    #[arg(long, value_enum, default_value = "optimal")]
    pub matching: MatchingArg,
    #[arg(long, value_enum, default_value = "dsc")]
    pub measure: MeasureArg,
    /// Instance match threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Per-class CSV; stdout when absent.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Aggregate JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MatchingArg {
    Greedy,
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MeasureArg {
    Dsc,
    Iou,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated class counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 8, 16, 24])]
    pub classes: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum, default_values = ["parallel", "sequential"])]
    pub modes: Vec<ExecArg>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value = "refine")]
    pub postproc: PostprocArg,
    /// Records CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary JSON with speedups and forward ratios.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PostprocArg {
    Refine,
    LargestComponent,
}

#[derive(Args, Debug)]
pub struct PostprocArgs {
    /// Channel-last 4-D probability NIfTI.
    #[arg(long)]
    pub stack: PathBuf,
    /// JSON {"channels": [{"id", "name"}]} naming the stack's channels in order.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output label map.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// The benchmark phantom with this many classes instead of the bundled one.
    #[arg(long)]
    pub bench: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, env = DATA_DIR_ENV, default_value = "medalseg-data")]
    pub data_dir: PathBuf,
    /// Concurrent inference jobs across all sessions.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelName {
    pub id: u32,
    #[serde(default)]
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelManifest {
    pub channels: Vec<ChannelName>,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Segment(a) => segment(a),
        Command::Metrics(a) => metrics(a),
        Command::Bench(a) => bench(a),
        Command::Postproc(a) => postproc(a),
        Command::Phantom(a) => phantom(a),
        Command::Serve(a) => serve(a),
    }
}

fn require(paths: &[Option<&Path>]) -> CliResult {
    for p in paths.iter().flatten() {
        if !p.is_file() {
            return Err(CliError::MissingFile(format!("no such file: {}", p.display())));
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let config = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk(),
    };
    validate(&config)?;
    Ok(config)
}

fn validate(config: &PipelineConfig) -> CliResult {
    config.validate().map_err(|e| CliError::Config(e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn scribble_channels(mask: &MultiChannelMask, class_ids: &[u32], into: &mut ndarray::Array4<u8>) -> CliResult {
    for (c, id) in mask.channels().iter().enumerate() {
        let k = class_ids.iter().position(|x| x == id).ok_or_else(|| {
            CliError::Other(anyhow::anyhow!("scribble channel {id} matches no segmented class"))
        })?;
        let src = mask.data().index_axis(Axis(0), c);
        if src.shape() != &into.shape()[1..] {
            return Err(CliError::Other(anyhow::anyhow!("scribble dims {:?} differ from the image", src.shape())));
        }
        let mut dst = into.index_axis_mut(Axis(0), k);
        ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = (*d).max(u8::from(s != 0)));
    }
    Ok(())
}

fn segment(a: SegmentArgs) -> CliResult {
    require(&[
        Some(&a.image),
        a.prompts.as_deref(),
        a.scribbles.as_deref(),
        a.erase.as_deref(),
        a.models.config.as_deref(),
        a.models.backbone.as_deref(),
    ])?;
    let mut config = load_config(a.models.config.as_deref())?;
    config.mode = match a.mode {
        ModeArg::TextOnly => PromptMode::TextOnly,
        ModeArg::Hybrid => PromptMode::Hybrid,
    };
    config.stages = match a.stage {
        StageArg::Coarse => Stages::Coarse,
        StageArg::TwoStage => Stages::TwoStage,
    };
    if let Some(e) = a.execution {
        config.execution = e.into();
    }
    validate(&config)?;

    let mut prompts: Vec<PromptRequest> = match &a.prompts {
        Some(p) => read_json::<Vec<PromptInput>>(p)?.into_iter().map(Into::into).collect(),
        None => Vec::new(),
    };
    prompts.extend(a.prompt.iter().map(|s| PromptInput::Sentence(s.clone()).into()));
    if prompts.is_empty() {
        return Err(CliError::Other(anyhow::anyhow!("give prompts with --prompts or --prompt")));
    }

    let kit = Kit::load(a.models.backbone.as_deref())?;
    let volume = nifti_io::read_volume(&a.image, a.modality)?;
    let queries = resolve_queries(&prompts, kit.models())?;
    if a.strict && !queries.unresolved.is_empty() {
        let list: Vec<String> = queries.unresolved.iter().map(|u| format!("{:?}: {}", u.sentence, u.error)).collect();
        return Err(CliError::Unresolved(format!("unresolved prompts: {}", list.join("; "))));
    }
    for u in &queries.unresolved {
        tracing::warn!("prompt {:?} skipped: {}", u.sentence, u.error);
    }

    let scribbles = if a.scribbles.is_some() || a.erase.is_some() {
        let ids: Vec<u32> = queries.classes.iter().map(|c| c.class_id).collect();
        let mut s = Scribbles::zeros(queries.len(), volume.dims());
        if let Some(p) = &a.scribbles {
            scribble_channels(&nifti_io::read_mask_manifest(p)?, &ids, &mut s.add)?;
        }
        if let Some(p) = &a.erase {
            scribble_channels(&nifti_io::read_mask_manifest(p)?, &ids, &mut s.erase)?;
        }
        Some(s)
    } else {
        None
    };

    let start = std::time::Instant::now();
    let out = run_queries(&volume, &queries, scribbles.as_ref(), kit.models(), &config)?;
    let mut report = out.report;
    report.phases_ms.insert("total".into(), start.elapsed().as_secs_f64() * 1e3);

    std::fs::create_dir_all(&a.out)?;
    nifti_io::write_labels(a.out.join("labels.nii.gz"), &out.labels)?;
    if a.probabilities {
        for (k, c) in queries.classes.iter().enumerate() {
            let v = Volume::new(out.probabilities.channel(k).to_owned(), volume.spacing(), volume.modality())?;
            nifti_io::write_volume(a.out.join(format!("prob_{}.nii.gz", c.class_id)), &v)?;
        }
    }
    write_json(&a.out.join("report.json"), &report)?;
    eprintln!(
        "segmented {} classes in {:.0} ms ({} backbone forwards) -> {}",
        queries.len(),
        start.elapsed().as_secs_f64() * 1e3,
        report.backbone_forwards,
        a.out.display()
    );
    Ok(())
}

fn metrics(a: MetricsArgs) -> CliResult {
    require(&[Some(&a.gt), Some(&a.pred), a.classes.as_deref()])?;
    let gt = nifti_io::read_labels(&a.gt, None)?;
    let classes: Vec<EvalClass> = match &a.classes {
        Some(p) => read_json(p)?,
        None => (1..=gt.n_classes() as u16)
            .map(|label| EvalClass { label, name: String::new(), instance: false, nsd_tolerance: None })
            .collect(),
    };
    let n = classes.iter().map(|c| c.label as usize).max().unwrap_or(0).max(gt.n_classes());
    let gt = nifti_io::read_labels(&a.gt, Some(n))?;
    let pred = nifti_io::read_labels(&a.pred, Some(n))?;
    let mut params = EvalParams { nsd_tolerance: a.nsd_tolerance, ..Default::default() };
    params.instance.threshold = a.threshold;
    params.instance.matching = match a.matching {
        MatchingArg::Greedy => Matching::Greedy,
        MatchingArg::Optimal => Matching::Optimal,
    };
    params.instance.measure = match a.measure {
        MeasureArg::Dsc => OverlapMeasure::Dsc,
        MeasureArg::Iou => OverlapMeasure::Iou,
    };
    let report = evaluate(&gt, &pred, &classes, &params)?;
    match &a.csv {
        Some(p) => report.write_csv(BufWriter::new(File::create(p)?))?,
        None => report.write_csv(std::io::stdout().lock())?,
    }
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult {
    require(&[a.models.config.as_deref(), a.models.backbone.as_deref()])?;
    let config = load_config(a.models.config.as_deref())?;
    let kit = Kit::load(a.models.backbone.as_deref())?;
    let params = BenchParams {
        classes: a.classes,
        modes: a.modes.into_iter().map(Into::into).collect(),
        repeats: a.repeats,
        postproc: match a.postproc {
            PostprocArg::Refine => BenchPostproc::Refine,
            PostprocArg::LargestComponent => BenchPostproc::LargestComponent,
        },
        config,
    };
    let outcome = run_bench(&params, kit.models())?;
    match &a.out {
        Some(p) => write_records_csv(&outcome.records, BufWriter::new(File::create(p)?))?,
        None => write_records_csv(&outcome.records, std::io::stdout().lock())?,
    }
    if let Some(p) = &a.summary {
        write_json(p, &outcome.summary)?;
    }
    for s in &outcome.summary {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        eprintln!(
            "N={:>2}  parallel {} ms  sequential {} ms  speedup {}  forward ratio {}  mean DSC {:.3}",
            s.n_classes,
            fmt(s.parallel_ms),
            fmt(s.sequential_ms),
            fmt(s.speedup),
            fmt(s.forward_ratio),
            s.mean_dsc
        );
    }
    Ok(())
}

fn postproc(a: PostprocArgs) -> CliResult {
    require(&[Some(&a.stack), Some(&a.manifest), a.config.as_deref()])?;
    let config = load_config(a.config.as_deref())?;
    let manifest: ChannelManifest = read_json(&a.manifest)?;
    if manifest.channels.is_empty() {
        return Err(CliError::Other(anyhow::anyhow!("channel manifest is empty")));
    }
    let ids = manifest.channels.iter().map(|c| c.id).collect();
    let p = nifti_io::read_probabilities(&a.stack, ids)?;
    let labels = refine_segmentation(&p, &config.postproc)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    nifti_io::write_labels(&a.out, &labels)?;
    Ok(())
}

fn phantom(a: PhantomArgs) -> CliResult {
    let spec = match a.bench {
        Some(n) => PhantomSpec::bench(n)?,
        None => PhantomSpec::bundled(),
    };
    let ph = spec.generate()?;
    std::fs::create_dir_all(&a.out)?;
    nifti_io::write_volume(a.out.join("image.nii.gz"), &ph.volume)?;
    nifti_io::write_labels(a.out.join("truth.nii.gz"), &ph.truth)?;
    write_json(&a.out.join("prompts.json"), &ph.prompts)?;
    let classes: Vec<EvalClass> = spec
        .organs
        .iter()
        .enumerate()
        .map(|(k, o)| EvalClass { label: k as u16 + 1, name: o.name.clone(), instance: false, nsd_tolerance: None })
        .collect();
    write_json(&a.out.join("classes.json"), &classes)?;
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    require(&[a.models.config.as_deref(), a.models.backbone.as_deref()])?;
    let pipeline = load_config(a.models.config.as_deref())?;
    let kit = Kit::load(a.models.backbone.as_deref())?;
    let state = AppState::new(ServerConfig { data_dir: a.data_dir, workers: a.workers, pipeline }, kit)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(crate::server::serve(a.addr, state))?;
    Ok(())
}
