//! Parallel versus sequential class decoding on the bench phantom.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::dsc;
use crate::phantom::PhantomSpec;
use crate::pipeline::{resolve_queries, run_queries, Execution, Models, PipelineConfig};
use crate::postproc::{connected_components, Connectivity};
use crate::volume::LabelMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub n_classes: usize,
    pub mode: Execution,
    pub wall_ms: f64,
    /// Backbone forward passes.
    pub forwards: u64,
    pub peak_bytes: u64,
}

/// Label post-processing used for the accuracy column of the summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchPostproc {
    /// The pipeline's per-class refinement.
    #[default]
    Refine,
    /// Keep only the largest connected component of the union of all
    /// foreground classes.
    LargestComponent,
}

impl std::str::FromStr for BenchPostproc {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refine" => Ok(Self::Refine),
            "largest-component" => Ok(Self::LargestComponent),
            _ => Err(invalid(format!("unknown postproc {s:?}; expected refine or largest-component"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchParams {
    pub classes: Vec<usize>,
    pub modes: Vec<Execution>,
    pub repeats: usize,
    pub postproc: BenchPostproc,
    pub config: PipelineConfig,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            classes: vec![1, 4, 8, 16, 24],
            modes: vec![Execution::Parallel, Execution::Sequential],
            repeats: 1,
            postproc: BenchPostproc::Refine,
            config: PipelineConfig::desk(),
        }
    }
}

/// Per class count: median wall times, forward ratio and whether the two
/// modes produced the same probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub n_classes: usize,
    pub parallel_ms: Option<f64>,
    pub sequential_ms: Option<f64>,
    pub speedup: Option<f64>,
    pub forward_ratio: Option<f64>,
    pub outputs_identical: Option<bool>,
    pub mean_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub summary: Vec<BenchSummary>,
}

/// Zeroes every foreground voxel outside the largest connected component of
/// the foreground union.
pub fn keep_largest_foreground(labels: &LabelMap, connectivity: Connectivity) -> Result<LabelMap> {
    let fg = labels.data().mapv(|l| l != 0);
    let cc = connected_components(fg.view(), connectivity);
    if cc.count() == 0 {
        return Ok(labels.clone());
    }
    // components come sorted by size, largest first
    let mut out = labels.data().clone();
    ndarray::Zip::from(&mut out).and(&cc.labels).for_each(|l, &c| {
        if c != 1 {
            *l = 0;
        }
    });
    LabelMap::new(out, labels.n_classes(), labels.spacing())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

pub fn run_bench(params: &BenchParams, models: Models<'_>) -> Result<BenchOutcome> {
    if params.repeats == 0 || params.classes.is_empty() || params.modes.is_empty() {
        return Err(invalid("bench needs at least one class count, mode and repeat"));
    }
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for &n in &params.classes {
        let phantom = PhantomSpec::bench(n)?.generate()?;
        let queries = resolve_queries(&phantom.prompts, models)?;
        if !queries.unresolved.is_empty() {
            return Err(invalid(format!("bench prompts failed to resolve: {:?}", queries.unresolved)));
        }
        let mut times: Vec<(Execution, Vec<f64>)> = Vec::new();
        let mut first: Vec<(Execution, crate::volume::ProbabilityMap)> = Vec::new();
        let mut forwards: Vec<(Execution, u64)> = Vec::new();
        let mut dscs = Vec::new();
        for &mode in &params.modes {
            let config = PipelineConfig { execution: mode, ..params.config.clone() };
            let mut ms = Vec::new();
            for r in 0..params.repeats {
                let start = Instant::now();
                let out = run_queries(&phantom.volume, &queries, None, models, &config)?;
                let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                ms.push(wall_ms);
                records.push(BenchRecord {
                    n_classes: n,
                    mode,
                    wall_ms,
                    forwards: out.report.backbone_forwards,
                    peak_bytes: out.report.peak_bytes,
                });
                if r == 0 {
                    let labels = match params.postproc {
                        BenchPostproc::Refine => out.labels.clone(),
                        BenchPostproc::LargestComponent => {
                            let argmax = crate::postproc::argmax_labelmap(&out.probabilities, config.postproc.prob_threshold);
                            keep_largest_foreground(&argmax, config.postproc.connectivity)?
                        }
                    };
                    let mean = (1..=n as u16)
                        .map(|l| dsc(phantom.truth.mask(l).view(), labels.mask(l).view()))
                        .sum::<f64>()
                        / n as f64;
                    dscs.push(mean);
                    forwards.push((mode, out.report.backbone_forwards));
                    first.push((mode, out.probabilities));
                }
            }
            times.push((mode, ms));
        }
        let get = |m: Execution| times.iter().find(|(k, _)| *k == m).map(|(_, v)| median(v.clone()));
        let fwd = |m: Execution| forwards.iter().find(|(k, _)| *k == m).map(|(_, v)| *v as f64);
        let prob = |m: Execution| first.iter().find(|(k, _)| *k == m).map(|(_, p)| p);
        let (par, seq) = (get(Execution::Parallel), get(Execution::Sequential));
        summary.push(BenchSummary {
            n_classes: n,
            parallel_ms: par,
            sequential_ms: seq,
            speedup: par.zip(seq).map(|(p, s)| s / p),
            forward_ratio: fwd(Execution::Parallel).zip(fwd(Execution::Sequential)).map(|(p, s)| s / p),
            outputs_identical: prob(Execution::Parallel).zip(prob(Execution::Sequential)).map(|(p, s)| p == s),
            mean_dsc: dscs.iter().sum::<f64>() / dscs.len() as f64,
        });
    }
    Ok(BenchOutcome { records, summary })
}

/// CSV with columns `n_classes,mode,wall_ms,forwards,peak_bytes`.
pub fn write_records_csv(records: &[BenchRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_classes", "mode", "wall_ms", "forwards", "peak_bytes"]).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.n_classes.to_string(),
            r.mode.to_string(),
            format!("{:.3}", r.wall_ms),
            r.forwards.to_string(),
            r.peak_bytes.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
