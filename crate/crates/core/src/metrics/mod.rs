//! Training loss and evaluation metrics.

mod instance;
mod loss;
mod overlap;
mod surface;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use instance::{candidate_pairs, instance_f1_dsctp, InstanceParams, InstanceScore, Matching, OverlapMeasure};
pub use loss::{bce_dice_loss, LossValue, LOSS_EPS};
pub use overlap::dsc;
pub use surface::{boundary, nsd};

use crate::error::{shape, Error, Result};
use crate::postproc::{connected_components, Connectivity};
use crate::volume::LabelMap;

/// One class to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalClass {
    pub label: u16,
    #[serde(default)]
    pub name: String,
    /// Lesion-like classes also get instance F1 and DSC TP.
    #[serde(default)]
    pub instance: bool,
    #[serde(default)]
    pub nsd_tolerance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub nsd_tolerance: f64,
    pub instance: InstanceParams,
    /// Connectivity used to split a class mask into instances.
    pub instance_connectivity: Connectivity,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            nsd_tolerance: 1.0,
            instance: InstanceParams::default(),
            instance_connectivity: Connectivity::TwentySix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: u16,
    pub name: String,
    pub dsc: f64,
    pub nsd: f64,
    pub instances: Option<InstanceScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub mean_f1: Option<f64>,
    pub mean_dsc_tp: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate(gt: &LabelMap, pred: &LabelMap, classes: &[EvalClass], params: &EvalParams) -> Result<MetricReport> {
    if gt.dims() != pred.dims() {
        return Err(shape(format!("ground truth {:?} vs prediction {:?}", gt.dims(), pred.dims())));
    }
    if params.nsd_tolerance < 0.0 || classes.iter().any(|c| c.nsd_tolerance.is_some_and(|t| t < 0.0)) {
        return Err(Error::InvalidArgument("NSD tolerance must be non-negative".into()));
    }
    let spacing = gt.spacing();
    let rows = classes
        .iter()
        .map(|c| {
            let a = gt.mask(c.label);
            let b = pred.mask(c.label);
            let instances = c.instance.then(|| {
                let ga = connected_components(a.view(), params.instance_connectivity);
                let pb = connected_components(b.view(), params.instance_connectivity);
                instance_f1_dsctp(ga.labels.view(), pb.labels.view(), &params.instance)
            });
            ClassMetrics {
                label: c.label,
                name: c.name.clone(),
                dsc: dsc(a.view(), b.view()),
                nsd: nsd(a.view(), b.view(), spacing, c.nsd_tolerance.unwrap_or(params.nsd_tolerance)),
                instances,
            }
        })
        .collect::<Vec<_>>();
    Ok(MetricReport {
        mean_dsc: mean(rows.iter().map(|r| r.dsc)).unwrap_or(0.0),
        mean_nsd: mean(rows.iter().map(|r| r.nsd)).unwrap_or(0.0),
        mean_f1: mean(rows.iter().filter_map(|r| r.instances.as_ref().map(|i| i.f1))),
        mean_dsc_tp: mean(rows.iter().filter_map(|r| r.instances.as_ref().map(|i| i.dsc_tp))),
        classes: rows,
    })
}

impl MetricReport {
    /// One row per class; DSC and NSD in percent like the usual result
    /// tables, F1 and DSC TP blank for non-instance classes.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["label", "name", "dsc", "nsd", "f1", "dsc_tp", "tp", "fp", "fn"]).map_err(err)?;
        for r in &self.classes {
            let pct = |v: f64| format!("{:.2}", 100.0 * v);
            let (f1, dtp, tp, fp, fn_) = match &r.instances {
                Some(i) => (pct(i.f1), pct(i.dsc_tp), i.tp.to_string(), i.fp.to_string(), i.fn_.to_string()),
                None => Default::default(),
            };
            w.write_record([r.label.to_string(), r.name.clone(), pct(r.dsc), pct(r.nsd), f1, dtp, tp, fp, fn_])
                .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}
