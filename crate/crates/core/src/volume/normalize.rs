use serde::{Deserialize, Serialize};

use super::{IntensityDomain, Modality, Volume};
use crate::error::{invalid, Result};

/// A CT display window in Hounsfield units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtWindow {
    pub width: f64,
    pub level: f64,
}

impl CtWindow {
    pub const SOFT_TISSUE: CtWindow = CtWindow { width: 400.0, level: 40.0 };
    pub const LUNG: CtWindow = CtWindow { width: 1500.0, level: -160.0 };
    pub const BRAIN: CtWindow = CtWindow { width: 80.0, level: 40.0 };
    pub const BONE: CtWindow = CtWindow { width: 1800.0, level: 400.0 };

    pub fn by_name(name: &str) -> Option<CtWindow> {
        match name.to_ascii_lowercase().as_str() {
            "soft-tissue" | "soft_tissue" | "soft" | "abdomen" => Some(Self::SOFT_TISSUE),
            "lung" => Some(Self::LUNG),
            "brain" => Some(Self::BRAIN),
            "bone" => Some(Self::BONE),
            _ => None,
        }
    }

    fn map(self, hu: f64) -> f32 {
        let lo = self.level - self.width / 2.0;
        let v = (hu - lo) / self.width * 255.0;
        v.clamp(0.0, 255.0) as f32
    }
}

const LOW_PERCENTILE: f64 = 0.5;
const HIGH_PERCENTILE: f64 = 99.5;

/// Maps a raw volume to `[0, 255]`.
///
/// An explicit window is only valid for CT and is always applied. Without one,
/// a volume already inside `[0, 255]` passes through untouched, CT falls back
/// to the soft-tissue window and every other modality is clipped to its
/// 0.5th..99.5th percentile range and rescaled.
pub fn normalize_intensity(v: &Volume, window: Option<CtWindow>) -> Result<Volume> {
    if v.data().is_empty() {
        return Err(invalid("cannot normalize an empty volume"));
    }
    if v.domain() == IntensityDomain::Normalized {
        return Err(invalid("volume is already normalized"));
    }
    if let Some(w) = window {
        if v.modality() != Modality::CT {
            return Err(invalid(format!(
                "intensity window given for {} volume",
                v.modality()
            )));
        }
        if !(w.width > 0.0) || !w.level.is_finite() {
            return Err(invalid("window width must be positive"));
        }
        return Ok(finish(v, v.data().mapv(|x| w.map(x as f64))));
    }

    if v.data().iter().all(|x| (0.0..=255.0).contains(x)) {
        return Ok(finish(v, v.data().clone()));
    }

    if v.modality() == Modality::CT {
        let w = CtWindow::SOFT_TISSUE;
        return Ok(finish(v, v.data().mapv(|x| w.map(x as f64))));
    }

    let mut sorted: Vec<f64> = v
        .data()
        .iter()
        .map(|x| if x.is_nan() { 0.0 } else { *x as f64 })
        .collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, LOW_PERCENTILE);
    let hi = percentile(&sorted, HIGH_PERCENTILE);
    let range = hi - lo;
    let out = if range > 0.0 && range.is_finite() {
        v.data().mapv(|x| {
            let c = (x as f64).clamp(lo, hi);
            (((c - lo) / range) * 255.0).clamp(0.0, 255.0) as f32
        })
    } else {
        v.data().mapv(|_| 0.0)
    };
    Ok(finish(v, out))
}

fn finish(v: &Volume, data: ndarray::Array3<f32>) -> Volume {
    let mut out = v.with_data(data, v.spacing());
    out.domain = IntensityDomain::Normalized;
    // clamp() keeps NaN, so scrub it here
    out.data.mapv_inplace(|x| if x.is_nan() { 0.0 } else { x });
    out
}

/// Linear-interpolated percentile of an ascending slice, `q` in `[0, 100]`.
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] + (sorted[i + 1] - sorted[i]) * frac
    }
}
