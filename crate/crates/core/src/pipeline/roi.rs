use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::{Dims, LabelMap, Spacing};

/// Half-open voxel box `[lo, hi)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub lo: Dims,
    pub hi: Dims,
}

impl RoiBox {
    pub fn full(dims: Dims) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    pub fn dims(&self) -> Dims {
        [0, 1, 2].map(|i| self.hi[i] - self.lo[i])
    }

    pub fn is_full(&self, dims: Dims) -> bool {
        self.lo == [0; 3] && self.hi == dims
    }

    pub fn crop<'a, T>(&self, a: ArrayView3<'a, T>) -> ArrayView3<'a, T> {
        a.slice_move(s![self.lo[0]..self.hi[0], self.lo[1]..self.hi[1], self.lo[2]..self.hi[2]])
    }

    pub fn crop4<'a, T>(&self, a: ArrayView4<'a, T>) -> ArrayView4<'a, T> {
        a.slice_move(s![.., self.lo[0]..self.hi[0], self.lo[1]..self.hi[1], self.lo[2]..self.hi[2]])
    }

    pub fn paste4(&self, into: &mut Array4<f32>, from: &Array4<f32>) {
        into.slice_mut(s![.., self.lo[0]..self.hi[0], self.lo[1]..self.hi[1], self.lo[2]..self.hi[2]])
            .assign(from);
    }
}

/// Tight bounding box of the non-zero voxels of `mask`-like data.
pub fn bounding_box<T: Copy + PartialEq + Default>(a: ArrayView3<T>) -> Option<RoiBox> {
    let zero = T::default();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for ((x, y, z), v) in a.indexed_iter() {
        if *v != zero {
            for (i, c) in [x, y, z].into_iter().enumerate() {
                lo[i] = lo[i].min(c);
                hi[i] = hi[i].max(c + 1);
            }
        }
    }
    (lo[0] != usize::MAX).then_some(RoiBox { lo, hi })
}

/// Bounding box of the coarse foreground, each extent scaled by `scale` about
/// the box centre; lower edges floored, upper edges ceiled, then clamped.
pub fn extract_roi(coarse: &LabelMap, scale: f64) -> Result<RoiBox> {
    if !(scale > 0.0) {
        return Err(invalid("ROI scale must be positive"));
    }
    let b = bounding_box(coarse.data().view()).ok_or(Error::EmptyForeground)?;
    let dims = coarse.dims();
    let mut out = b;
    for i in 0..3 {
        let center = (b.lo[i] + b.hi[i]) as f64 / 2.0;
        let half = (b.hi[i] - b.lo[i]) as f64 * scale / 2.0;
        out.lo[i] = (center - half).floor().max(0.0) as usize;
        out.hi[i] = ((center + half).ceil() as usize).min(dims[i]);
    }
    Ok(out)
}

/// Coarsens the target spacing when the region would exceed the memory
/// threshold `factor^3 * prod(crop)` voxels at spacing `target`:
/// `t'_i = max(t_i, extent_i / (slack * crop_i))`.
pub fn enforce_memory_budget(extent_mm: [f64; 3], crop: Dims, target: Spacing, factor: f64, slack: f64) -> Spacing {
    let v_threshold = factor.powi(3) * crop.iter().map(|c| *c as f64).product::<f64>();
    let volume: f64 = extent_mm.iter().product();
    let at_target: f64 = target.iter().product();
    if volume <= v_threshold * at_target {
        return target;
    }
    [0, 1, 2].map(|i| target[i].max(extent_mm[i] / (slack * crop[i] as f64)))
}

/// Physical extent `spacing * dims` of a box.
pub fn extent_mm(dims: Dims, spacing: Spacing) -> [f64; 3] {
    [0, 1, 2].map(|i| dims[i] as f64 * spacing[i])
}

/// Voxel count of a label map's smallest connected foreground component by
/// bounding box, with the label that owns it.
pub(crate) fn smallest_component_box(labels: &LabelMap, connectivity: crate::postproc::Connectivity) -> Option<(u16, Dims)> {
    let mut best: Option<(usize, u16, Dims)> = None;
    for label in 1..=labels.n_classes() as u16 {
        let mask = labels.mask(label);
        let comps = crate::postproc::connected_components(mask.view(), connectivity);
        for k in 1..=comps.count() as u32 {
            let one: Array3<bool> = comps.labels.mapv(|v| v == k);
            let b = bounding_box(one.view()).expect("component is non-empty");
            let size = comps.sizes[k as usize - 1];
            if best.is_none_or(|(s, ..)| size < s) {
                best = Some((size, label, b.dims()));
            }
        }
    }
    best.map(|(_, l, d)| (l, d))
}
