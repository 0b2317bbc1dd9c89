use ndarray::{Array3, Array4, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{
    check_spacing, dims_of, Dims, LabelMap, MultiChannelMask, ProbabilityMap, Spacing, Volume,
};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Target grid description used by the dynamic spacing rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub target_spacing: Spacing,
    pub patch: Dims,
    pub alpha: f64,
    pub interpolation: Interpolation,
}

impl ResampleSpec {
    pub fn new(target_spacing: Spacing, patch: Dims, alpha: f64) -> Result<Self> {
        let spec = Self {
            target_spacing,
            patch,
            alpha,
            interpolation: Interpolation::Linear,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_spacing(self.target_spacing)?;
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.patch.iter().any(|p| *p == 0) {
            return Err(invalid("patch size must be >= 1 along every axis"));
        }
        Ok(())
    }
}

/// Clamp range applied to adjusted spacings, in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacingBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for SpacingBounds {
    fn default() -> Self {
        Self { min: 0.3, max: 6.0 }
    }
}

impl SpacingBounds {
    pub fn validate(&self) -> Result<()> {
        if self.min > 0.0 && self.min <= self.max && self.max.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!(
                "spacing bounds must satisfy 0 < min <= max, got [{}, {}]",
                self.min, self.max
            )))
        }
    }
}

/// Adjusts the working spacing so that a reference region of `d` voxels fits
/// the patch.
///
/// Per axis: `max(t, p*a*t/d)` when the current spacing is coarser than the
/// target, `min(t, p*a*t/d)` otherwise, then clamped to `bounds`.
pub fn dynamic_target_spacing(
    current: Spacing,
    d: Dims,
    spec: &ResampleSpec,
    bounds: SpacingBounds,
) -> Spacing {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let t = spec.target_spacing[i];
        let fit = spec.patch[i] as f64 * spec.alpha * t / d[i].max(1) as f64;
        let s = if current[i] > t { t.max(fit) } else { t.min(fit) };
        out[i] = s.clamp(bounds.min, bounds.max);
    }
    out
}

/// `round(d * s / t)` per axis (half away from zero), at least 1.
pub fn resampled_dims(dims: Dims, spacing: Spacing, new_spacing: Spacing) -> Dims {
    let mut out = [0; 3];
    for i in 0..3 {
        let v = (dims[i] as f64 * spacing[i] / new_spacing[i]).round();
        out[i] = (v as usize).max(1);
    }
    out
}

fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    let c = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    c.clamp(0.0, (n_in - 1) as f64)
}

fn resample_axis_linear(a: &Array3<f32>, axis: usize, n_out: usize) -> Array3<f32> {
    let n_in = a.shape()[axis];
    if n_in == n_out {
        return a.clone();
    }
    let mut shape = [a.shape()[0], a.shape()[1], a.shape()[2]];
    shape[axis] = n_out;
    let mut out = Array3::<f32>::zeros(shape);
    for i in 0..n_out {
        let c = source_coord(i, n_in, n_out);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let w = (c - i0 as f64) as f32;
        let lo = a.index_axis(Axis(axis), i0);
        let hi = a.index_axis(Axis(axis), i1);
        Zip::from(out.index_axis_mut(Axis(axis), i))
            .and(&lo)
            .and(&hi)
            .for_each(|o, &l, &h| *o = l + (h - l) * w);
    }
    out
}

/// Trilinear resampling to an explicit grid, separable along the three axes.
pub fn resample_linear(a: ArrayView3<f32>, dims: Dims) -> Array3<f32> {
    let mut cur = a.to_owned();
    for axis in 0..3 {
        cur = resample_axis_linear(&cur, axis, dims[axis]);
    }
    cur
}

/// Nearest-neighbour resampling to an explicit grid.
pub fn resample_nearest<T: Copy>(a: ArrayView3<T>, dims: Dims) -> Array3<T> {
    let src = dims_of(&a);
    if src == dims {
        return a.to_owned();
    }
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|ax| {
            (0..dims[ax])
                .map(|i| {
                    let c = ((i as f64 + 0.5) * src[ax] as f64 / dims[ax] as f64).floor();
                    (c as usize).min(src[ax] - 1)
                })
                .collect()
        })
        .collect();
    Array3::from_shape_fn(dims, |(x, y, z)| a[[maps[0][x], maps[1][y], maps[2][z]]])
}

fn per_channel<T, F>(a: &Array4<T>, dims: Dims, f: F) -> Array4<T>
where
    T: Copy + Default,
    F: Fn(ArrayView3<T>, Dims) -> Array3<T>,
{
    let n = a.shape()[0];
    let mut out = Array4::<T>::default((n, dims[0], dims[1], dims[2]));
    for c in 0..n {
        let r = f(a.index_axis(Axis(0), c), dims);
        out.index_axis_mut(Axis(0), c).assign(&r);
    }
    out
}

/// Grids that carry spacing and can be moved to another one.
pub trait Resample: Sized {
    fn grid_dims(&self) -> Dims;
    fn grid_spacing(&self) -> Spacing;

    /// Resamples onto an explicit grid; `new_spacing` is recorded as is.
    fn resample_to(&self, dims: Dims, new_spacing: Spacing) -> Result<Self>;

    fn resample(&self, new_spacing: Spacing) -> Result<Self> {
        check_spacing(new_spacing)?;
        let dims = resampled_dims(self.grid_dims(), self.grid_spacing(), new_spacing);
        self.resample_to(dims, new_spacing)
    }
}

fn check_target(dims: Dims, spacing: Spacing) -> Result<()> {
    check_spacing(spacing)?;
    if dims.contains(&0) {
        return Err(invalid("target dimensions must be >= 1"));
    }
    Ok(())
}

impl Resample for Volume {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn grid_spacing(&self) -> Spacing {
        self.spacing()
    }

    fn resample_to(&self, dims: Dims, new_spacing: Spacing) -> Result<Self> {
        check_target(dims, new_spacing)?;
        Ok(self.with_data(resample_linear(self.data().view(), dims), new_spacing))
    }
}

impl Resample for ProbabilityMap {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn grid_spacing(&self) -> Spacing {
        self.spacing()
    }

    fn resample_to(&self, dims: Dims, new_spacing: Spacing) -> Result<Self> {
        check_target(dims, new_spacing)?;
        let mut data = per_channel(self.data(), dims, resample_linear);
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        ProbabilityMap::new(data, self.channels().to_vec(), new_spacing)
    }
}

impl Resample for MultiChannelMask {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn grid_spacing(&self) -> Spacing {
        self.spacing()
    }

    fn resample_to(&self, dims: Dims, new_spacing: Spacing) -> Result<Self> {
        check_target(dims, new_spacing)?;
        let data = per_channel(self.data(), dims, resample_nearest);
        MultiChannelMask::new(data, self.channels().to_vec(), new_spacing)
    }
}

impl Resample for LabelMap {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn grid_spacing(&self) -> Spacing {
        self.spacing()
    }

    fn resample_to(&self, dims: Dims, new_spacing: Spacing) -> Result<Self> {
        check_target(dims, new_spacing)?;
        let data = resample_nearest(self.data().view(), dims);
        LabelMap::new(data, self.n_classes(), new_spacing)
    }
}
