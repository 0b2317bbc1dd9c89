//! Voxel grids with physical spacing, and the primitives every other stage
//! builds on: intensity normalization, resampling, foreground aggregation,
//! distance transforms and NIfTI I/O.
//!
//! Arrays are indexed `[x, y, z]` (NIfTI voxel order); multi-channel grids are
//! `[channel, x, y, z]`.

mod distance;
mod foreground;
pub mod nifti_io;
mod normalize;
mod resample;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

pub use distance::{distance_to_sites, squared_distance_to_sites};
pub use foreground::foreground_union;
pub use normalize::{normalize_intensity, CtWindow};
pub use resample::{
    dynamic_target_spacing, resample_linear, resample_nearest, resampled_dims, Interpolation,
    Resample, ResampleSpec, SpacingBounds,
};

/// Voxel size in millimetres along x, y, z.
pub type Spacing = [f64; 3];
/// Grid extent in voxels along x, y, z.
pub type Dims = [usize; 3];

pub(crate) fn dims_of<T>(a: &ArrayView3<T>) -> Dims {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

pub(crate) fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(invalid(format!("spacing must be positive, got {spacing:?}")))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().all(|d| *d >= 1) {
        Ok(())
    } else {
        Err(invalid(format!("grid dimensions must be >= 1, got {dims:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    CT,
    MRI,
    PET,
    US,
    Microscopy,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::CT,
        Modality::MRI,
        Modality::PET,
        Modality::US,
        Modality::Microscopy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::CT => "CT",
            Modality::MRI => "MRI",
            Modality::PET => "PET",
            Modality::US => "US",
            Modality::Microscopy => "Microscopy",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ct" => Ok(Modality::CT),
            "mr" | "mri" => Ok(Modality::MRI),
            "pet" => Ok(Modality::PET),
            "us" | "ultrasound" => Ok(Modality::US),
            "microscopy" | "micro" => Ok(Modality::Microscopy),
            other => Err(invalid(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntensityDomain {
    Raw,
    /// Every voxel lies in `[0, 255]`.
    Normalized,
}

/// Scalar image with physical spacing and modality metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: Spacing,
    modality: Modality,
    domain: IntensityDomain,
}

impl Volume {
    /// A volume of raw scanner intensities.
    pub fn new(data: Array3<f32>, spacing: Spacing, modality: Modality) -> Result<Self> {
        check_dims(data.shape())?;
        check_spacing(spacing)?;
        Ok(Self {
            data,
            spacing,
            modality,
            domain: IntensityDomain::Raw,
        })
    }

    /// A volume already mapped to `[0, 255]`.
    pub fn normalized(data: Array3<f32>, spacing: Spacing, modality: Modality) -> Result<Self> {
        if data.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(invalid("normalized volume has values outside [0, 255]"));
        }
        let mut v = Self::new(data, spacing, modality)?;
        v.domain = IntensityDomain::Normalized;
        Ok(v)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn domain(&self) -> IntensityDomain {
        self.domain
    }

    pub fn dims(&self) -> Dims {
        dims_of(&self.data.view())
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Same metadata, new voxel data. Used after resampling and cropping.
    pub(crate) fn with_data(&self, data: Array3<f32>, spacing: Spacing) -> Self {
        Self {
            data,
            spacing,
            modality: self.modality,
            domain: self.domain,
        }
    }
}

/// Binary `N x H x W x D` masks, one channel per class.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelMask {
    data: Array4<u8>,
    channels: Vec<u32>,
    spacing: Spacing,
}

impl MultiChannelMask {
    pub fn new(data: Array4<u8>, channels: Vec<u32>, spacing: Spacing) -> Result<Self> {
        check_channels(data.shape()[0], &channels)?;
        check_dims(&data.shape()[1..])?;
        check_spacing(spacing)?;
        if data.iter().any(|v| *v > 1) {
            return Err(invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            data,
            channels,
            spacing,
        })
    }

    /// Splits a label map into one binary channel per label `1..=n`.
    pub fn from_labels(labels: &LabelMap) -> Self {
        let n = labels.n_classes;
        let d = labels.dims();
        let mut data = Array4::<u8>::zeros((n, d[0], d[1], d[2]));
        for ((x, y, z), &l) in labels.data.indexed_iter() {
            if l > 0 {
                data[[l as usize - 1, x, y, z]] = 1;
            }
        }
        Self {
            data,
            channels: (1..=n as u32).collect(),
            spacing: labels.spacing,
        }
    }

    pub fn data(&self) -> &Array4<u8> {
        &self.data
    }

    pub fn channels(&self) -> &[u32] {
        &self.channels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn n_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> Dims {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn into_data(self) -> Array4<u8> {
        self.data
    }
}

/// Per-class voxel probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    data: Array4<f32>,
    channels: Vec<u32>,
    spacing: Spacing,
}

impl ProbabilityMap {
    pub fn new(data: Array4<f32>, channels: Vec<u32>, spacing: Spacing) -> Result<Self> {
        check_channels(data.shape()[0], &channels)?;
        check_dims(&data.shape()[1..])?;
        check_spacing(spacing)?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        Ok(Self {
            data,
            channels,
            spacing,
        })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView4<'_, f32> {
        self.data.view()
    }

    pub fn channels(&self) -> &[u32] {
        &self.channels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn n_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> Dims {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channel(&self, n: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), n)
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }
}

/// Integer segmentation: 0 is background, `1..=n_classes` are classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    data: Array3<u16>,
    n_classes: usize,
    spacing: Spacing,
}

impl LabelMap {
    pub fn new(data: Array3<u16>, n_classes: usize, spacing: Spacing) -> Result<Self> {
        check_dims(data.shape())?;
        check_spacing(spacing)?;
        if let Some(l) = data.iter().find(|l| **l as usize > n_classes) {
            return Err(invalid(format!("label {l} exceeds class count {n_classes}")));
        }
        Ok(Self {
            data,
            n_classes,
            spacing,
        })
    }

    pub fn data(&self) -> &Array3<u16> {
        &self.data
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn dims(&self) -> Dims {
        dims_of(&self.data.view())
    }

    pub fn foreground_voxels(&self) -> usize {
        self.data.iter().filter(|l| **l != 0).count()
    }

    /// Binary mask of one label.
    pub fn mask(&self, label: u16) -> Array3<bool> {
        self.data.mapv(|l| l == label)
    }

    pub fn into_data(self) -> Array3<u16> {
        self.data
    }
}

fn check_channels(n: usize, channels: &[u32]) -> Result<()> {
    if n == 0 {
        return Err(invalid("at least one channel is required"));
    }
    if channels.len() != n {
        return Err(shape(format!(
            "{} channel identifiers for {} channels",
            channels.len(),
            n
        )));
    }
    Ok(())
}
