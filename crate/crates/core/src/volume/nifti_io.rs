//! NIfTI-1 reading and writing for the grid types.
//!
//! Only axis-aligned spacing is carried over: on read it comes from
//! `pixdim[1..4]`, on write the sform is a plain diagonal scale. Multi-channel
//! masks are stored as one NIfTI per channel plus a JSON manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, Cursor};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array3, Array4, ArrayD, Axis, Ix3, Ix4};
use nifti::writer::WriterOptions;
use nifti::{InMemNiftiObject, IntoNdArray, NiftiHeader, NiftiObject};
use serde::{Deserialize, Serialize};

use super::{LabelMap, Modality, MultiChannelMask, ProbabilityMap, Spacing, Volume};
use crate::error::{invalid, shape, Result};

fn header_for(spacing: Spacing) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    h.xyzt_units = 2; // millimetres
    h.qform_code = 0;
    h.sform_code = 1;
    h.srow_x = [spacing[0] as f32, 0.0, 0.0, 0.0];
    h.srow_y = [0.0, spacing[1] as f32, 0.0, 0.0];
    h.srow_z = [0.0, 0.0, spacing[2] as f32, 0.0];
    h
}

fn spacing_of(h: &NiftiHeader) -> Result<Spacing> {
    let s = [h.pixdim[1].abs() as f64, h.pixdim[2].abs() as f64, h.pixdim[3].abs() as f64];
    // Some writers leave pixdim at zero; treat that as isotropic 1 mm.
    let s = s.map(|v| if v > 0.0 && v.is_finite() { v } else { 1.0 });
    Ok(s)
}

fn is_gz(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_object(path: &Path) -> Result<InMemNiftiObject> {
    // Sniff the gzip magic rather than trusting the extension.
    let mut r = BufReader::new(File::open(path)?);
    if is_gz(r.fill_buf()?) {
        Ok(InMemNiftiObject::from_reader(GzDecoder::new(r))?)
    } else {
        Ok(InMemNiftiObject::from_reader(r)?)
    }
}

fn object_from_bytes(bytes: &[u8]) -> Result<InMemNiftiObject> {
    if is_gz(bytes) {
        Ok(InMemNiftiObject::from_reader(GzDecoder::new(Cursor::new(bytes)))?)
    } else {
        Ok(InMemNiftiObject::from_reader(Cursor::new(bytes))?)
    }
}

fn squeeze3<T>(a: ArrayD<T>) -> Result<Array3<T>> {
    let mut a = a;
    while a.ndim() > 3 && a.shape()[a.ndim() - 1] == 1 {
        let last = a.ndim() - 1;
        a = a.index_axis_move(Axis(last), 0);
    }
    let dims = a.shape().to_vec();
    a.into_dimensionality::<Ix3>()
        .map_err(|_| shape(format!("expected a 3-D image, got shape {dims:?}")))
}

fn to_volume(obj: InMemNiftiObject, modality: Modality) -> Result<Volume> {
    let spacing = spacing_of(obj.header())?;
    let data = squeeze3(obj.into_volume().into_ndarray::<f32>()?)?;
    Volume::new(data, spacing, modality)
}

pub fn read_volume(path: impl AsRef<Path>, modality: Modality) -> Result<Volume> {
    to_volume(read_object(path.as_ref())?, modality)
}

/// Parses an in-memory `.nii` or `.nii.gz` file.
pub fn read_volume_bytes(bytes: &[u8], modality: Modality) -> Result<Volume> {
    to_volume(object_from_bytes(bytes)?, modality)
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let h = header_for(v.spacing());
    WriterOptions::new(path.as_ref())
        .reference_header(&h)
        .write_nifti(v.data())?;
    Ok(())
}

/// Reads an integer label map. With `n_classes = None` the class count is the
/// largest label present.
pub fn read_labels(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<LabelMap> {
    let obj = read_object(path.as_ref())?;
    let spacing = spacing_of(obj.header())?;
    let raw = squeeze3(obj.into_volume().into_ndarray::<f64>()?)?;
    if raw.iter().any(|v| *v < 0.0 || v.fract() != 0.0 || *v > u16::MAX as f64) {
        return Err(invalid("label map must hold non-negative integers"));
    }
    let data = raw.mapv(|v| v as u16);
    let n = n_classes.unwrap_or_else(|| data.iter().copied().max().unwrap_or(0) as usize);
    LabelMap::new(data, n, spacing)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let h = header_for(labels.spacing());
    WriterOptions::new(path.as_ref())
        .reference_header(&h)
        .write_nifti(labels.data())?;
    Ok(())
}

/// Stores probabilities as a 4-D image with the channel axis last.
pub fn write_probabilities(path: impl AsRef<Path>, p: &ProbabilityMap) -> Result<()> {
    let h = header_for(p.spacing());
    let xyzc = p.data().view().permuted_axes([1, 2, 3, 0]);
    WriterOptions::new(path.as_ref())
        .reference_header(&h)
        .write_nifti(&xyzc.as_standard_layout())?;
    Ok(())
}

pub fn read_probabilities(path: impl AsRef<Path>, channels: Vec<u32>) -> Result<ProbabilityMap> {
    let obj = read_object(path.as_ref())?;
    let spacing = spacing_of(obj.header())?;
    let a = obj.into_volume().into_ndarray::<f32>()?;
    let a = if a.ndim() == 3 { a.insert_axis(Axis(3)) } else { a };
    let dims = a.shape().to_vec();
    let a = a
        .into_dimensionality::<Ix4>()
        .map_err(|_| shape(format!("expected a 4-D probability image, got {dims:?}")))?;
    let data: Array4<f32> = a.permuted_axes([3, 0, 1, 2]).as_standard_layout().to_owned();
    ProbabilityMap::new(data, channels, spacing)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub channels: Vec<ManifestEntry>,
}

/// Writes `<stem>_ch<id>.nii.gz` next to the manifest and the manifest itself.
pub fn write_mask_manifest(manifest_path: impl AsRef<Path>, m: &MultiChannelMask) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mask")
        .to_string();
    let h = header_for(m.spacing());
    let mut entries = Vec::with_capacity(m.n_channels());
    for (c, id) in m.channels().iter().enumerate() {
        let file = PathBuf::from(format!("{stem}_ch{id}.nii.gz"));
        WriterOptions::new(dir.join(&file))
            .reference_header(&h)
            .write_nifti(&m.data().index_axis(Axis(0), c))?;
        entries.push(ManifestEntry { id: *id, file });
    }
    let manifest = MaskManifest { channels: entries };
    std::fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_mask_manifest(manifest_path: impl AsRef<Path>) -> Result<MultiChannelMask> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest: MaskManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    if manifest.channels.is_empty() {
        return Err(invalid("mask manifest lists no channels"));
    }
    let mut spacing = None;
    let mut planes = Vec::new();
    for e in &manifest.channels {
        let obj = read_object(&dir.join(&e.file))?;
        spacing.get_or_insert(spacing_of(obj.header())?);
        let a = squeeze3(obj.into_volume().into_ndarray::<f32>()?)?;
        planes.push(a.mapv(|v| u8::from(v > 0.0)));
    }
    let d = planes[0].raw_dim();
    if planes.iter().any(|p| p.raw_dim() != d) {
        return Err(shape("mask channels have different dimensions"));
    }
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let data = ndarray::stack(Axis(0), &views).map_err(|e| shape(e.to_string()))?;
    let ids = manifest.channels.iter().map(|e| e.id).collect();
    MultiChannelMask::new(data, ids, spacing.unwrap_or([1.0; 3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn volume_round_trip_keeps_spacing_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| (x * 100 + y * 10 + z) as f32 - 50.0);
        let v = Volume::new(a.clone(), [0.8, 1.25, 3.0], Modality::CT).unwrap();
        let p = dir.path().join("img.nii.gz");
        write_volume(&p, &v).unwrap();
        let r = read_volume(&p, Modality::CT).unwrap();
        assert_eq!(r.data(), &a);
        for (x, y) in r.spacing().iter().zip([0.8, 1.25, 3.0]) {
            assert!((x - y).abs() < 1e-6);
        }
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(read_volume_bytes(&bytes, Modality::CT).unwrap().data(), &a);
    }

    #[test]
    fn labels_and_probabilities_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = Array3::from_shape_fn((4, 3, 2), |(x, y, _)| ((x + y) % 3) as u16);
        let lm = LabelMap::new(l.clone(), 2, [1.0, 2.0, 3.0]).unwrap();
        let p = dir.path().join("lab.nii.gz");
        write_labels(&p, &lm).unwrap();
        let back = read_labels(&p, None).unwrap();
        assert_eq!(back.data(), &l);
        assert_eq!(back.n_classes(), 2);

        let pr = Array4::from_shape_fn((2, 4, 3, 2), |(c, x, y, z)| {
            ((c + x + y + z) % 5) as f32 / 4.0
        });
        let pm = ProbabilityMap::new(pr.clone(), vec![1, 2], [1.0; 3]).unwrap();
        let pp = dir.path().join("prob.nii.gz");
        write_probabilities(&pp, &pm).unwrap();
        let back = read_probabilities(&pp, vec![1, 2]).unwrap();
        assert_eq!(back.data(), &pr);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Array4::from_shape_fn((3, 4, 4, 2), |(c, x, y, z)| ((c + x * y + z) % 2) as u8);
        let m = MultiChannelMask::new(d, vec![4, 7, 9], [1.5; 3]).unwrap();
        let p = dir.path().join("prompts.json");
        write_mask_manifest(&p, &m).unwrap();
        let back = read_mask_manifest(&p).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = read_volume("/nonexistent/x.nii.gz", Modality::CT).unwrap_err();
        assert!(matches!(e, Error::Io(_)));
    }
}
