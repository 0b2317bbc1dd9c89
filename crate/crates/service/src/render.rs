//! PNG slice rendering: grayscale image with an optional colour overlay.

use std::str::FromStr;

use medalseg_core::pipeline::ClassEntry;
use medalseg_core::{Dims, LabelMap, ProbabilityMap};
use ndarray::Array3;

use crate::error::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overlay {
    None,
    Labels,
    /// Probability of one class, by class id.
    Prob(u32),
}

impl FromStr for Overlay {
    type Err = ApiError;
    fn from_str(s: &str) -> Result<Self, ApiError> {
        match s {
            "none" => Ok(Overlay::None),
            "labels" => Ok(Overlay::Labels),
            _ => s
                .strip_prefix("prob:")
                .and_then(|id| id.parse().ok())
                .map(Overlay::Prob)
                .ok_or_else(|| ApiError::unprocessable(format!("unknown overlay {s:?}"))),
        }
    }
}

/// A 2-D slice through a volume: rows run along the first remaining axis,
/// columns along the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlicePlane {
    pub axis: usize,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    row_axis: usize,
    col_axis: usize,
}

impl SlicePlane {
    pub fn new(dims: Dims, axis: usize, index: usize) -> Result<Self, ApiError> {
        if axis > 2 {
            return Err(ApiError::unprocessable(format!("axis must be 0, 1 or 2, got {axis}")));
        }
        if index >= dims[axis] {
            return Err(ApiError::unprocessable(format!(
                "index {index} outside axis {axis} of length {}",
                dims[axis]
            )));
        }
        let (row_axis, col_axis) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        Ok(Self { axis, index, rows: dims[row_axis], cols: dims[col_axis], row_axis, col_axis })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxel of pixel `k` in row-major order.
    pub fn voxel(&self, k: usize) -> [usize; 3] {
        let mut p = [0; 3];
        p[self.axis] = self.index;
        p[self.row_axis] = k / self.cols;
        p[self.col_axis] = k % self.cols;
        p
    }
}

/// Stable colour for a class id.
pub fn class_color(class_id: u32) -> [u8; 3] {
    let mut h = u64::from(class_id).wrapping_add(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    let b = h.to_le_bytes();
    // keep every channel away from black so overlays stay visible
    [96 + b[0] % 160, 96 + b[1] % 160, 96 + b[2] % 160]
}

pub struct SliceSources<'a> {
    /// Display intensities in `[0, 255]`.
    pub gray: &'a Array3<f32>,
    pub labels: Option<&'a LabelMap>,
    pub probabilities: Option<&'a ProbabilityMap>,
    pub classes: &'a [ClassEntry],
}

const LABEL_ALPHA: f32 = 0.5;

fn blend(base: f32, color: u8, alpha: f32) -> u8 {
    (base * (1.0 - alpha) + f32::from(color) * alpha).round().clamp(0.0, 255.0) as u8
}

/// RGB pixels of one slice, row-major.
pub fn render_rgb(src: &SliceSources<'_>, plane: &SlicePlane, overlay: Overlay) -> Result<Vec<u8>, ApiError> {
    let channel = match overlay {
        Overlay::Prob(id) => {
            let k = src
                .classes
                .iter()
                .position(|c| c.class_id == id)
                .ok_or_else(|| ApiError::unprocessable(format!("class {id} is not in this session's manifest")))?;
            if src.probabilities.is_none() {
                return Err(ApiError::unprocessable("no probabilities yet; run segment first"));
            }
            Some((k, class_color(id)))
        }
        Overlay::Labels if src.labels.is_none() => {
            return Err(ApiError::unprocessable("no labels yet; run segment first"));
        }
        _ => None,
    };
    let colors: Vec<[u8; 3]> = src.classes.iter().map(|c| class_color(c.class_id)).collect();
    let mut out = Vec::with_capacity(plane.len() * 3);
    for k in 0..plane.len() {
        let p = plane.voxel(k);
        let g = src.gray[p].clamp(0.0, 255.0);
        let (color, alpha) = match (overlay, channel) {
            (Overlay::Labels, _) => {
                let l = src.labels.map_or(0, |l| l.data()[p]) as usize;
                match colors.get(l.wrapping_sub(1)) {
                    Some(c) if l > 0 => (*c, LABEL_ALPHA),
                    _ => ([0; 3], 0.0),
                }
            }
            (Overlay::Prob(_), Some((ch, c))) => {
                let pr = src.probabilities.map_or(0.0, |m| m.data()[[ch, p[0], p[1], p[2]]]);
                (c, 0.6 * pr.clamp(0.0, 1.0))
            }
            _ => ([0; 3], 0.0),
        };
        out.extend(color.iter().map(|&c| blend(g, c, alpha)));
    }
    Ok(out)
}

pub fn encode_png(rgb: &[u8], rows: usize, cols: usize) -> Result<Vec<u8>, ApiError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, cols as u32, rows as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| ApiError::internal(e.to_string()))?;
        w.write_image_data(rgb).map_err(|e| ApiError::internal(e.to_string()))?;
    }
    Ok(buf)
}

pub fn render_png(src: &SliceSources<'_>, plane: &SlicePlane, overlay: Overlay) -> Result<Vec<u8>, ApiError> {
    encode_png(&render_rgb(src, plane, overlay)?, plane.rows, plane.cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_geometry() {
        let p = SlicePlane::new([4, 5, 6], 2, 3).unwrap();
        assert_eq!((p.rows, p.cols), (4, 5));
        assert_eq!(p.voxel(7), [1, 2, 3]);
        let p = SlicePlane::new([4, 5, 6], 0, 1).unwrap();
        assert_eq!((p.rows, p.cols), (5, 6));
        assert_eq!(p.voxel(7), [1, 1, 1]);
        assert!(SlicePlane::new([4, 5, 6], 1, 5).is_err());
        assert!(SlicePlane::new([4, 5, 6], 3, 0).is_err());
    }

    #[test]
    fn overlay_names() {
        assert_eq!("labels".parse::<Overlay>().unwrap(), Overlay::Labels);
        assert_eq!("prob:3".parse::<Overlay>().unwrap(), Overlay::Prob(3));
        assert!("prob:x".parse::<Overlay>().is_err());
    }

    #[test]
    fn colours_are_stable_and_visible() {
        assert_eq!(class_color(5), class_color(5));
        assert_ne!(class_color(5), class_color(6));
        assert!((0..100).all(|i| class_color(i).iter().all(|c| *c >= 96)));
    }

    #[test]
    fn png_has_slice_dims() {
        let gray = Array3::from_elem((3, 4, 2), 100.0f32);
        let src = SliceSources { gray: &gray, labels: None, probabilities: None, classes: &[] };
        let plane = SlicePlane::new([3, 4, 2], 2, 1).unwrap();
        let png = render_png(&src, &plane, Overlay::None).unwrap();
        let dec = png::Decoder::new(std::io::Cursor::new(png)).read_info().unwrap();
        assert_eq!((dec.info().height, dec.info().width), (3, 4));
        assert!(render_png(&src, &plane, Overlay::Labels).is_err());
    }
}
