//! Synthetic CT phantoms: ellipsoidal organs of known Hounsfield value in a
//! fat-filled body surrounded by air, with Gaussian noise.

use ndarray::Array3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pipeline::PromptRequest;
use crate::rng::seeded;
use crate::text::InstanceLabel;
use crate::volume::{Dims, LabelMap, Modality, Spacing, Volume};

const AIR_HU: f32 = -1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Organ {
    /// Canonical CT class name.
    pub name: String,
    /// Centre in voxels.
    pub center: [f64; 3],
    /// Semi-axes in mm.
    pub radii: [f64; 3],
    pub hu: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub background_hu: f32,
    pub noise_hu: f32,
    pub seed: u64,
    pub organs: Vec<Organ>,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    /// Label `k + 1` is `organs[k]`; later organs overwrite earlier ones.
    pub truth: LabelMap,
    pub prompts: Vec<PromptRequest>,
}

/// Soft-tissue-window intensity back to HU.
pub fn hu_for_intensity(v: f32) -> f32 {
    v * 400.0 / 255.0 - 160.0
}

fn organ(name: &str, center: [f64; 3], radii: [f64; 3], hu: f32) -> Organ {
    Organ { name: name.into(), center, radii, hu }
}

impl PhantomSpec {
    /// Liver, spleen and left kidney in a 64 x 64 x 48 body at 1 mm.
    pub fn bundled() -> Self {
        Self {
            dims: [64, 64, 48],
            spacing: [1.0; 3],
            background_hu: -100.0,
            noise_hu: 15.0,
            seed: 7,
            organs: vec![
                organ("Liver", [20.0, 26.0, 24.0], [13.0, 12.0, 11.0], 60.0),
                organ("Spleen", [46.0, 20.0, 24.0], [8.0, 8.0, 9.0], 110.0),
                organ("Left kidney", [45.0, 44.0, 20.0], [6.0, 7.0, 8.0], 160.0),
            ],
        }
    }

    /// `n` small spheres on a grid, one per toy atlas anatomy class, for the
    /// execution-mode benchmark.
    pub fn bench(n: usize) -> Result<Self> {
        let names: Vec<(&str, f32)> = crate::decoder::toy::CT_ATLAS
            .iter()
            .filter(|(_, l, _)| *l == 0)
            .map(|(n, _, v)| (*n, *v))
            .collect();
        if n == 0 || n > names.len() {
            return Err(invalid(format!("bench phantom supports 1..={} classes", names.len())));
        }
        let organs = names
            .iter()
            .take(n)
            .enumerate()
            .map(|(k, (name, v))| {
                let c = [6.0 + 7.0 * (k % 5) as f64, 6.0 + 7.0 * ((k / 5) % 5) as f64, 8.0 + 8.0 * (k / 25) as f64];
                organ(name, c, [2.5; 3], hu_for_intensity(*v))
            })
            .collect();
        Ok(Self { dims: [40, 40, 24], spacing: [1.0; 3], background_hu: -100.0, noise_hu: 10.0, seed: 11, organs })
    }

    pub fn generate(&self) -> Result<Phantom> {
        if self.organs.len() >= u16::MAX as usize {
            return Err(invalid("too many organs"));
        }
        let [h, w, _] = self.dims;
        let mut labels = Array3::<u16>::zeros(self.dims);
        let mut hu = Array3::<f32>::from_shape_fn(self.dims, |(x, y, _)| {
            // elliptic body cross-section filling ~90% of the slice
            let dx = (x as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            let dy = (y as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            if dx * dx + dy * dy <= 0.95 * 0.95 { self.background_hu } else { AIR_HU }
        });
        for (k, o) in self.organs.iter().enumerate() {
            for ((x, y, z), l) in labels.indexed_iter_mut() {
                let p = [x, y, z];
                let r2: f64 = (0..3)
                    .map(|i| ((p[i] as f64 - o.center[i]) * self.spacing[i] / o.radii[i]).powi(2))
                    .sum();
                if r2 <= 1.0 {
                    *l = k as u16 + 1;
                    hu[[x, y, z]] = o.hu;
                }
            }
        }
        if self.noise_hu > 0.0 {
            let normal = Normal::new(0.0f32, self.noise_hu).map_err(|e| invalid(e.to_string()))?;
            let mut rng = seeded(self.seed);
            hu.mapv_inplace(|v| v + normal.sample(&mut rng));
        }
        let prompts = self
            .organs
            .iter()
            .map(|o| PromptRequest::new(format!("{} in CT", o.name), InstanceLabel::Anatomy))
            .collect();
        Ok(Phantom {
            volume: Volume::new(hu, self.spacing, Modality::CT)?,
            truth: LabelMap::new(labels, self.organs.len(), self.spacing)?,
            prompts,
        })
    }
}

/// Scribbles a user might draw from the truth: each class's mask on the
/// `2 * half + 1` axial slices around its central slice, eroded in-plane by
/// one voxel (4-neighbourhood). Returns `[n, H, W, D]` with 1 on scribbled voxels.
pub fn central_scribbles(truth: &LabelMap, half: usize) -> ndarray::Array4<u8> {
    let n = truth.n_classes();
    let [h, w, d] = truth.dims();
    let lab = truth.data();
    let mut out = ndarray::Array4::<u8>::zeros((n, h, w, d));
    for c in 1..=n as u16 {
        let zs: Vec<usize> = (0..d).filter(|&z| lab.index_axis(ndarray::Axis(2), z).iter().any(|v| *v == c)).collect();
        let Some((&z0, &z1)) = zs.first().zip(zs.last()) else { continue };
        let mid = (z0 + z1) / 2;
        let at = |x: isize, y: isize, z: usize| {
            x >= 0 && y >= 0 && (x as usize) < h && (y as usize) < w && lab[[x as usize, y as usize, z]] == c
        };
        for z in mid.saturating_sub(half)..=(mid + half).min(d - 1) {
            for x in 0..h {
                for y in 0..w {
                    let (xi, yi) = (x as isize, y as isize);
                    if at(xi, yi, z) && at(xi - 1, yi, z) && at(xi + 1, yi, z) && at(xi, yi - 1, z) && at(xi, yi + 1, z) {
                        out[[c as usize - 1, x, y, z]] = 1;
                    }
                }
            }
        }
    }
    out
}
