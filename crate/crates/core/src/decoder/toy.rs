//! A deterministic, prompt-aware stand-in for the trained encoder and decoder.
//!
//! Channels `0..K` are one per atlas class: a Gaussian match between the
//! voxel intensity and the class's expected intensity. The last seven are
//! shared: constant one, smoothed intensity, three patch coordinates, `S_f`
//! and the clipped distance to `S_f`.
//!
//! Query adaptation projects each text embedding onto the atlas embeddings
//! (a frozen `K x L` matrix) and routes it to the best slot. The refiner is a
//! 3x3x3 mean filter applied channel by channel, plus a wider mean of the
//! aligned prompt on slot channels, wide enough to reach into a hidden mask
//! block from its visible neighbours. Because every query owns one slot and the refiner
//! never mixes channels, a class's output depends only on its own prompt.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneOutput, QueryEmbeddings, Refiner, VoxelFeatures};
use crate::error::{invalid, shape, Error, Result};
use crate::text::{InstanceLabel, ResolvedPrompt, TextEncoder, ToyTextEncoder};
use crate::volume::{squared_distance_to_sites, Modality};

pub const SHARED_CHANNELS: usize = 7;
const SIDECAR_MAGIC: &[u8; 8] = b"MEDALTOY";
const DIST_CLIP: f32 = 16.0;
const POOL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyAtlasEntry {
    pub modality: Modality,
    pub instance_label: InstanceLabel,
    pub class_id: u32,
    pub name: String,
    /// Expected intensity on the normalized `[0, 255]` scale.
    pub intensity: f32,
    pub width: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Seed of the text encoder whose embeddings the atlas is matched against.
    pub seed: u64,
    pub text_dim: usize,
    /// Query weight on the slot channel.
    pub gain: f32,
    /// Query weight on the constant channel.
    pub bias: f32,
    /// Logit added by a fully-on prompt after smoothing.
    pub prompt_gain: f32,
    /// Minimum cosine between a query and an atlas embedding.
    pub match_threshold: f32,
    /// Half-width of the box filter on the prompt path.
    #[serde(default = "default_prompt_radius")]
    pub prompt_radius: usize,
    pub atlas: Vec<ToyAtlasEntry>,
}

/// CT classes of the bundled mapping with their expected soft-tissue-window
/// intensities.
pub const CT_ATLAS: &[(&str, u8, f32)] = &[
    ("Liver", 0, 140.0),
    ("Spleen", 0, 172.0),
    ("Kidney", 0, 217.0),
    ("Left kidney", 0, 217.0),
    ("Right kidney", 0, 217.0),
    ("Pancreas", 0, 120.0),
    ("Stomach", 0, 100.0),
    ("Gallbladder", 0, 90.0),
    ("Esophagus", 0, 110.0),
    ("Duodenum", 0, 105.0),
    ("Left adrenal gland", 0, 125.0),
    ("Right adrenal gland", 0, 125.0),
    ("Aorta", 0, 232.0),
    ("Inferior vena cava", 0, 200.0),
    ("Portal vein and splenic vein", 0, 208.0),
    ("Urinary bladder", 0, 95.0),
    ("Prostate", 0, 130.0),
    ("Heart", 0, 152.0),
    ("Left lung", 0, 6.0),
    ("Right lung", 0, 6.0),
    ("Trachea", 0, 2.0),
    ("Brain", 0, 135.0),
    ("Brainstem", 0, 138.0),
    ("Spinal cord", 0, 145.0),
    ("Colon", 0, 80.0),
    ("Small bowel", 0, 115.0),
    ("Sacrum", 0, 250.0),
    ("Thyroid gland", 0, 190.0),
    ("Left femur", 0, 250.0),
    ("Right femur", 0, 250.0),
    ("Liver lesions", 1, 100.0),
    ("Kidney tumors", 1, 160.0),
    ("Lung nodules", 1, 150.0),
    ("Pancreas tumors", 1, 110.0),
    ("Lymph nodes", 1, 128.0),
];

fn default_prompt_radius() -> usize {
    4
}

impl ToyConfig {
    /// The CT atlas resolved against the bundled class mapping.
    pub fn bundled(seed: u64) -> Self {
        let classes = crate::text::PromptResolver::bundled();
        let atlas = CT_ATLAS
            .iter()
            .map(|(name, label, intensity)| {
                let label = InstanceLabel::try_from(*label).unwrap();
                let class_id = classes
                    .classes()
                    .id(Modality::CT, label, name)
                    .unwrap_or_else(|| panic!("atlas class {name} missing from bundled mapping"));
                ToyAtlasEntry {
                    modality: Modality::CT,
                    instance_label: label,
                    class_id,
                    name: name.to_string(),
                    intensity: *intensity,
                    width: 12.0,
                }
            })
            .collect();
        Self {
            seed,
            text_dim: crate::text::DEFAULT_EMBED_DIM,
            gain: 8.0,
            bias: -4.0,
            prompt_gain: 6.0,
            match_threshold: 0.999,
            prompt_radius: default_prompt_radius(),
            atlas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.atlas.is_empty() || self.text_dim == 0 {
            return Err(invalid("toy backbone needs a non-empty atlas and text width"));
        }
        if !(self.gain > 0.0) || self.prompt_gain < 0.0 {
            return Err(invalid("toy gains must be positive"));
        }
        if self.atlas.iter().any(|e| !(e.width > 0.0)) {
            return Err(invalid("atlas widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    config: ToyConfig,
    /// Unit-norm atlas embeddings, `K x L`.
    projection: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
struct SidecarHeader {
    seed: u64,
    dims: [usize; 2],
    channels: usize,
    text_dim: usize,
    config: ToyConfig,
}

impl ToyBackbone {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let enc = ToyTextEncoder::new(config.seed, config.text_dim);
        let mut projection = Array2::<f32>::zeros((config.atlas.len(), config.text_dim));
        for (mut row, e) in projection.outer_iter_mut().zip(&config.atlas) {
            let p = ResolvedPrompt {
                sentence: e.name.clone(),
                instance_label: e.instance_label,
                modality: e.modality,
                class_id: e.class_id,
                canonical_name: e.name.clone(),
            };
            row.assign(&ndarray::ArrayView1::from(&enc.encode(&p)));
        }
        Ok(Self { config, projection })
    }

    pub fn bundled(seed: u64) -> Self {
        Self::new(ToyConfig::bundled(seed)).expect("bundled toy config is valid")
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn slots(&self) -> usize {
        self.config.atlas.len()
    }

    /// Index of the constant channel.
    pub fn bias_channel(&self) -> usize {
        self.slots()
    }

    /// Atlas slot a text embedding is routed to, if any.
    pub fn slot_of(&self, z: &[f32]) -> Option<usize> {
        let zn = z.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if zn == 0.0 {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        for (k, row) in self.projection.outer_iter().enumerate() {
            let s = row.iter().zip(z).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / zn;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        best.filter(|(_, s)| *s >= self.config.match_threshold as f64).map(|(k, _)| k)
    }

    pub fn save_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = SidecarHeader {
            seed: self.config.seed,
            dims: [self.projection.nrows(), self.projection.ncols()],
            channels: self.channels(),
            text_dim: self.config.text_dim,
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(SIDECAR_MAGIC)?;
        f.write_all(&(json.len() as u32).to_le_bytes())?;
        f.write_all(&json)?;
        for v in self.projection.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Self> {
        let bad = |m: &str| Error::Model(format!("toy sidecar: {m}"));
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != SIDECAR_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: SidecarHeader = serde_json::from_slice(body)?;
        header.config.validate()?;
        let [k, l] = header.dims;
        if k != header.config.atlas.len() || l != header.text_dim || header.text_dim != header.config.text_dim {
            return Err(bad("header dimensions disagree"));
        }
        let payload = &bytes[12 + hlen..];
        if payload.len() != k * l * 4 {
            return Err(bad("payload size does not match dims"));
        }
        let vals = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let projection = Array2::from_shape_vec((k, l), vals).map_err(|e| bad(&e.to_string()))?;
        Ok(Self { config: header.config, projection })
    }
}

/// Mean over the in-bounds part of each voxel's 3x3x3 neighbourhood.
pub fn box_mean3(a: ArrayView3<f32>) -> Array3<f32> {
    box_mean(a, 1)
}

/// Mean over the in-bounds part of each voxel's `(2r+1)^3` neighbourhood,
/// separable, with running sums along each axis.
pub fn box_mean(a: ArrayView3<f32>, r: usize) -> Array3<f32> {
    let mut out = a.to_owned();
    if r == 0 {
        return out;
    }
    let mut prefix = Vec::new();
    for ax in 0..3 {
        let n = out.shape()[ax];
        if n == 1 {
            continue;
        }
        for mut lane in out.lanes_mut(Axis(ax)) {
            prefix.clear();
            prefix.push(0.0f64);
            let mut acc = 0.0f64;
            for v in lane.iter() {
                acc += *v as f64;
                prefix.push(acc);
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                lane[i] = ((prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64) as f32;
            }
        }
    }
    out
}

fn coord(i: usize, n: usize) -> f32 {
    if n > 1 {
        i as f32 / (n - 1) as f32
    } else {
        0.0
    }
}

impl Backbone for ToyBackbone {
    fn channels(&self) -> usize {
        self.slots() + SHARED_CHANNELS
    }

    fn text_dim(&self) -> usize {
        self.config.text_dim
    }

    fn encode(&self, image: ArrayView3<f32>, s_f: ArrayView3<f32>) -> Result<BackboneOutput> {
        if image.shape() != s_f.shape() {
            return Err(shape("image and foreground prompt grids differ"));
        }
        let (h, w, d) = image.dim();
        let k = self.slots();
        let smooth = box_mean3(image);
        let mut f = Array4::<f32>::zeros((self.channels(), h, w, d));
        for (e, mut ch) in self.config.atlas.iter().zip(f.outer_iter_mut()) {
            let inv = 1.0 / (2.0 * e.width * e.width);
            Zip::from(&mut ch).and(&image).for_each(|o, &v| {
                let dv = v - e.intensity;
                *o = (-dv * dv * inv).exp();
            });
        }
        f.index_axis_mut(Axis(0), k).fill(1.0);
        f.index_axis_mut(Axis(0), k + 1).assign(&smooth.mapv(|v| v / 255.0));
        for ((x, _, _), v) in f.index_axis_mut(Axis(0), k + 2).indexed_iter_mut() {
            *v = coord(x, h);
        }
        for ((_, y, _), v) in f.index_axis_mut(Axis(0), k + 3).indexed_iter_mut() {
            *v = coord(y, w);
        }
        for ((_, _, z), v) in f.index_axis_mut(Axis(0), k + 4).indexed_iter_mut() {
            *v = coord(z, d);
        }
        f.index_axis_mut(Axis(0), k + 5).assign(&s_f);
        let sites = s_f.mapv(|v| v > 0.0);
        let dist = squared_distance_to_sites(sites.view(), [1.0; 3]);
        Zip::from(f.index_axis_mut(Axis(0), k + 6))
            .and(&dist)
            .for_each(|o, &d2| *o = ((d2.sqrt() as f32) / DIST_CLIP).min(1.0));

        let g = [h.div_ceil(POOL), w.div_ceil(POOL), d.div_ceil(POOL)];
        let mut sum = Array3::<f32>::zeros(g);
        let mut cnt = Array3::<f32>::zeros(g);
        for ((x, y, z), v) in smooth.indexed_iter() {
            let c = [x / POOL, y / POOL, z / POOL];
            sum[c] += v / 255.0;
            cnt[c] += 1.0;
        }
        let multiscale = (sum / cnt).insert_axis(Axis(0));
        Ok(BackboneOutput {
            features: VoxelFeatures::new(f)?,
            multiscale,
        })
    }

    fn adapt_queries(&self, v: ArrayView4<f32>, z: ArrayView2<f32>) -> Result<QueryEmbeddings> {
        if v.is_empty() {
            return Err(shape("empty multi-scale features"));
        }
        if z.ncols() != self.config.text_dim {
            return Err(shape(format!(
                "text embeddings have width {}, expected {}",
                z.ncols(),
                self.config.text_dim
            )));
        }
        let mut t = Array2::<f32>::zeros((z.nrows(), self.channels()));
        for (mut row, zr) in t.outer_iter_mut().zip(z.outer_iter()) {
            let zr: Vec<f32> = zr.iter().copied().collect();
            if let Some(k) = self.slot_of(&zr) {
                row[k] = self.config.gain;
            }
            row[self.bias_channel()] = self.config.bias;
        }
        QueryEmbeddings::new(t)
    }
}

impl Refiner for ToyBackbone {
    fn refine(&self, f: ArrayView4<f32>, f_a: ArrayView4<f32>) -> Result<Array4<f32>> {
        if f.shape() != f_a.shape() || f.shape()[0] != self.channels() {
            return Err(shape(format!(
                "refiner expects two {}-channel halves, got {:?} and {:?}",
                self.channels(),
                f.shape(),
                f_a.shape()
            )));
        }
        let w = self.config.prompt_gain / (self.config.gain * self.config.gain);
        let mut out = Array4::<f32>::zeros(f.raw_dim());
        for (c, mut o) in out.outer_iter_mut().enumerate() {
            o.assign(&box_mean3(f.index_axis(Axis(0), c)));
            let a = f_a.index_axis(Axis(0), c);
            if c < self.slots() && w > 0.0 && a.iter().any(|v| *v != 0.0) {
                let sa = box_mean(a, self.config.prompt_radius);
                Zip::from(&mut o).and(&sa).for_each(|o, &s| *o += w * s);
            }
        }
        Ok(out)
    }
}
