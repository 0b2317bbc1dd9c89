//! Query-decoder math: channel-wise spatio-textual alignment, refinement and
//! prediction, plus the iterative masked inference loop.
//!
//! The backbone (`F`, `V`, query adaptation) and the refinement convolution
//! are contracts; [`toy`] provides a deterministic analytic implementation.

mod counting;
mod iterative;
mod masking;
pub mod toy;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};

pub use counting::Counting;
pub use iterative::{iterative_infer, IterativeParams};
pub use masking::{n_selected, random_block_mask, BlockMask};
pub use toy::{ToyAtlasEntry, ToyBackbone, ToyConfig};

use crate::error::{invalid, shape, Result};

/// Adapted text embeddings `T`, one row per query (`N x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbeddings(Array2<f32>);

impl QueryEmbeddings {
    pub fn new(t: Array2<f32>) -> Result<Self> {
        if t.nrows() == 0 || t.ncols() == 0 {
            return Err(invalid("query embeddings need at least one row and one column"));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(invalid("query embeddings must be finite"));
        }
        Ok(Self(t))
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }

    pub fn n_queries(&self) -> usize {
        self.0.nrows()
    }

    pub fn channels(&self) -> usize {
        self.0.ncols()
    }

    /// The queries at `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|r| *r >= self.n_queries()) {
            return Err(invalid("query row out of range"));
        }
        Self::new(self.0.select(Axis(0), rows))
    }
}

/// Per-voxel features `F` (`C x H x W x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatures(Array4<f32>);

impl VoxelFeatures {
    pub fn new(f: Array4<f32>) -> Result<Self> {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(invalid("voxel features must be finite"));
        }
        Ok(Self(f))
    }

    pub fn view(&self) -> ArrayView4<'_, f32> {
        self.0.view()
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }
}

/// What the encoder hands to the decoder for one patch.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub features: VoxelFeatures,
    /// Coarse multi-scale features `V` consumed by query adaptation.
    pub multiscale: Array4<f32>,
}

/// Image encoder and query adaptation.
pub trait Backbone: Send + Sync {
    /// Feature width `C`.
    fn channels(&self) -> usize;
    /// Text embedding width `L` expected by [`Backbone::adapt_queries`].
    fn text_dim(&self) -> usize;
    /// `(image patch, S_f) -> (F, V)`.
    fn encode(&self, image: ArrayView3<f32>, s_f: ArrayView3<f32>) -> Result<BackboneOutput>;
    /// `T = Phi_query(V, Z)` with `Z` of shape `N x L`.
    fn adapt_queries(&self, v: ArrayView4<f32>, z: ArrayView2<f32>) -> Result<QueryEmbeddings>;
}

/// The refinement convolution: `[F; F_a]` (2C channels) to `F_r` (C channels).
/// The two halves are passed separately to avoid materialising the concat.
pub trait Refiner: Send + Sync {
    fn refine(&self, f: ArrayView4<f32>, f_a: ArrayView4<f32>) -> Result<Array4<f32>>;
}

fn check_grid(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a[1..] != b[1..] {
        return Err(shape(format!("{what}: grid {:?} vs {:?}", &a[1..], &b[1..])));
    }
    Ok(())
}

/// `F_a[c] = sum_n T[n, c] * S_p[n]`.
pub fn aligned_features(t: &QueryEmbeddings, s_p: ArrayView4<f32>) -> Result<Array4<f32>> {
    let t = t.view();
    if t.nrows() != s_p.shape()[0] {
        return Err(shape(format!(
            "{} queries but {} prompt channels",
            t.nrows(),
            s_p.shape()[0]
        )));
    }
    let (_, h, w, d) = s_p.dim();
    let mut out = Array4::<f32>::zeros((t.ncols(), h, w, d));
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        for (n, s) in s_p.outer_iter().enumerate() {
            let k = t[[n, c]];
            if k == 0.0 {
                continue;
            }
            Zip::from(&mut plane).and(&s).for_each(|o, &v| *o += k * v);
        }
    }
    Ok(out)
}

pub(crate) const P_MIN: f32 = 1e-7;
pub(crate) const P_MAX: f32 = 1.0 - 1e-7;

/// Logistic function kept strictly inside `(0, 1)` in `f32`.
pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-x).exp())).clamp(P_MIN, P_MAX)
}

/// `P[n] = sigmoid(sum_c T[n, c] * F_r[c])`.
pub fn predict(t: &QueryEmbeddings, f_r: ArrayView4<f32>) -> Result<Array4<f32>> {
    let t = t.view();
    if t.ncols() != f_r.shape()[0] {
        return Err(shape(format!(
            "queries have {} channels, features {}",
            t.ncols(),
            f_r.shape()[0]
        )));
    }
    let (_, h, w, d) = f_r.dim();
    let mut out = Array4::<f32>::zeros((t.nrows(), h, w, d));
    for (n, mut plane) in out.outer_iter_mut().enumerate() {
        for (c, f) in f_r.outer_iter().enumerate() {
            let k = t[[n, c]];
            if k == 0.0 {
                continue;
            }
            Zip::from(&mut plane).and(&f).for_each(|o, &v| *o += k * v);
        }
        plane.mapv_inplace(sigmoid);
    }
    Ok(out)
}

/// The full decoder head on an unmasked prompt.
pub fn forward(
    t: &QueryEmbeddings,
    f: &VoxelFeatures,
    prompt: ArrayView4<f32>,
    refiner: &dyn Refiner,
) -> Result<Array4<f32>> {
    check_grid(f.0.shape(), prompt.shape(), "features vs prompt")?;
    let f_a = aligned_features(t, prompt)?;
    let f_r = refiner.refine(f.view(), f_a.view())?;
    if f_r.shape() != f.0.shape() {
        return Err(shape(format!(
            "refiner returned {:?}, expected {:?}",
            f_r.shape(),
            f.0.shape()
        )));
    }
    predict(t, f_r.view())
}

/// The decoder head with the prompt multiplied by `mask` before alignment.
pub fn masked_forward(
    t: &QueryEmbeddings,
    f: &VoxelFeatures,
    prompt: ArrayView4<f32>,
    mask: ArrayView3<u8>,
    refiner: &dyn Refiner,
) -> Result<Array4<f32>> {
    if prompt.shape()[1..] != *mask.shape() {
        return Err(shape("prompt and mask grids differ"));
    }
    let mut masked = prompt.to_owned();
    for mut ch in masked.outer_iter_mut() {
        Zip::from(&mut ch).and(&mask).for_each(|p, &m| {
            if m == 0 {
                *p = 0.0;
            }
        });
    }
    forward(t, f, masked.view(), refiner)
}

/// Binary foreground channel used as the extra backbone input: voxels where
/// any prompt channel reaches 0.5. Binary prompts give the plain union.
pub fn foreground_prompt(s_p: ArrayView4<f32>) -> Array3<f32> {
    let (_, h, w, d) = s_p.dim();
    let mut out = Array3::<f32>::zeros((h, w, d));
    for ch in s_p.outer_iter() {
        Zip::from(&mut out).and(&ch).for_each(|o, &v| {
            if v >= 0.5 {
                *o = 1.0;
            }
        });
    }
    out
}
