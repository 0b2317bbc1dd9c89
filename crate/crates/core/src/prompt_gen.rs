//! Block-corruption simulation of coarse spatial prompts from ground truth.
//!
//! Given binary class masks `M (N x H x W x D)`, produce a foreground prompt
//! `S_f` and a per-class prompt `S_p` that look like an imperfect coarse
//! segmentation: whole classes go missing, blocks are dropped (false
//! negatives) and blocks are added (false positives).
//!
//! Draw order from the supplied rng, which fixes outputs for a seed:
//!
//! 1. one uniform draw against `p_zero` (always made);
//! 2. `N` uniform draws against `p_chan_zero`, channel order;
//! 3. if any drop/add maximum is positive: the block index into `B`, then
//!    `p_d` and `p_a` (always both), then one drop draw per grid cell and one
//!    add draw per grid cell (C order), then one channel index per added cell
//!    (C order).

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::volume::{foreground_union, Dims, MultiChannelMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptGenParams {
    pub p_drop_range: [f64; 2],
    pub p_add_range: [f64; 2],
    pub p_chan_zero: f64,
    pub p_zero: f64,
    pub block_sizes: Vec<[usize; 3]>,
    pub seed: u64,
}

impl Default for PromptGenParams {
    fn default() -> Self {
        Self {
            p_drop_range: [0.0, 0.3],
            p_add_range: [0.0, 0.1],
            p_chan_zero: 0.1,
            p_zero: 0.1,
            block_sizes: vec![[4, 4, 4], [8, 8, 8]],
            seed: 0,
        }
    }
}

impl PromptGenParams {
    /// All corruption switched off: the generator returns `M` unchanged.
    pub fn identity() -> Self {
        Self {
            p_drop_range: [0.0, 0.0],
            p_add_range: [0.0, 0.0],
            p_chan_zero: 0.0,
            p_zero: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        for (name, r) in [("p_drop_range", self.p_drop_range), ("p_add_range", self.p_add_range)] {
            if !prob(r[0]) || !prob(r[1]) || r[0] > r[1] {
                return Err(invalid(format!("{name} must satisfy 0 <= min <= max <= 1, got {r:?}")));
            }
        }
        if !prob(self.p_chan_zero) || !prob(self.p_zero) {
            return Err(invalid("p_chan_zero and p_zero must lie in [0, 1]"));
        }
        if self.block_sizes.is_empty() {
            return Err(invalid("block size set is empty"));
        }
        if self.block_sizes.iter().any(|b| b.contains(&0)) {
            return Err(invalid("block dimensions must be >= 1"));
        }
        Ok(())
    }

    fn corrupts(&self) -> bool {
        self.p_drop_range[1] > 0.0 || self.p_add_range[1] > 0.0
    }
}

/// Foreground prompt `S_f (H x W x D)` and class prompt `S_p (N x H x W x D)`,
/// both strictly `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialPromptPair {
    pub s_f: Array3<u8>,
    pub s_p: Array4<u8>,
}

impl SpatialPromptPair {
    pub fn zeros(n: usize, dims: Dims) -> Self {
        Self {
            s_f: Array3::zeros(dims),
            s_p: Array4::zeros((n, dims[0], dims[1], dims[2])),
        }
    }
}

/// Intermediate draws of one generator call.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTrace {
    pub zeroed: bool,
    /// 1 where the channel survived.
    pub channel_keep: Vec<u8>,
    pub block: Option<[usize; 3]>,
    pub p_d: f64,
    pub p_a: f64,
    pub b_drop: Option<Array3<bool>>,
    pub b_add: Option<Array3<bool>>,
    /// One-of-N channel assignment of the added cells.
    pub c_add: Option<Array4<bool>>,
}

/// Bernoulli survival vector: each entry is 0 with probability `p_chan_zero`.
pub fn channel_mask(n: usize, p_chan_zero: f64, rng: &mut Rng) -> Vec<u8> {
    (0..n)
        .map(|_| u8::from(rng.random::<f64>() >= p_chan_zero))
        .collect()
}

pub fn grid_dims(dims: Dims, block: [usize; 3]) -> Dims {
    [0, 1, 2].map(|i| dims[i].div_ceil(block[i]))
}

/// Cell-level drop and add masks; add cells are drawn independently and then
/// cleared wherever a drop occurred, so the two never overlap.
pub fn block_grid_masks(
    dims: Dims,
    block: [usize; 3],
    p_d: f64,
    p_a: f64,
    rng: &mut Rng,
) -> (Array3<bool>, Array3<bool>) {
    let g = grid_dims(dims, block);
    let drop = Array3::from_shape_simple_fn(g, || rng.random::<f64>() < p_d);
    let raw_add = Array3::from_shape_simple_fn(g, || rng.random::<f64>() < p_a);
    let add = ndarray::Zip::from(&raw_add)
        .and(&drop)
        .map_collect(|a, d| *a && !*d);
    (drop, add)
}

/// Nearest-neighbour block replication; edge blocks are truncated to `dims`.
pub fn upsample_block_mask(grid: ArrayView3<bool>, block: [usize; 3], dims: Dims) -> Array3<bool> {
    Array3::from_shape_fn(dims, |(x, y, z)| grid[[x / block[0], y / block[1], z / block[2]]])
}

/// Gives every set cell to exactly one uniformly chosen channel.
pub fn assign_blocks_to_channels(mask: ArrayView3<bool>, n: usize, rng: &mut Rng) -> Array4<bool> {
    let s = mask.shape();
    let mut out = Array4::from_elem((n, s[0], s[1], s[2]), false);
    for ((x, y, z), &set) in mask.indexed_iter() {
        if set {
            let c = rng.random_range(0..n);
            out[[c, x, y, z]] = true;
        }
    }
    out
}

/// Kept cells stay active in every channel.
pub fn broadcast_blocks_to_channels(mask: ArrayView3<bool>, n: usize) -> Array4<bool> {
    mask.insert_axis(Axis(0))
        .broadcast((n, mask.shape()[0], mask.shape()[1], mask.shape()[2]))
        .expect("broadcast over a new leading axis")
        .to_owned()
}

pub fn generate_spatial_prompts(
    m: &MultiChannelMask,
    params: &PromptGenParams,
    rng: &mut Rng,
) -> Result<SpatialPromptPair> {
    generate_spatial_prompts_traced(m.data().view(), params, rng).map(|(p, _)| p)
}

/// Same as [`generate_spatial_prompts`] on a raw `N x H x W x D` array, also
/// returning the intermediate draws.
pub fn generate_spatial_prompts_traced(
    m: ArrayView4<u8>,
    params: &PromptGenParams,
    rng: &mut Rng,
) -> Result<(SpatialPromptPair, PromptTrace)> {
    params.validate()?;
    let sh = m.shape();
    let (n, dims) = (sh[0], [sh[1], sh[2], sh[3]]);
    if n == 0 {
        return Err(invalid("mask has no channels"));
    }
    if m.iter().any(|v| *v > 1) {
        return Err(invalid("mask values must be 0 or 1"));
    }

    let mut trace = PromptTrace {
        zeroed: false,
        channel_keep: Vec::new(),
        block: None,
        p_d: 0.0,
        p_a: 0.0,
        b_drop: None,
        b_add: None,
        c_add: None,
    };

    if rng.random::<f64>() < params.p_zero {
        trace.zeroed = true;
        return Ok((SpatialPromptPair::zeros(n, dims), trace));
    }

    let keep = channel_mask(n, params.p_chan_zero, rng);
    let mut s_p = m.to_owned();
    for (c, k) in keep.iter().enumerate() {
        if *k == 0 {
            s_p.index_axis_mut(Axis(0), c).fill(0);
        }
    }
    trace.channel_keep = keep;
    let mut s_f = foreground_union(s_p.view());

    if params.corrupts() {
        let block = params.block_sizes[rng.random_range(0..params.block_sizes.len())];
        let uniform = |r: [f64; 2], rng: &mut Rng| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        let p_d = uniform(params.p_drop_range, rng);
        let p_a = uniform(params.p_add_range, rng);
        let (b_drop, b_add) = block_grid_masks(dims, block, p_d, p_a, rng);
        let c_add = assign_blocks_to_channels(b_add.view(), n, rng);

        for ((x, y, z), f) in s_f.indexed_iter_mut() {
            let cell = [x / block[0], y / block[1], z / block[2]];
            if b_drop[cell] {
                *f = 0;
            }
            if b_add[cell] {
                *f = 1;
            }
        }
        for ((c, x, y, z), v) in s_p.indexed_iter_mut() {
            let cell = [c, x / block[0], y / block[1], z / block[2]];
            let kept = !b_drop[[cell[1], cell[2], cell[3]]];
            *v = u8::from((*v > 0 && kept) || c_add[cell]);
        }

        trace.block = Some(block);
        trace.p_d = p_d;
        trace.p_a = p_a;
        trace.b_drop = Some(b_drop);
        trace.b_add = Some(b_add);
        trace.c_add = Some(c_add);
    }

    s_f.mapv_inplace(|v| u8::from(v > 0));
    s_p.mapv_inplace(|v| u8::from(v > 0));
    Ok((SpatialPromptPair { s_f, s_p }, trace))
}
