//! Probability-guided connected-component refinement, one class at a time.

use std::collections::VecDeque;

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::{LabelMap, ProbabilityMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = crate::Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            _ => Err(invalid(format!("connectivity must be 6, 18 or 26, got {v}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let nz = (dx != 0) as usize + (dy != 0) as usize + (dz != 0) as usize;
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocParams {
    pub tau: f64,
    pub prob_floor: f64,
    pub size_ratio: f64,
    pub connectivity: Connectivity,
    pub prob_threshold: f32,
    pub background: u16,
}

impl Default for PostprocParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            prob_floor: 0.86,
            size_ratio: 0.6,
            connectivity: Connectivity::Six,
            prob_threshold: 0.5,
            background: 0,
        }
    }
}

impl PostprocParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.tau) || !unit(self.prob_floor) || !unit(self.size_ratio) {
            return Err(invalid("tau, prob_floor and size_ratio must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.prob_threshold) {
            return Err(invalid("prob_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Label `n + 1` for the most probable channel `n` where its probability
/// reaches `threshold`; background elsewhere. Ties go to the lower channel.
pub fn argmax_labelmap(p: &ProbabilityMap, threshold: f32) -> LabelMap {
    let (n, h, w, d) = p.data().dim();
    let mut best = Array3::<f32>::from_elem((h, w, d), f32::NEG_INFINITY);
    let mut labels = Array3::<u16>::zeros((h, w, d));
    for (c, ch) in p.data().outer_iter().enumerate() {
        Zip::from(&mut best).and(&mut labels).and(&ch).for_each(|b, l, &v| {
            if v > *b {
                *b = v;
                *l = c as u16 + 1;
            }
        });
    }
    Zip::from(&mut labels).and(&best).for_each(|l, &b| {
        if b < threshold {
            *l = 0;
        }
    });
    LabelMap::new(labels, n, p.spacing()).expect("labels are within the channel count")
}

/// Component labelling of a binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// 0 for background, `1..=k` for components.
    pub labels: Array3<u32>,
    /// `sizes[i]` is the voxel count of component `i + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Labels components in order of decreasing size; equal sizes are ordered by
/// their first voxel in raster order.
pub fn connected_components(mask: ArrayView3<bool>, connectivity: Connectivity) -> Components {
    let dims = mask.dim();
    let offs = connectivity.offsets();
    let mut raw = Array3::<u32>::zeros(dims);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for (start, &m) in mask.indexed_iter() {
        if !m || raw[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        raw[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some((x, y, z)) = queue.pop_front() {
            size += 1;
            for o in &offs {
                let nx = x as isize + o[0];
                let ny = y as isize + o[1];
                let nz = z as isize + o[2];
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let q = (nx as usize, ny as usize, nz as usize);
                if q.0 >= dims.0 || q.1 >= dims.1 || q.2 >= dims.2 {
                    continue;
                }
                if mask[q] && raw[q] == 0 {
                    raw[q] = id;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    // Discovery order already follows the first voxel, so a stable sort by
    // size gives the documented order.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|a, b| sizes[*b].cmp(&sizes[*a]));
    let mut relabel = vec![0u32; sizes.len() + 1];
    for (new, old) in order.iter().enumerate() {
        relabel[old + 1] = new as u32 + 1;
    }
    let labels = raw.mapv(|v| relabel[v as usize]);
    let sizes = order.iter().map(|o| sizes[*o]).collect();
    Components { labels, sizes }
}

/// Which components of one class survive, given their sizes (descending) and
/// mean probabilities. Returns 0-based component indices.
pub fn select_components(sizes: &[usize], means: &[f64], params: &PostprocParams) -> Vec<usize> {
    let top = sizes.len().min(3);
    if top == 0 {
        return Vec::new();
    }
    let p_max = means[..top].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..top)
        .filter(|&i| p_max - means[i] <= params.tau && means[i] > params.prob_floor)
        .collect();
    if keep.len() >= 2 {
        return keep;
    }
    let mut c_max = 0;
    for i in 1..top {
        if means[i] > means[c_max] {
            c_max = i;
        }
    }
    if c_max < 2 && sizes[c_max] as f64 / sizes[0] as f64 > params.size_ratio {
        vec![c_max]
    } else {
        vec![0]
    }
}

/// Argmax labelling followed by per-class component selection; voxels of
/// dropped components become background.
pub fn refine_segmentation(p: &ProbabilityMap, params: &PostprocParams) -> Result<LabelMap> {
    params.validate()?;
    let base = argmax_labelmap(p, params.prob_threshold);
    let mut s = base.data().clone();
    for (c, prob) in p.data().outer_iter().enumerate() {
        let label = c as u16 + 1;
        let mask = base.data().mapv(|v| v == label);
        let comps = connected_components(mask.view(), params.connectivity);
        if comps.count() == 0 {
            continue;
        }
        let top = comps.count().min(3);
        let mut sums = vec![0.0f64; top];
        Zip::from(&comps.labels).and(&prob).for_each(|&l, &v| {
            if l >= 1 && (l as usize) <= top {
                sums[l as usize - 1] += v as f64;
            }
        });
        let means: Vec<f64> = (0..top).map(|i| sums[i] / comps.sizes[i] as f64).collect();
        let keep = select_components(&comps.sizes[..top], &means, params);
        let mut kept = vec![false; comps.count() + 1];
        for k in keep {
            kept[k + 1] = true;
        }
        Zip::from(&mut s).and(&comps.labels).for_each(|v, &l| {
            if l != 0 && !kept[l as usize] {
                *v = params.background;
            }
        });
    }
    LabelMap::new(s, p.n_channels(), p.spacing())
}
