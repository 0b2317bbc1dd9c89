use std::collections::BTreeMap;

use ndarray::{ArrayView3, Zip};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMeasure {
    #[default]
    Dsc,
    Iou,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    /// Pairs taken in descending overlap order while both sides are free.
    Greedy,
    /// Most true positives, then largest summed overlap.
    #[default]
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceParams {
    pub threshold: f64,
    pub measure: OverlapMeasure,
    pub matching: Matching,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self { threshold: 0.5, measure: OverlapMeasure::Dsc, matching: Matching::Optimal }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    pub dsc_tp: f64,
    /// Matched (gt id, pred id) pairs.
    #[serde(skip)]
    pub pairs: Vec<(u32, u32)>,
}

/// Candidate pairs whose overlap clears the threshold, as
/// `(gt, pred, overlap, dsc)` with ids starting at 1.
pub fn candidate_pairs(
    gt: ArrayView3<u32>,
    pred: ArrayView3<u32>,
    params: &InstanceParams,
) -> (usize, usize, Vec<(u32, u32, f64, f64)>) {
    assert_eq!(gt.shape(), pred.shape(), "instance maps must share a grid");
    let mut gsize: BTreeMap<u32, usize> = BTreeMap::new();
    let mut psize: BTreeMap<u32, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    Zip::from(&gt).and(&pred).for_each(|&g, &p| {
        if g > 0 {
            *gsize.entry(g).or_default() += 1;
        }
        if p > 0 {
            *psize.entry(p).or_default() += 1;
        }
        if g > 0 && p > 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    });
    let pairs = inter
        .into_iter()
        .filter_map(|((g, p), i)| {
            let (a, b, i) = (gsize[&g] as f64, psize[&p] as f64, i as f64);
            let dsc = 2.0 * i / (a + b);
            let overlap = match params.measure {
                OverlapMeasure::Dsc => dsc,
                OverlapMeasure::Iou => i / (a + b - i),
            };
            (overlap > params.threshold).then_some((g, p, overlap, dsc))
        })
        .collect();
    (gsize.len(), psize.len(), pairs)
}

/// Instance-level F1 and mean DSC of the true-positive matches.
pub fn instance_f1_dsctp(gt: ArrayView3<u32>, pred: ArrayView3<u32>, params: &InstanceParams) -> InstanceScore {
    let (n_gt, n_pred, cands) = candidate_pairs(gt, pred, params);
    let chosen = match params.matching {
        Matching::Greedy => greedy(&cands),
        Matching::Optimal => optimal(&cands),
    };
    score(n_gt, n_pred, &cands, &chosen)
}

pub(crate) fn score(n_gt: usize, n_pred: usize, cands: &[(u32, u32, f64, f64)], chosen: &[usize]) -> InstanceScore {
    let tp = chosen.len();
    let (fp, fn_) = (n_pred - tp, n_gt - tp);
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    let dsc_tp = if tp == 0 { 0.0 } else { chosen.iter().map(|&k| cands[k].3).sum::<f64>() / tp as f64 };
    let mut pairs: Vec<(u32, u32)> = chosen.iter().map(|&k| (cands[k].0, cands[k].1)).collect();
    pairs.sort_unstable();
    InstanceScore { tp, fp, fn_, f1, dsc_tp, pairs }
}

fn greedy(cands: &[(u32, u32, f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].2.total_cmp(&cands[a].2).then((cands[a].0, cands[a].1).cmp(&(cands[b].0, cands[b].1))));
    let mut used_g = std::collections::BTreeSet::new();
    let mut used_p = std::collections::BTreeSet::new();
    order
        .into_iter()
        .filter(|&k| {
            let (g, p, ..) = cands[k];
            if used_g.contains(&g) || used_p.contains(&p) {
                return false;
            }
            used_g.insert(g);
            used_p.insert(p);
            true
        })
        .collect()
}

/// Maximum-weight assignment with weight `big + overlap` per candidate pair,
/// `big` larger than any possible match count, so cardinality wins first.
fn optimal(cands: &[(u32, u32, f64, f64)]) -> Vec<usize> {
    if cands.is_empty() {
        return Vec::new();
    }
    let gs: Vec<u32> = cands.iter().map(|c| c.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let ps: Vec<u32> = cands.iter().map(|c| c.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let transpose = gs.len() > ps.len();
    let (rows, cols) = if transpose { (ps.len(), gs.len()) } else { (gs.len(), ps.len()) };
    let big = (rows + 1) as f64;
    let mut cost = vec![vec![0.0f64; cols]; rows];
    let mut which = vec![vec![usize::MAX; cols]; rows];
    for (k, c) in cands.iter().enumerate() {
        let gi = gs.binary_search(&c.0).unwrap();
        let pi = ps.binary_search(&c.1).unwrap();
        let (r, col) = if transpose { (pi, gi) } else { (gi, pi) };
        cost[r][col] = -(big + c.2);
        which[r][col] = k;
    }
    let assign = hungarian(&cost);
    let mut out: Vec<usize> = assign
        .into_iter()
        .enumerate()
        .filter_map(|(r, col)| (which[r][col] != usize::MAX).then_some(which[r][col]))
        .collect();
    out.sort_unstable();
    out
}

/// Minimum-cost assignment of every row to a distinct column, `rows <= cols`.
/// Shortest augmenting path with potentials.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}
