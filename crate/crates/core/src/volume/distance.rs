//! Exact Euclidean distance transform with anisotropic spacing.
//!
//! One lower-envelope pass per axis (Felzenszwalb & Huttenlocher); each pass
//! works on squared physical distances, so spacing only scales the parabolas.

use ndarray::{Array3, ArrayView3, Axis};

use super::Spacing;

const INF: f64 = f64::INFINITY;

fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let w2 = w * w;
    // Skip leading infinities; parabolas rooted at INF never win.
    let mut k: isize = -1;
    for q in 0..n {
        if f[q] == INF {
            continue;
        }
        let qf = q as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = -INF;
                z[1] = INF;
                break;
            }
            let p = v[k as usize];
            let pf = p as f64;
            let s = ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = INF;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = INF);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[j + 1] < qf {
            j += 1;
        }
        let d = qf - v[j] as f64;
        *o = w2 * d * d + f[v[j]];
    }
}

/// Squared distance in mm² from every voxel to the nearest site (`true`).
/// Infinite everywhere when there are no sites.
pub fn squared_distance_to_sites(sites: ArrayView3<bool>, spacing: Spacing) -> Array3<f64> {
    let mut d = sites.mapv(|s| if s { 0.0 } else { INF });
    for axis in 0..3 {
        let n = d.shape()[axis];
        let mut f = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        for mut lane in d.lanes_mut(Axis(axis)) {
            for (dst, src) in f.iter_mut().zip(lane.iter()) {
                *dst = *src;
            }
            envelope_1d(&f, spacing[axis], &mut out, &mut v, &mut z);
            for (dst, src) in lane.iter_mut().zip(out.iter()) {
                *dst = *src;
            }
        }
    }
    d
}

/// Distance in mm from every voxel to the nearest site.
pub fn distance_to_sites(sites: ArrayView3<bool>, spacing: Spacing) -> Array3<f64> {
    squared_distance_to_sites(sites, spacing).mapv(f64::sqrt)
}
