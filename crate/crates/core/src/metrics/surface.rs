use ndarray::{Array3, ArrayView3, Zip};

use crate::volume::{squared_distance_to_sites, Spacing};

/// Mask voxels with at least one face neighbour outside the mask. Neighbours
/// beyond the grid count as outside.
pub fn boundary(mask: ArrayView3<bool>) -> Array3<bool> {
    let (h, w, d) = mask.dim();
    Array3::from_shape_fn((h, w, d), |(x, y, z)| {
        if !mask[[x, y, z]] {
            return false;
        }
        let out = |i: usize, n: usize, step: isize| {
            let j = i as isize + step;
            j < 0 || j >= n as isize
        };
        out(x, h, -1)
            || out(x, h, 1)
            || out(y, w, -1)
            || out(y, w, 1)
            || out(z, d, -1)
            || out(z, d, 1)
            || !mask[[x - 1, y, z]]
            || !mask[[x + 1, y, z]]
            || !mask[[x, y - 1, z]]
            || !mask[[x, y + 1, z]]
            || !mask[[x, y, z - 1]]
            || !mask[[x, y, z + 1]]
    })
}

/// Normalized surface distance: the share of both boundaries lying within
/// `tolerance` mm of the other boundary. Two empty masks score 1, one empty
/// mask scores 0.
pub fn nsd(a: ArrayView3<bool>, b: ArrayView3<bool>, spacing: Spacing, tolerance: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "nsd needs masks on the same grid");
    let ba = boundary(a);
    let bb = boundary(b);
    let na = ba.iter().filter(|v| **v).count();
    let nb = bb.iter().filter(|v| **v).count();
    match (na, nb) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let tol2 = tolerance * tolerance;
    let within = |from: &Array3<bool>, to: &Array3<bool>| {
        let d2 = squared_distance_to_sites(to.view(), spacing);
        let mut n = 0usize;
        Zip::from(from).and(&d2).for_each(|&f, &d| n += (f && d <= tol2 + 1e-9) as usize);
        n
    };
    (within(&ba, &bb) + within(&bb, &ba)) as f64 / (na + nb) as f64
}
