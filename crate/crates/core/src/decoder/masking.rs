use ndarray::Array3;
use rand::seq::index::sample;

use crate::rng::Rng;
use crate::volume::Dims;

/// Complementary full-resolution block masks, `m + m_c = 1` everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    pub block: usize,
    pub m: Array3<u8>,
    pub m_c: Array3<u8>,
}

/// Cells to select on a grid of `cells` blocks: half, rounded down, at least one.
pub fn n_selected(cells: usize) -> usize {
    (cells / 2).max(1)
}

/// Selects `n_selected` of the `ceil(dims / b)` cells uniformly without
/// replacement and upsamples the cell grid to `dims`.
pub fn random_block_mask(dims: Dims, b: usize, rng: &mut Rng) -> BlockMask {
    assert!(b > 0, "block size must be positive");
    let g = dims.map(|d| d.div_ceil(b));
    let cells = g[0] * g[1] * g[2];
    let mut chosen = vec![false; cells];
    for i in sample(rng, cells, n_selected(cells)) {
        chosen[i] = true;
    }
    let m = Array3::from_shape_fn(dims, |(x, y, z)| {
        u8::from(chosen[((x / b) * g[1] + y / b) * g[2] + z / b])
    });
    let m_c = m.mapv(|v| 1 - v);
    BlockMask { block: b, m, m_c }
}
