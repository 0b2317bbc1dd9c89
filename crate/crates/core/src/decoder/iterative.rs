use ndarray::{Array4, ArrayView4, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{forward, masked_forward, random_block_mask, QueryEmbeddings, Refiner, VoxelFeatures};
use crate::error::{invalid, shape, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterativeParams {
    pub iterations: usize,
    pub rounds: usize,
    pub block_sizes: Vec<usize>,
}

impl Default for IterativeParams {
    fn default() -> Self {
        Self {
            iterations: 2,
            rounds: 1,
            block_sizes: vec![4, 8],
        }
    }
}

impl IterativeParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.rounds == 0 {
            return Err(invalid("iterations and rounds must be at least 1"));
        }
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(invalid("block sizes must be a non-empty list of positive sizes"));
        }
        Ok(())
    }

    /// Decoder-head evaluations per call of [`iterative_infer`].
    pub fn head_calls(&self) -> usize {
        self.iterations * (1 + 2 * self.rounds)
    }
}

/// Iterative masked decoding.
///
/// Each iteration predicts from the current prompt, takes that prediction as
/// the next prompt, then replaces the output with the average over `rounds`
/// complementary-mask composites: the prediction made with a block hidden is
/// the one kept inside that block.
pub fn iterative_infer(
    f: &VoxelFeatures,
    t: &QueryEmbeddings,
    s_p_init: ArrayView4<f32>,
    params: &IterativeParams,
    refiner: &dyn Refiner,
    rng: &mut Rng,
) -> Result<Array4<f32>> {
    params.validate()?;
    let fs = f.view();
    if s_p_init.shape()[1..] != fs.shape()[1..] || s_p_init.shape()[0] != t.n_queries() {
        return Err(shape(format!(
            "prompt {:?} does not fit {} queries on grid {:?}",
            s_p_init.shape(),
            t.n_queries(),
            &fs.shape()[1..]
        )));
    }
    let dims = [fs.shape()[1], fs.shape()[2], fs.shape()[3]];
    let mut s_p = s_p_init.to_owned();
    let mut out = Array4::<f32>::zeros(s_p.raw_dim());
    for _ in 0..params.iterations {
        let p = forward(t, f, s_p.view(), refiner)?;
        let mut sum = Array4::<f32>::zeros(p.raw_dim());
        for _ in 0..params.rounds {
            let b = params.block_sizes[rng.random_range(0..params.block_sizes.len())];
            let bm = random_block_mask(dims, b, rng);
            let p1 = masked_forward(t, f, p.view(), bm.m.view(), refiner)?;
            let p2 = masked_forward(t, f, p.view(), bm.m_c.view(), refiner)?;
            for ((mut acc, a), c) in sum.outer_iter_mut().zip(p1.outer_iter()).zip(p2.outer_iter()) {
                Zip::from(&mut acc).and(&a).and(&c).and(&bm.m).for_each(|s, &v1, &v2, &m| {
                    *s += if m == 1 { v2 } else { v1 };
                });
            }
        }
        let r = params.rounds as f32;
        out = sum.mapv(|v| v / r);
        s_p = p;
    }
    Ok(out)
}
