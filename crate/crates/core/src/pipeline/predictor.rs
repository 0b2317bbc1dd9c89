use ndarray::{s, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::config::Execution;
use super::sliding::{PatchContext, PatchPredictor};
use crate::decoder::{foreground_prompt, iterative_infer, Backbone, IterativeParams, Refiner};
use crate::error::Result;
use crate::rng::derive;

/// Runs the backbone and the iterative decoder on one patch, in either
/// execution mode, and counts backbone and head evaluations.
pub struct DecoderPredictor<'a> {
    pub backbone: &'a dyn Backbone,
    pub refiner: &'a dyn Refiner,
    pub z: ArrayView2<'a, f32>,
    pub params: &'a IterativeParams,
    pub execution: Execution,
    pub seed: u64,
    /// Mixed into the per-patch random stream so the stages draw
    /// independent masks.
    pub stage: u64,
    pub backbone_forwards: u64,
    pub head_forwards: u64,
}

impl<'a> DecoderPredictor<'a> {
    pub fn new(
        backbone: &'a dyn Backbone,
        refiner: &'a dyn Refiner,
        z: ArrayView2<'a, f32>,
        params: &'a IterativeParams,
        execution: Execution,
        seed: u64,
        stage: u64,
    ) -> Self {
        Self { backbone, refiner, z, params, execution, seed, stage, backbone_forwards: 0, head_forwards: 0 }
    }

    fn decode(&mut self, image: ArrayView3<f32>, prompt: ArrayView4<f32>, z: ArrayView2<f32>, ctx: &PatchContext) -> Result<Array4<f32>> {
        let s_f = foreground_prompt(prompt);
        let out = self.backbone.encode(image, s_f.view())?;
        let t = self.backbone.adapt_queries(out.multiscale.view(), z)?;
        self.backbone_forwards += 1;
        self.head_forwards += self.params.head_calls() as u64;
        // Same stream for every class of a patch, so sequential mode draws
        // the masks parallel mode draws.
        let mut rng = derive(self.seed, (self.stage << 32) | ctx.index as u64);
        iterative_infer(&out.features, &t, prompt, self.params, self.refiner, &mut rng)
    }
}

impl PatchPredictor for DecoderPredictor<'_> {
    fn n_outputs(&self) -> usize {
        self.z.nrows()
    }

    fn predict(&mut self, image: ArrayView3<f32>, prompt: ArrayView4<f32>, ctx: &PatchContext) -> Result<Array4<f32>> {
        match self.execution {
            Execution::Parallel => {
                let z = self.z;
                self.decode(image, prompt, z, ctx)
            }
            Execution::Sequential => {
                let n = self.z.nrows();
                let mut out = Array4::<f32>::zeros((n, ctx.size[0], ctx.size[1], ctx.size[2]));
                for k in 0..n {
                    let z = self.z;
                    let p = self.decode(image, prompt.slice(s![k..k + 1, .., .., ..]), z.slice(s![k..k + 1, ..]), ctx)?;
                    out.index_axis_mut(Axis(0), k).assign(&p.index_axis(Axis(0), 0));
                }
                Ok(out)
            }
        }
    }
}
