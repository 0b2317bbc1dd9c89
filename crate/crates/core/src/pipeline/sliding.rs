use ndarray::{s, Array1, Array3, Array4, ArrayView3, ArrayView4, Zip};

use crate::error::{invalid, shape, Result};
use crate::volume::Dims;

/// Where a patch sits in the (padded) stage grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchContext {
    /// Position in visit order of the canonical tiling.
    pub index: usize,
    pub origin: Dims,
    pub size: Dims,
}

/// Anything that maps an image patch and its prompt patch to `n_outputs`
/// probability channels over the same patch.
pub trait PatchPredictor {
    fn n_outputs(&self) -> usize;
    fn predict(&mut self, image: ArrayView3<f32>, prompt: ArrayView4<f32>, ctx: &PatchContext) -> Result<Array4<f32>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowParams {
    pub crop: Dims,
    pub overlap: f64,
    pub sigma_scale: f64,
}

/// Evenly spaced start positions covering `len` with windows of `crop`, at
/// most `crop * (1 - overlap)` apart.
pub fn window_starts(len: usize, crop: usize, overlap: f64) -> Vec<usize> {
    if len <= crop {
        return vec![0];
    }
    let step = (crop as f64 * (1.0 - overlap)).max(1.0);
    let n = ((len - crop) as f64 / step).ceil() as usize + 1;
    let span = (len - crop) as f64;
    (0..n).map(|i| (i as f64 * span / (n - 1) as f64).round() as usize).collect()
}

/// Separable Gaussian centred on the crop, sigma `crop * sigma_scale` per axis.
pub fn gaussian_weights(crop: Dims, sigma_scale: f64) -> Array3<f32> {
    let axis = |n: usize| {
        let sigma = n as f64 * sigma_scale;
        let c = (n as f64 - 1.0) / 2.0;
        Array1::from_shape_fn(n, |i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
    };
    let (a, b, c) = (axis(crop[0]), axis(crop[1]), axis(crop[2]));
    Array3::from_shape_fn(crop, |(x, y, z)| (a[x] * b[y] * c[z]) as f32)
}

/// Every patch origin of the tiling, x-major.
pub fn tiling(dims: Dims, params: &WindowParams) -> Vec<Dims> {
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|i| window_starts(dims[i], params.crop[i], params.overlap))
        .collect();
    let mut out = Vec::new();
    for &x in &starts[0] {
        for &y in &starts[1] {
            for &z in &starts[2] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Gaussian-blended sliding-window inference. The volume is zero-padded at
/// the far end of any axis shorter than the crop. `order`, when given, is a
/// permutation of the tiling to visit patches in.
pub fn sliding_window_infer(
    image: ArrayView3<f32>,
    prompt: ArrayView4<f32>,
    params: &WindowParams,
    predictor: &mut dyn PatchPredictor,
    order: Option<&[usize]>,
) -> Result<Array4<f32>> {
    let n = predictor.n_outputs();
    if n == 0 {
        return Err(invalid("sliding window needs at least one query"));
    }
    if prompt.shape()[1..] != *image.shape() {
        return Err(shape(format!("prompt {:?} vs image {:?}", prompt.shape(), image.shape())));
    }
    if params.crop.contains(&0) {
        return Err(invalid("crop must be positive"));
    }
    let dims = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let padded = [0, 1, 2].map(|i| dims[i].max(params.crop[i]));
    let crop = params.crop;
    let needs_pad = padded != dims;
    let (img, prm) = if needs_pad {
        let mut img = Array3::<f32>::zeros(padded);
        img.slice_mut(s![..dims[0], ..dims[1], ..dims[2]]).assign(&image);
        let mut prm = Array4::<f32>::zeros((prompt.shape()[0], padded[0], padded[1], padded[2]));
        prm.slice_mut(s![.., ..dims[0], ..dims[1], ..dims[2]]).assign(&prompt);
        (img, prm)
    } else {
        (image.to_owned(), prompt.to_owned())
    };
    let tiles = tiling(padded, params);
    let visit: Vec<usize> = match order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..tiles.len()).collect::<Vec<_>>() {
                return Err(invalid("patch order is not a permutation of the tiling"));
            }
            o.to_vec()
        }
        None => (0..tiles.len()).collect(),
    };
    let weight = gaussian_weights(crop, params.sigma_scale);
    let mut acc = Array4::<f32>::zeros((n, padded[0], padded[1], padded[2]));
    let mut wsum = Array3::<f32>::zeros(padded);
    for k in visit {
        let o = tiles[k];
        let win = s![o[0]..o[0] + crop[0], o[1]..o[1] + crop[1], o[2]..o[2] + crop[2]];
        let ctx = PatchContext { index: k, origin: o, size: crop };
        let out = predictor.predict(img.slice(win), prm.slice(s![.., o[0]..o[0] + crop[0], o[1]..o[1] + crop[1], o[2]..o[2] + crop[2]]), &ctx)?;
        if out.shape() != [n, crop[0], crop[1], crop[2]] {
            return Err(shape(format!("patch predictor returned {:?}", out.shape())));
        }
        for (mut a, p) in acc.outer_iter_mut().zip(out.outer_iter()) {
            Zip::from(a.slice_mut(win)).and(&p).and(&weight).for_each(|a, &p, &w| *a += w * p);
        }
        Zip::from(wsum.slice_mut(win)).and(&weight).for_each(|a, &w| *a += w);
    }
    for mut a in acc.outer_iter_mut() {
        Zip::from(&mut a).and(&wsum).for_each(|a, &w| *a /= w);
    }
    Ok(acc.slice(s![.., ..dims[0], ..dims[1], ..dims[2]]).to_owned())
}
