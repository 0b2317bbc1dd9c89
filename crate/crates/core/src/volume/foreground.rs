use ndarray::{Array3, ArrayView4, Axis};

/// Heaviside of the channel sum: 1 where any channel carries mass.
///
/// Works for binary masks and soft probabilities alike. Soft prompts are not
/// thresholded here, so any positive probability counts as foreground.
pub fn foreground_union<T>(s: ArrayView4<T>) -> Array3<u8>
where
    T: Copy + Into<f64>,
{
    s.fold_axis(Axis(0), 0.0f64, |acc, v| acc + (*v).into())
        .mapv(|sum| u8::from(sum > 0.0))
}
