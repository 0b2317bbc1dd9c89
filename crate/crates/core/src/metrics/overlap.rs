use ndarray::{ArrayView3, Zip};

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks score 1.
pub fn dsc(a: ArrayView3<bool>, b: ArrayView3<bool>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "dsc needs masks on the same grid");
    let (mut inter, mut total) = (0usize, 0usize);
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    });
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
