//! Run-length encoding of binary masks: alternating run lengths over the
//! row-major flattening, starting with a (possibly empty) run of zeros.

use crate::error::ApiError;

pub fn encode(mask: impl IntoIterator<Item = bool>) -> Vec<u32> {
    let mut counts = Vec::new();
    let (mut current, mut run) = (false, 0u32);
    for v in mask {
        if v != current {
            counts.push(run);
            current = v;
            run = 0;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

/// Expands `counts` into exactly `len` values.
pub fn decode(counts: &[u32], len: usize) -> Result<Vec<bool>, ApiError> {
    let total: u64 = counts.iter().map(|c| *c as u64).sum();
    if total != len as u64 {
        return Err(ApiError::unprocessable(format!("run lengths cover {total} pixels, the slice has {len}")));
    }
    let mut out = Vec::with_capacity(len);
    for (k, c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(k % 2 == 1, *c as usize));
    }
    Ok(out)
}
