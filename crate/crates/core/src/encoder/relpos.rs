/// T5 bidirectional bucket for `offset = key − query`.
///
/// The lower half of the buckets holds non-positive offsets, the upper half positive ones.
/// Within each half, distances below `buckets / 4` get their own bucket and larger ones are
/// log-spaced up to `max_distance`, clamping beyond it.
pub fn relpos_bucket(offset: i64, buckets: usize, max_distance: usize) -> usize {
    let half = buckets / 2;
    let mut ret = 0;
    if offset > 0 {
        ret += half;
    }
    let n = offset.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return ret + n;
    }
    let scaled = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (scaled * (half - max_exact) as f64) as usize;
    ret + large.min(half - 1)
}

/// Bucket index for every `(query, key)` pair of a length-`t` sequence, row-major by query.
pub fn bucket_matrix(t: usize, buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(t * t);
    for q in 0..t {
        for k in 0..t {
            out.push(relpos_bucket(k as i64 - q as i64, buckets, max_distance));
        }
    }
    out
}
