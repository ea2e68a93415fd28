//! Deterministic top-k selection shared by pruning and the analytics.

use std::cmp::Ordering;

/// Indices of the `k` largest scores. Ties go to the smaller index; the
/// result is returned sorted ascending by index.
///
/// Panics if `k > scores.len()`; callers validate `k` first.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    assert!(k <= scores.len(), "k = {k} > {}", scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, by_rank);
    }
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// `ceil(fraction * n)`, robust to representation error in `fraction`.
pub(crate) fn fraction_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let count = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (count as usize).min(n)
}
