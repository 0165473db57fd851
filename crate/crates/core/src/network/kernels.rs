//! Row-wise helpers for the attention softmax.
//!
//! The [n, n] score matrices are by far the largest tensors in the network,
//! so the softmax is organized to touch them as few times as possible: one
//! pass to find row maxima, one fused exponentiate-and-sum pass, and no
//! normalization pass at all — callers carry the reciprocal row sums and
//! fold them into the next matrix product as a per-row scale.

use ndarray::Array2;

use super::layers::exp_slice;

/// Per-row maxima, with a lane-wise sweep so the reduction vectorizes.
pub fn row_maxes(scores: &Array2<f64>) -> Vec<f64> {
    let n = scores.ncols();
    let ss = scores.as_slice().expect("contiguous scores");
    ss.chunks_exact(n)
        .map(|row| {
            let mut lanes = [f64::NEG_INFINITY; 8];
            let chunks = row.chunks_exact(8);
            let rem = chunks.remainder();
            for chunk in chunks {
                for (m, &v) in lanes.iter_mut().zip(chunk.iter()) {
                    *m = m.max(v);
                }
            }
            let mut max = f64::NEG_INFINITY;
            for &m in &lanes {
                max = max.max(m);
            }
            for &v in rem {
                max = max.max(v);
            }
            max
        })
        .collect()
}

/// In place: row = exp(scale * (row - max)); returns the row sums.
pub fn exp_rows(scores: &mut Array2<f64>, maxes: &[f64], scale: f64) -> Vec<f64> {
    let n = scores.ncols();
    let ss = scores.as_slice_mut().expect("contiguous scores");
    let mut sums = Vec::with_capacity(maxes.len());
    for (row, &max) in ss.chunks_exact_mut(n).zip(maxes.iter()) {
        let shift = max * scale;
        for v in row.iter_mut() {
            *v = *v * scale - shift;
        }
        exp_slice(row);
        let mut lanes = [0.0f64; 8];
        let chunks = row.chunks_exact(8);
        let rem = chunks.remainder();
        for chunk in chunks {
            for (l, &v) in lanes.iter_mut().zip(chunk.iter()) {
                *l += v;
            }
        }
        let mut sum: f64 = lanes.iter().sum();
        for &v in rem {
            sum += v;
        }
        sums.push(sum);
    }
    sums
}

/// Multiply each row by its scale factor.
pub fn scale_rows(m: &mut Array2<f64>, scales: &[f64]) {
    for (mut row, &s) in m.rows_mut().into_iter().zip(scales.iter()) {
        row *= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn exp_rows_matches_reference_softmax() {
        let mut rng = substream(5, &["softmax-ref"]);
        let n = 37;
        let scale = 0.42;
        let scores = Array2::from_shape_fn((n, n), |_| rng.random_range(-30.0..30.0));
        let maxes = row_maxes(&scores);
        for (i, &m) in maxes.iter().enumerate() {
            let want = scores.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(m, want);
        }
        let mut u = scores.clone();
        let sums = exp_rows(&mut u, &maxes, scale);
        for i in 0..n {
            let mut want_sum = 0.0;
            for j in 0..n {
                let want = (scale * (scores[[i, j]] - maxes[i])).exp();
                assert!((u[[i, j]] - want).abs() < 1e-9 * want.max(1e-9));
                want_sum += want;
            }
            assert!((sums[i] - want_sum).abs() < 1e-9 * want_sum);
            // Normalized rows are a probability distribution.
            let total: f64 = (0..n).map(|j| u[[i, j]] / sums[i]).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
