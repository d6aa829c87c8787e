//! Weighted categorical cross-entropy over voxel grids. Voxels with zero
//! weight contribute nothing to the value or the gradient.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

/// Sum of `-w * log p(target)` over weighted voxels plus the weighted-voxel
/// count, computed from logits via a stable log-softmax. Reductions in f64.
pub fn weighted_ce_sum(
    logits: &Array4<f32>,
    target: &Array3<u8>,
    weights: &Array3<f32>,
) -> (f64, usize) {
    let (c, z, y, x) = logits.dim();
    debug_assert_eq!(target.dim(), (z, y, x));
    debug_assert_eq!(weights.dim(), (z, y, x));
    let s = logits.as_slice().expect("contiguous");
    let plane = z * y * x;
    let mut sum = 0f64;
    let mut count = 0usize;
    for (v, (&t, &w)) in target.iter().zip(weights.iter()).enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut maxv = f32::NEG_INFINITY;
        for ci in 0..c {
            maxv = maxv.max(s[ci * plane + v]);
        }
        let mut lse = 0f64;
        for ci in 0..c {
            lse += ((s[ci * plane + v] - maxv) as f64).exp();
        }
        let log_p = (s[t as usize * plane + v] - maxv) as f64 - lse.ln();
        sum -= w as f64 * log_p;
        count += 1;
    }
    (sum, count)
}

/// Mean weighted cross-entropy over the voxels with positive weight, from
/// predicted class probabilities. A batch with no weighted voxels is a
/// degenerate input (callers skip such batches).
pub fn weighted_loss(
    predictions: &Array4<f32>,
    target: &Array3<u8>,
    weights: &Array3<f32>,
) -> Result<f64> {
    let (c, z, y, x) = predictions.dim();
    if target.dim() != (z, y, x) || weights.dim() != (z, y, x) {
        return Err(Error::DimensionMismatch {
            context: "weighted_loss".into(),
            expected: [z, y, x],
            got: {
                let d = target.dim();
                [d.0, d.1, d.2]
            },
        });
    }
    let s = predictions.as_slice().expect("contiguous");
    let plane = z * y * x;
    let mut sum = 0f64;
    let mut count = 0usize;
    for (v, (&t, &w)) in target.iter().zip(weights.iter()).enumerate() {
        if w == 0.0 {
            continue;
        }
        if (t as usize) >= c {
            return Err(Error::InvalidLabel {
                label: t as i64,
                at: [v / (y * x), (v / x) % y, v % x],
            });
        }
        let p = s[t as usize * plane + v].max(1e-30) as f64;
        sum -= w as f64 * p.ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateInput(
            "all loss weights are zero in this batch".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Gradient of the summed weighted cross-entropy with respect to the
/// logits: `w * (softmax - onehot(target))`, scaled by `scale` (callers
/// pass 1/batch_weighted_count to turn the sum into a mean).
pub fn weighted_ce_grad(
    logits: &Array4<f32>,
    target: &Array3<u8>,
    weights: &Array3<f32>,
    scale: f32,
) -> Array4<f32> {
    let (c, z, y, x) = logits.dim();
    let s = logits.as_slice().expect("contiguous");
    let plane = z * y * x;
    let mut grad = Array4::<f32>::zeros((c, z, y, x));
    let g = grad.as_slice_mut().expect("contiguous");
    for (v, (&t, &w)) in target.iter().zip(weights.iter()).enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut maxv = f32::NEG_INFINITY;
        for ci in 0..c {
            maxv = maxv.max(s[ci * plane + v]);
        }
        let mut sum = 0f32;
        for ci in 0..c {
            sum += (s[ci * plane + v] - maxv).exp();
        }
        for ci in 0..c {
            let p = (s[ci * plane + v] - maxv).exp() / sum;
            let onehot = if ci == t as usize { 1.0 } else { 0.0 };
            g[ci * plane + v] = scale * w * (p - onehot);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        let mut probs = Array4::<f32>::zeros((4, 1, 2, 2));
        let mut target = Array3::<u8>::zeros((1, 2, 2));
        target[[0, 0, 0]] = 1;
        target[[0, 0, 1]] = 2;
        target[[0, 1, 0]] = 3;
        target[[0, 1, 1]] = 1;
        for ((z, y, x), &t) in target.indexed_iter() {
            probs[[t as usize, z, y, x]] = 1.0;
        }
        let weights = Array3::<f32>::from_elem((1, 2, 2), 1.0);
        let loss = weighted_loss(&probs, &target, &weights).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn uniform_prediction_gives_ln4() {
        let probs = Array4::<f32>::from_elem((4, 1, 3, 3), 0.25);
        let target = Array3::<u8>::from_elem((1, 3, 3), 2);
        let weights = Array3::<f32>::from_elem((1, 3, 3), 1.0);
        let loss = weighted_loss(&probs, &target, &weights).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn zero_weight_voxels_do_not_influence_loss_or_grad() {
        let mut logits = Array4::<f32>::zeros((4, 1, 2, 2));
        logits.mapv_inplace(|_| 0.3);
        logits[[2, 0, 1, 1]] = 1.7;
        let mut target = Array3::<u8>::zeros((1, 2, 2));
        target[[0, 0, 0]] = 1;
        let mut weights = Array3::<f32>::from_elem((1, 2, 2), 1.0);
        weights[[0, 1, 1]] = 0.0;

        let (base, n) = weighted_ce_sum(&logits, &target, &weights);
        let gbase = weighted_ce_grad(&logits, &target, &weights, 1.0);

        // Flip the label under the zero weight: nothing may change.
        let mut flipped = target.clone();
        flipped[[0, 1, 1]] = 3;
        let (after, n2) = weighted_ce_sum(&logits, &flipped, &weights);
        let gafter = weighted_ce_grad(&logits, &flipped, &weights, 1.0);
        assert_eq!(base, after);
        assert_eq!(n, n2);
        assert_eq!(gbase, gafter);
        // And the gradient is exactly zero at the zero-weight voxel.
        for c in 0..4 {
            assert_eq!(gbase[[c, 0, 1, 1]], 0.0);
        }
    }

    #[test]
    fn all_zero_weights_signal_skip() {
        let probs = Array4::<f32>::from_elem((4, 1, 1, 2), 0.25);
        let target = Array3::<u8>::zeros((1, 1, 2));
        let weights = Array3::<f32>::zeros((1, 1, 2));
        assert!(weighted_loss(&probs, &target, &weights).is_err());
    }

    #[test]
    fn logit_and_probability_paths_agree() {
        let mut logits = Array4::<f32>::zeros((4, 1, 2, 3));
        for (i, v) in logits.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f32 - 5.0) * 0.3;
        }
        let target = Array3::<u8>::from_shape_fn((1, 2, 3), |(_, y, x)| ((y + x) % 4) as u8);
        let weights = Array3::<f32>::from_shape_fn((1, 2, 3), |(_, y, x)| {
            if (y + x) % 3 == 0 {
                0.0
            } else {
                1.0
            }
        });
        let (sum, count) = weighted_ce_sum(&logits, &target, &weights);
        let mut probs = logits.clone();
        crate::nn::model::softmax_channels_inplace(&mut probs);
        let mean = weighted_loss(&probs, &target, &weights).unwrap();
        assert!((sum / count as f64 - mean).abs() < 1e-5);
    }
}
