//! Per-class binary cross entropy with an active-class mask.
//!
//! Multi-label classification needs one independent binary loss per class;
//! cascade training additionally masks the loss to the sampled active class
//! so easy negatives of other classes are not oversampled.

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// Masked multi-label binary cross entropy.
///
/// `probs` are post-sigmoid scores (clamped into `[1e-7, 1 - 1e-7]` before
/// the logs), `labels` and `active_mask` are 0/1 vectors. Returns the summed
/// loss over active classes and the gradient w.r.t. each probability; the
/// gradient is exactly zero wherever the mask is zero.
pub fn bce_multilabel(probs: &[f64], labels: &[f64], active_mask: &[f64]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != labels.len() || probs.len() != active_mask.len() {
        return Err(Error::shape(format!(
            "bce: got {} probs, {} labels, {} mask entries",
            probs.len(),
            labels.len(),
            active_mask.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for c in 0..probs.len() {
        if active_mask[c] == 0.0 {
            continue;
        }
        let p = probs[c].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = labels[c];
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad[c] = active_mask[c] * (-y / p + (1.0 - y) / (1.0 - p));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_negligible_loss() {
        let labels = [1.0, 0.0, 1.0, 0.0];
        let probs = [1.0, 0.0, 1.0, 0.0];
        let mask = [1.0; 4];
        let (loss, _) = bce_multilabel(&probs, &labels, &mask).unwrap();
        assert!(loss <= 4.0 * 1e-6, "loss {loss}");
    }

    #[test]
    fn all_zero_mask_gives_zero_loss_and_gradient() {
        let labels = [1.0, 0.0];
        let probs = [0.2, 0.9];
        let mask = [0.0, 0.0];
        let (loss, grad) = bce_multilabel(&probs, &labels, &mask).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn uniform_half_probabilities_give_c_ln2() {
        let c = 5;
        let probs = vec![0.5; c];
        let labels = vec![1.0, 0.0, 1.0, 0.0, 1.0];
        let mask = vec![1.0; c];
        let (loss, _) = bce_multilabel(&probs, &labels, &mask).unwrap();
        assert!((loss - c as f64 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let labels = [1.0, 0.0, 1.0];
        let mask = [1.0, 0.0, 1.0];
        let probs = [0.3, 0.6, 0.8];
        let (_, grad) = bce_multilabel(&probs, &labels, &mask).unwrap();
        let eps = 1e-7;
        for c in 0..3 {
            let mut up = probs;
            up[c] += eps;
            let mut down = probs;
            down[c] -= eps;
            let (lu, _) = bce_multilabel(&up, &labels, &mask).unwrap();
            let (ld, _) = bce_multilabel(&down, &labels, &mask).unwrap();
            let numeric = (lu - ld) / (2.0 * eps);
            assert!((numeric - grad[c]).abs() < 1e-5, "class {c}");
        }
    }
}
