//! Trainable exponential-weighted pooling of per-slice scores.
//!
//! The bag score is a softmax-weighted average of the slice scores,
//!
//! ```text
//! P = sum_i p_i * exp(alpha * p_i) / sum_j exp(alpha * p_j)
//! ```
//!
//! so `alpha = 0` reduces to the mean, and `alpha -> inf` approaches the
//! maximum. Because the pooling is differentiable in `alpha`, the sharpness
//! of the aggregation is learned jointly with the network.

use super::scalar::Scalar;
use super::MilError;

/// Pooled value together with its exact gradients.
#[derive(Debug, Clone)]
pub struct AdaptivePool<T> {
    /// The pooled bag score `P`.
    pub value: T,
    /// `dP/dp_i` for each input score.
    pub d_scores: Vec<T>,
    /// `dP/dalpha`.
    pub d_alpha: T,
}

/// Pools `scores` with sharpness `alpha`, returning the value and the
/// closed-form gradients
///
/// ```text
/// dP/dp_i   = w_i * (1 + alpha * (p_i - P))
/// dP/dalpha = sum_i w_i * p_i^2 - P^2
/// ```
///
/// where `w_i` are the softmax weights of `alpha * p_i`. Weights are
/// computed with the max-shift trick, so large `|alpha|` stays finite.
pub fn adaptive_pool<T: Scalar>(scores: &[T], alpha: T) -> Result<AdaptivePool<T>, MilError> {
    if scores.is_empty() {
        return Err(MilError::EmptyScores);
    }
    let shift = scores
        .iter()
        .map(|&p| alpha * p)
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut weights: Vec<T> = scores.iter().map(|&p| (alpha * p - shift).exp()).collect();
    let z: T = weights.iter().copied().sum();
    for w in weights.iter_mut() {
        *w = *w / z;
    }
    let value: T = weights.iter().zip(scores).map(|(&w, &p)| w * p).sum();
    let second_moment: T = weights.iter().zip(scores).map(|(&w, &p)| w * p * p).sum();
    let d_scores = weights
        .iter()
        .zip(scores)
        .map(|(&w, &p)| w * (T::one() + alpha * (p - value)))
        .collect();
    Ok(AdaptivePool {
        value,
        d_scores,
        d_alpha: second_moment - value * value,
    })
}
