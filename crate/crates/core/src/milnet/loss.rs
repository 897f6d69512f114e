//! Binary cross-entropy on an already-squashed probability.

use super::scalar::Scalar;

/// Clamp bound keeping `ln` and the gradient finite at the extremes.
const CLAMP: f64 = 1e-7;

/// Binary cross-entropy `-(y ln p + (1-y) ln(1-p))` for a probability `p`
/// and target `y` in {0, 1}; returns `(loss, dloss/dp)`.
///
/// `p` is clamped to `[1e-7, 1 - 1e-7]` before the logarithms, so saturated
/// sigmoids produce a large-but-finite loss instead of infinities.
pub fn bce_loss<T: Scalar>(p: T, y: T) -> (T, T) {
    let lo = T::from_f64(CLAMP);
    let hi = T::one() - lo;
    let pc = if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    };
    let loss = -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
    let grad = (pc - y) / (pc * (T::one() - pc));
    (loss, grad)
}
