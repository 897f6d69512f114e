//! A from-scratch convolutional multiple-instance classifier.
//!
//! Each straightened volume is a *bag* of 2-D slices; only the bag carries a
//! label. A small VGG-style network scores every slice independently, and a
//! trainable adaptive pooling layer aggregates slice scores into a bag score:
//!
//! ```text
//! P = sum_i p_i * exp(alpha * p_i) / sum_j exp(alpha * p_j)
//! ```
//!
//! At `alpha = 0` this is the mean of the slice scores; as `alpha` grows it
//! approaches the maximum. `alpha` is learned jointly with the network, so
//! the pooling sharpness adapts to how localised the pathology is.
//!
//! Everything — convolution, batch normalisation, pooling, Adam, and the
//! pooling layer's closed-form gradients — is implemented here over a
//! [`Scalar`] abstraction, so the same code runs in `f32` for training and in
//! `f64` for finite-difference gradient verification.

mod adam;
mod adaptive;
mod gradcheck;
mod loss;
mod model;
mod ops;
mod scalar;
mod tensor;
mod train;

pub use adam::{adam_step, AdamParams, AdamState};
pub use adaptive::{adaptive_pool, AdaptivePool};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use loss::bce_loss;
pub use model::{
    load_checkpoint, save_checkpoint, BagForward, BagGradients, MilConfig, MilModel, SliceForward,
};
pub use ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, global_avg_pool_backward, global_avg_pool_forward, maxpool2x2_backward,
    maxpool2x2_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
    BatchNormCache, BnMode, MaxPoolCache,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{predict, train, EpochStats, Prediction, TrainConfig, TrainOutput};

use thiserror::Error;

/// Errors from network construction, training, or checkpoint IO.
#[derive(Debug, Error)]
pub enum MilError {
    #[error("bad tensor shape: {0}")]
    Shape(String),
    #[error("kernel size must be odd (same-padding convolution), got {0}")]
    EvenKernel(usize),
    #[error("batch normalisation in training mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("adaptive pooling needs at least one slice score")]
    EmptyScores,
    #[error("model config invalid: {0}")]
    BadConfig(String),
    #[error("optimizer state mismatch: {0}")]
    OptimizerMismatch(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValSet,
    #[error("bad training parameter: {0}")]
    BadTrainParam(String),
    #[error(
        "training diverged: non-finite loss at epoch {epoch} on {scan} \
         (slice-sampling seed {seed})"
    )]
    Diverged { epoch: usize, scan: String, seed: u64 },
    #[error("ensemble needs at least one prediction")]
    EmptyEnsemble,
    #[error("prediction {0} is not a finite probability")]
    BadPrediction(f64),
    #[error("failed to read {path}: {source}")]
    Read {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error(transparent)]
    Straighten(#[from] crate::straighten::StraightenError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

/// Averages per-direction bag probabilities into one ensemble probability.
pub fn ensemble(predictions: &[f64]) -> Result<f64, MilError> {
    if predictions.is_empty() {
        return Err(MilError::EmptyEnsemble);
    }
    for &p in predictions {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(MilError::BadPrediction(p));
        }
    }
    Ok(predictions.iter().sum::<f64>() / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_is_the_arithmetic_mean() {
        assert_eq!(ensemble(&[0.5]).unwrap(), 0.5);
        let got = ensemble(&[0.2, 0.4, 0.9]).unwrap();
        approx::assert_relative_eq!(got, 0.5, epsilon = 1e-12);
        assert!(matches!(ensemble(&[]), Err(MilError::EmptyEnsemble)));
        assert!(matches!(ensemble(&[1.2]), Err(MilError::BadPrediction(_))));
        assert!(matches!(
            ensemble(&[f64::NAN]),
            Err(MilError::BadPrediction(_))
        ));
    }
}
