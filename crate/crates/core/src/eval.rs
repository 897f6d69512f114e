//! ROC analysis and bootstrap confidence intervals.
//!
//! AUC is computed with the midrank (Mann-Whitney) formulation, so tied
//! scores contribute half credit; the explicit ROC curve is built by a
//! threshold sweep over the same scores, and the trapezoidal area under that
//! curve agrees with the rank formula to machine precision — the two routes
//! cross-check each other in the tests.
//!
//! Confidence intervals come from a stratified percentile bootstrap: each
//! resample draws positives and negatives separately (so every resample has
//! both classes), and each resample's RNG is derived independently from
//! `(seed, resample_index)`, making the distribution identical whether
//! resamples run serially or in parallel.

use rayon::prelude::*;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seed::derive_seed;

/// Default number of bootstrap resamples.
pub const DEFAULT_N_BOOT: usize = 1000;
/// Default confidence level.
pub const DEFAULT_CI_LEVEL: f64 = 0.95;
/// Resample counts below this give unusably noisy percentile endpoints.
pub const MIN_N_BOOT: usize = 100;

/// Errors from ROC or bootstrap computation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("cannot compute ROC on an empty score set")]
    Empty,
    #[error("ROC needs both classes, got {n_pos} positive / {n_neg} negative")]
    OneClass { n_pos: usize, n_neg: usize },
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("bootstrap needs at least {MIN_N_BOOT} resamples, got {0}")]
    TooFewResamples(usize),
    #[error("confidence level must be in (0, 1), got {0}")]
    BadLevel(f64),
}

/// One point of the ROC curve: the classifier "score >= threshold" yields
/// this false/true positive rate pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// AUC plus the explicit ROC curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub auc: f64,
    /// Starts at (0,0) with an infinite threshold and ends at (1,1) at the
    /// minimum score; one point per distinct score value.
    pub curve: Vec<RocPoint>,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn validate(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(idx) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(idx));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::OneClass { n_pos, n_neg });
    }
    Ok((n_pos, n_neg))
}

fn midrank_auc(scores: &[f64], labels: &[bool], n_pos: usize, n_neg: usize) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks within tie groups (1-based ranks).
    let mut rank_sum_pos = 0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j - 1) as f64 / 2.0 + 1.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Computes AUC (midrank, ties count half) and the threshold-swept ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult, EvalError> {
    let (n_pos, n_neg) = validate(scores, labels)?;
    let auc = midrank_auc(scores, labels, n_pos, n_neg);

    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut curve = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        let s = scores[order[i]];
        while i < n && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocResult {
        auc,
        curve,
        n_pos,
        n_neg,
    })
}

/// Trapezoidal area under a ROC curve; agrees with the midrank AUC.
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Draws the bootstrap AUC distribution.
///
/// Resample `b` draws `n_pos` positives then `n_neg` negatives with
/// replacement using a ChaCha stream seeded by `(seed, b)`; resamples are
/// computed in parallel, but the output vector is identical to a serial run.
pub fn bootstrap_distribution(
    scores: &[f64],
    labels: &[bool],
    n_boot: usize,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    let (n_pos, n_neg) = validate(scores, labels)?;
    if n_boot < MIN_N_BOOT {
        return Err(EvalError::TooFewResamples(n_boot));
    }
    let pos_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg_idx: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();

    let aucs: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bootstrap", b as u64));
            let mut s = Vec::with_capacity(scores.len());
            let mut l = Vec::with_capacity(scores.len());
            for _ in 0..n_pos {
                s.push(scores[pos_idx[rng.random_range(0..n_pos)]]);
                l.push(true);
            }
            for _ in 0..n_neg {
                s.push(scores[neg_idx[rng.random_range(0..n_neg)]]);
                l.push(false);
            }
            midrank_auc(&s, &l, n_pos, n_neg)
        })
        .collect();
    Ok(aucs)
}

/// Linear-interpolation percentile (the common "type 7" definition) of a
/// sorted sample.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Stratified percentile bootstrap confidence interval for the AUC.
///
/// Returns the `(1-level)/2` and `1-(1-level)/2` percentiles of the bootstrap
/// distribution. Deterministic for a given seed regardless of thread count.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[bool],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    if !level.is_finite() || level <= 0.0 || level >= 1.0 {
        return Err(EvalError::BadLevel(level));
    }
    let mut aucs = bootstrap_distribution(scores, labels, n_boot, seed)?;
    aucs.sort_by(|a, b| a.partial_cmp(b).expect("AUCs are finite"));
    let tail = (1.0 - level) / 2.0;
    Ok((
        percentile_sorted(&aucs, tail),
        percentile_sorted(&aucs, 1.0 - tail),
    ))
}
