//! Connectionist temporal classification: the loss with its exact gradient
//! with respect to the per-frame log probabilities, and best-path decoding.
//!
//! Label `0` is the blank. All dynamic programming runs in natural-log space
//! with [`NEG_INF`] as the log-zero sentinel, combined through [`log_add`].

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::logmath::{log_add, log_sum_exp, NEG_INF};

/// Index of the blank label in every lattice.
pub const BLANK: usize = 0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtcError {
    #[error("lattice has {values} values, expected {frames}x{width}")]
    Shape { frames: usize, width: usize, values: usize },
    #[error("lattice row {row} is not normalized (log-sum-exp {lse})")]
    NotNormalized { row: usize, lse: f64 },
    #[error("label {label} at position {position} is outside 1..{width}")]
    InvalidLabel { label: usize, position: usize, width: usize },
    #[error("target needs at least {required} frames but the lattice has {frames}")]
    Infeasible { required: usize, frames: usize },
}

/// A `frames × width` matrix of per-frame log probabilities. Column 0 is the
/// blank; each row log-sum-exps to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    frames: usize,
    width: usize,
    values: Vec<f64>,
}

impl LogProbLattice {
    /// Row-normalization tolerance accepted by [`LogProbLattice::new`].
    pub const TOLERANCE: f64 = 1e-5;

    pub fn new(frames: usize, width: usize, values: Vec<f64>) -> Result<Self, CtcError> {
        let lattice = Self::new_unchecked(frames, width, values)?;
        for t in 0..frames {
            let lse = log_sum_exp(lattice.row(t));
            if !(libm::fabs(lse) <= Self::TOLERANCE) {
                return Err(CtcError::NotNormalized { row: t, lse });
            }
        }
        Ok(lattice)
    }

    /// Builds a lattice without checking row normalization. The loss and its
    /// gradient are still well defined for arbitrary scores, which is what the
    /// finite-difference checks perturb.
    pub fn new_unchecked(frames: usize, width: usize, values: Vec<f64>) -> Result<Self, CtcError> {
        if values.len() != frames * width || width == 0 {
            return Err(CtcError::Shape { frames, width, values: values.len() });
        }
        Ok(Self { frames, width, values })
    }

    /// Applies a row-wise log-softmax to raw scores.
    pub fn from_logits(frames: usize, width: usize, mut logits: Vec<f64>) -> Result<Self, CtcError> {
        if logits.len() != frames * width || width == 0 {
            return Err(CtcError::Shape { frames, width, values: logits.len() });
        }
        for row in logits.chunks_mut(width) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(Self { frames, width, values: logits })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of columns, i.e. vocabulary size including the blank.
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.width + k]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.width..(t + 1) * self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Frames needed to emit `target`: one per label plus a separating blank
/// between each pair of equal adjacent labels.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Result of [`ctc_loss`]: the negative log likelihood and its gradient with
/// respect to every lattice entry, laid out like the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Negative log probability of `target` summed over all alignments.
///
/// Uses the blank-augmented label sequence `l' = (·, l1, ·, l2, …, ·)` with the
/// forward variable `α_t(s)` including the emission at `t` and the backward
/// variable `β_t(s)` excluding it, so that `α_t(s) + β_t(s)` is the log mass
/// of all alignments occupying state `s` at frame `t`.
pub fn ctc_loss(lattice: &LogProbLattice, target: &[usize]) -> Result<CtcOutput, CtcError> {
    let width = lattice.width;
    for (position, &label) in target.iter().enumerate() {
        if label == BLANK || label >= width {
            return Err(CtcError::InvalidLabel { label, position, width });
        }
    }
    let frames = lattice.frames;
    let required = min_frames(target);
    if frames < required || frames == 0 {
        return Err(CtcError::Infeasible { required: required.max(1), frames });
    }

    let states = 2 * target.len() + 1;
    let label_at = |s: usize| if s % 2 == 0 { BLANK } else { target[s / 2] };
    // s may skip from s-2 when l'_s is a label different from l'_{s-2}.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && target[s / 2] != target[s / 2 - 1];

    let mut alpha = vec![NEG_INF; frames * states];
    alpha[0] = lattice.get(0, BLANK);
    if states > 1 {
        alpha[1] = lattice.get(0, target[0]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == NEG_INF { NEG_INF } else { acc + lattice.get(t, label_at(s)) };
        }
    }

    let mut beta = vec![NEG_INF; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = |s2: usize| {
                let b = beta[(t + 1) * states + s2];
                if b == NEG_INF {
                    NEG_INF
                } else {
                    b + lattice.get(t + 1, label_at(s2))
                }
            };
            let mut acc = next(s);
            if s + 1 < states {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * states + s] = acc;
        }
    }

    let mut log_likelihood = alpha[last + states - 1];
    if states > 1 {
        log_likelihood = log_add(log_likelihood, alpha[last + states - 2]);
    }
    if log_likelihood == NEG_INF {
        return Err(CtcError::Infeasible { required, frames });
    }

    // d(-ln P)/d lattice[t][k] = -Σ_{s: l'_s = k} exp(α_t(s) + β_t(s) - ln P)
    let mut gradient = vec![0.0; frames * width];
    for t in 0..frames {
        for s in 0..states {
            let a = alpha[t * states + s];
            let b = beta[t * states + s];
            if a == NEG_INF || b == NEG_INF {
                continue;
            }
            gradient[t * width + label_at(s)] -= libm::exp(a + b - log_likelihood);
        }
    }
    Ok(CtcOutput { loss: -log_likelihood, gradient })
}

/// Per-frame argmax with ties going to the lowest index.
pub fn best_path(lattice: &LogProbLattice) -> Vec<usize> {
    (0..lattice.frames)
        .map(|t| {
            let row = lattice.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Collapses runs of equal labels and then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &label in path {
        if Some(label) != prev && label != BLANK {
            out.push(label);
        }
        prev = Some(label);
    }
    out
}

/// Best-path decoding as label indices (no blanks).
pub fn greedy_labels(lattice: &LogProbLattice) -> Vec<usize> {
    collapse(&best_path(lattice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec::Vec;

    fn uniform(frames: usize, width: usize) -> LogProbLattice {
        LogProbLattice::from_logits(frames, width, vec![0.0; frames * width]).unwrap()
    }

    fn one_hot_path(path: &[usize], width: usize) -> LogProbLattice {
        let mut logits = vec![-5.0; path.len() * width];
        for (t, &k) in path.iter().enumerate() {
            logits[t * width + k] = 5.0;
        }
        LogProbLattice::from_logits(path.len(), width, logits).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let lattice = LogProbLattice::from_logits(1, 3, vec![0.1, 0.7, -0.4]).unwrap();
        let out = ctc_loss(&lattice, &[1]).unwrap();
        assert!((out.loss + lattice.get(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_the_all_blank_path() {
        let lattice = LogProbLattice::from_logits(3, 3, vec![0.1, 0.7, -0.4, 1.0, 0.0, 0.3, -2.0, 0.5, 0.5]).unwrap();
        let out = ctc_loss(&lattice, &[]).unwrap();
        let expected: f64 = -(0..3).map(|t| lattice.get(t, BLANK)).sum::<f64>();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let lattice = LogProbLattice::from_logits(2, 2, vec![0.3, -0.2, 1.1, 0.4]).unwrap();
        let p = |t: usize, k: usize| lattice.get(t, k).exp();
        let expected = -(p(0, 1) * p(1, 1) + p(0, 1) * p(1, 0) + p(0, 0) * p(1, 1)).ln();
        let out = ctc_loss(&lattice, &[1]).unwrap();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_are_reported() {
        let lattice = uniform(2, 3);
        assert_eq!(ctc_loss(&lattice, &[1, 1]), Err(CtcError::Infeasible { required: 3, frames: 2 }));
        assert!(matches!(ctc_loss(&lattice, &[1, 2, 1]), Err(CtcError::Infeasible { .. })));
        assert!(matches!(ctc_loss(&lattice, &[0]), Err(CtcError::InvalidLabel { .. })));
        assert!(matches!(ctc_loss(&lattice, &[3]), Err(CtcError::InvalidLabel { .. })));
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        assert!(matches!(LogProbLattice::new(1, 2, vec![0.0, 0.0]), Err(CtcError::NotNormalized { row: 0, .. })));
        assert!(LogProbLattice::new(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).is_ok());
    }

    #[test]
    fn gradient_rows_sum_to_minus_one() {
        // Each frame is occupied by exactly one state in every alignment.
        let lattice = LogProbLattice::from_logits(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let out = ctc_loss(&lattice, &[1, 2, 2]).unwrap();
        for row in out.gradient.chunks(3) {
            assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_examples() {
        let collapse_of = |path: &[usize]| greedy_labels(&one_hot_path(path, 3));
        assert_eq!(collapse_of(&[1, 1, 0, 2]), [1, 2]);
        assert_eq!(collapse_of(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(collapse_of(&[1, 0, 1]), [1, 1]);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(best_path(&uniform(2, 4)), [0, 0]);
        let lattice = LogProbLattice::from_logits(1, 3, vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(best_path(&lattice), [1]);
    }

    #[test]
    fn long_lattice_stays_finite() {
        let frames = 800;
        let width = 6;
        let logits: Vec<f64> = (0..frames * width).map(|i| ((i * 7919) % 101) as f64 / 5.0).collect();
        let lattice = LogProbLattice::from_logits(frames, width, logits).unwrap();
        let target: Vec<usize> = (0..200).map(|i| 1 + i % 5).collect();
        let out = ctc_loss(&lattice, &target).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
        assert!(out.gradient.iter().all(|g| g.is_finite()));
    }
}
