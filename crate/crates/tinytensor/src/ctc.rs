//! CTC loss via log-space forward-backward.
//!
//! Scores an `[T, V+1]` matrix of per-frame log-probabilities against a label
//! sequence, summing over every frame-level path that collapses (merge
//! repeats, then drop blanks) to the labels. Blank is index 0 by convention;
//! labels are `1..=V`.
//!
//! The input rows are treated as given log-scores: the loss is
//! `-log Σ_paths exp(Σ_t lp[t][π_t])`, which is the CTC negative
//! log-likelihood whenever the rows are normalized. Not assuming
//! normalization keeps the function well-defined under the perturbations a
//! finite-difference check applies.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardArgs, Tensor};

fn lse2<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3<S: Scalar>(a: S, b: S, c: S) -> S {
    lse2(lse2(a, b), c)
}

/// Frames needed to emit `target`: one per label plus one separating blank
/// between each pair of equal consecutive labels.
pub fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Differentiable CTC loss over log-probabilities `[T, V+1]` (blank = 0).
pub fn ctc_loss<S: Scalar>(log_probs: &Tensor<S>, target: &[usize]) -> Result<Tensor<S>> {
    if log_probs.rank() != 2 || log_probs.rows() == 0 || log_probs.cols() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "ctc_loss",
            detail: format!("log_probs shape {:?}", log_probs.shape()),
        });
    }
    let t_len = log_probs.rows();
    let width = log_probs.cols(); // V + 1
    for &tok in target {
        if tok == 0 || tok >= width {
            return Err(TensorError::IndexOutOfRange {
                op: "ctc_loss",
                index: tok,
                limit: width,
            });
        }
    }
    if min_frames(target) > t_len {
        return Err(TensorError::CtcUnreachable {
            target_len: target.len(),
            frames: t_len,
        });
    }

    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            0
        } else {
            target[s / 2]
        }
    };
    let lp = |t: usize, k: usize| -> S { log_probs.data()[t * width + k] };
    let ninf = S::neg_infinity();

    // alpha[t][s]: paths covering l'[0..=s] by time t, including the emission
    // at t. beta[t][s]: completion from (t, s) excluding the emission at t.
    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = lp(0, 0);
    if s_len > 1 {
        alpha[0][1] = lp(0, ext(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[t - 1][s];
            let step = if s >= 1 { alpha[t - 1][s - 1] } else { ninf };
            let skip = if s >= 2 && ext(s) != 0 && ext(s) != ext(s - 2) {
                alpha[t - 1][s - 2]
            } else {
                ninf
            };
            let best = lse3(stay, step, skip);
            alpha[t][s] = if best == ninf { ninf } else { best + lp(t, ext(s)) };
        }
    }
    let log_p = if s_len > 1 {
        lse2(alpha[t_len - 1][s_len - 1], alpha[t_len - 1][s_len - 2])
    } else {
        alpha[t_len - 1][0]
    };
    if !log_p.is_finite() {
        return Err(TensorError::CtcUnreachable {
            target_len: target.len(),
            frames: t_len,
        });
    }

    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = S::zero();
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = S::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = lp(t + 1, ext(s)) + beta[t + 1][s];
            let step = if s + 1 < s_len {
                lp(t + 1, ext(s + 1)) + beta[t + 1][s + 1]
            } else {
                ninf
            };
            let skip = if s + 2 < s_len && ext(s + 2) != 0 && ext(s + 2) != ext(s) {
                lp(t + 1, ext(s + 2)) + beta[t + 1][s + 2]
            } else {
                ninf
            };
            beta[t][s] = lse3(stay, step, skip);
        }
    }

    // d(-logP)/d lp[t][k] = -Σ_{s: l'[s]=k} exp(alpha[t][s] + beta[t][s] - logP).
    let mut grad = vec![S::zero(); t_len * width];
    for t in 0..t_len {
        for s in 0..s_len {
            let joint = alpha[t][s] + beta[t][s];
            if joint == ninf {
                continue;
            }
            grad[t * width + ext(s)] -= (joint - log_p).exp();
        }
    }

    Tensor::from_op(
        "ctc_loss",
        vec![1],
        vec![-log_p],
        vec![log_probs.clone()],
        Box::new(move |args: &BackwardArgs<S>| {
            let g = args.grad[0];
            vec![Some(grad.iter().map(|&d| d * g).collect())]
        }),
    )
}

/// Reference implementation: enumerate every frame-level path and sum the
/// ones that collapse to the target. Exponential in `T`; test-sized only.
pub fn ctc_loss_enumerated<S: Scalar>(log_probs: &Tensor<S>, target: &[usize]) -> Result<f64> {
    let t_len = log_probs.rows();
    let width = log_probs.cols();
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_len];
    loop {
        let collapsed = collapse(&path);
        if collapsed == target {
            let score: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| log_probs.data()[t * width + k].to_f64_lossy())
                .sum();
            total = if total == f64::NEG_INFINITY {
                score
            } else {
                let m = total.max(score);
                m + ((total - m).exp() + (score - m).exp()).ln()
            };
        }
        // Next path in odometer order.
        let mut i = 0;
        loop {
            if i == t_len {
                if total == f64::NEG_INFINITY {
                    return Err(TensorError::CtcUnreachable {
                        target_len: target.len(),
                        frames: t_len,
                    });
                }
                return Ok(-total);
            }
            path[i] += 1;
            if path[i] < width {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Collapse a frame-level path: merge consecutive repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &k in path {
        if k != prev && k != 0 {
            out.push(k);
        }
        prev = k;
    }
    out
}
