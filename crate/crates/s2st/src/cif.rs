//! Continuous integrate-and-fire prompt extraction.
//!
//! Each encoder frame contributes a firing weight α_t (sigmoid of its last
//! dimension) and a payload (the remaining dimensions). Weights accumulate
//! left to right; when the running sum would cross 1.0 the crossing weight
//! splits — enough to complete the current prompt, the rest starting the
//! next — and the completed α-weighted payload sum is emitted as a prompt
//! vector.
//!
//! Inference runs the plain `f64` state machine below. Training replays the
//! same event sequence through graph operations so gradients flow into the
//! α weights and payloads, with α rescaled so exactly N prompts fire under
//! teacher forcing.

use crate::error::{PipelineError, Result};
use crate::model::ModelView;
use crate::Tensor;

/// A fired prompt: the α-weighted payload sum, pre-projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVector {
    pub values: Vec<f64>,
    /// Frame (0-based) whose weight completed this prompt. Non-decreasing
    /// across prompts; equal indices occur when one frame fires repeatedly.
    pub fire_frame_index: usize,
}

/// Streaming integration state.
#[derive(Debug, Clone)]
pub struct CifState {
    accum: f64,
    carry: Vec<f64>,
    frames_seen: usize,
}

impl CifState {
    pub fn new(carry_dim: usize) -> Self {
        CifState {
            accum: 0.0,
            carry: vec![0.0; carry_dim],
            frames_seen: 0,
        }
    }

    pub fn accumulated(&self) -> f64 {
        self.accum
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Consume one frame's weight and payload; returns the prompts fired by
    /// this frame (several if α exceeds the leftover threshold by ≥ 1).
    pub fn step(&mut self, alpha: f64, payload: &[f64]) -> Vec<PromptVector> {
        debug_assert_eq!(payload.len(), self.carry.len());
        let frame = self.frames_seen;
        self.frames_seen += 1;
        let mut remaining = alpha;
        let mut fired = Vec::new();
        loop {
            if self.accum + remaining < 1.0 {
                for (c, &p) in self.carry.iter_mut().zip(payload) {
                    *c += remaining * p;
                }
                self.accum += remaining;
                break;
            }
            let take = 1.0 - self.accum;
            let values = self
                .carry
                .iter()
                .zip(payload)
                .map(|(&c, &p)| c + take * p)
                .collect();
            fired.push(PromptVector {
                values,
                fire_frame_index: frame,
            });
            remaining -= take;
            self.accum = 0.0;
            self.carry.iter_mut().for_each(|c| *c = 0.0);
        }
        fired
    }

    /// End of input: emit the partial integration if it is at least half a
    /// prompt, otherwise discard it.
    pub fn finalize(&mut self) -> Option<PromptVector> {
        let out = if self.accum >= 0.5 {
            Some(PromptVector {
                values: self.carry.clone(),
                fire_frame_index: self.frames_seen.saturating_sub(1),
            })
        } else {
            None
        };
        self.accum = 0.0;
        self.carry.iter_mut().for_each(|c| *c = 0.0);
        out
    }
}

/// Firing weights from encoder output `[T, d]`: sigmoid of the last column.
pub fn alphas(encoded: &Tensor) -> Result<Tensor> {
    Ok(encoded.narrow_cols(encoded.cols() - 1, 1)?.sigmoid()?)
}

/// Payload slice of encoder output: everything but the weight column.
pub fn payload(encoded: &Tensor) -> Result<Tensor> {
    Ok(encoded.narrow_cols(0, encoded.cols() - 1)?)
}

/// The quantity loss `|Σα − N|` on raw (unscaled) weights.
pub fn quantity_loss(alpha: &Tensor, n: usize) -> Result<Tensor> {
    Ok(alpha.sum_all()?.offset(-(n as f64))?.abs()?)
}

/// Rescale weights so they sum to exactly N: `α′ = α·N/Σα`.
pub fn scale_for_training(alpha: &Tensor, n: usize) -> Result<Tensor> {
    let ratio = Tensor::scalar(n as f64).div(&alpha.sum_all()?)?;
    Ok(alpha.scale_by(&ratio)?)
}

/// Teacher-forced prompt construction: run the integrate-and-fire loop over
/// scaled weights, building every prompt as a graph expression. Returns
/// `[N, d-1]` prompt rows.
///
/// Scaling makes the weights sum to N, so the loop crosses the 1.0 threshold
/// exactly N times up to float rounding; if rounding leaves the N-th
/// crossing just short, the near-complete residual (≥ 0.5 by construction)
/// is emitted as the final prompt. Either way exactly N rows come back.
pub fn teacher_forced_prompts(payload_rows: &Tensor, scaled_alpha: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(PipelineError::Config(
            "teacher forcing needs at least one target prompt".to_string(),
        ));
    }
    let t_len = payload_rows.rows();
    let c = payload_rows.cols();
    if scaled_alpha.numel() != t_len {
        return Err(PipelineError::Config(format!(
            "cif: {} weights for {} frames",
            scaled_alpha.numel(),
            t_len
        )));
    }
    // All running scalars are [1, 1] to match rows narrowed from the [T, 1]
    // weight column.
    let one = Tensor::from_vec(vec![1.0], &[1, 1])?;
    let mut accum_f = 0.0;
    let mut accum_g = Tensor::zeros(&[1, 1]);
    let mut carry_g = Tensor::zeros(&[1, c]);
    let mut fired: Vec<Tensor> = Vec::with_capacity(n);
    for t in 0..t_len {
        let row = payload_rows.narrow_rows(t, 1)?;
        let mut a_f = scaled_alpha.data()[t];
        let mut a_g = scaled_alpha.narrow_rows(t, 1)?;
        loop {
            if accum_f + a_f < 1.0 {
                carry_g = carry_g.add(&row.scale_by(&a_g)?)?;
                accum_g = accum_g.add(&a_g)?;
                accum_f += a_f;
                break;
            }
            let take = one.sub(&accum_g)?;
            fired.push(carry_g.add(&row.scale_by(&take)?)?);
            a_g = a_g.sub(&take)?;
            a_f -= 1.0 - accum_f;
            accum_f = 0.0;
            accum_g = Tensor::zeros(&[1, 1]);
            carry_g = Tensor::zeros(&[1, c]);
        }
    }
    if fired.len() + 1 == n && accum_f >= 0.5 {
        // The last threshold crossing fell victim to rounding; the residual
        // integration is a complete prompt in all but the last few ulps.
        fired.push(carry_g);
    }
    if fired.len() != n {
        return Err(PipelineError::Numeric(format!(
            "cif: teacher forcing fired {} prompts, expected {}",
            fired.len(),
            n
        )));
    }
    Ok(tinytensor::concat_rows(&fired)?)
}

/// Project prompt rows `[N, d-1]` to the LM embedding width.
pub fn project_prompts(v: &ModelView, prompts: &Tensor) -> Result<Tensor> {
    Ok(prompts
        .matmul(v.p.get("cif.proj.w"))?
        .add_bias(v.p.get("cif.proj.b"))?)
}
