//! Chunk-masked streaming transformer encoder.
//!
//! Every output frame attends to all frames in its own chunk and every
//! earlier chunk. That mask makes each output row independent of later
//! chunks, so streaming is implemented as recompute-and-slice: the state
//! caches raw input frames, re-encodes the whole prefix per chunk, and
//! returns the new rows. The concatenated streaming output therefore equals
//! the offline encoding exactly — the contract the rest of the pipeline
//! leans on.

use tinytensor::AttnMask;

use crate::error::{PipelineError, Result};
use crate::layers::{final_norm, sinusoidal_positions, transformer_layer};
use crate::model::ModelView;
use crate::Tensor;

/// Attention mask where query `t` may see key `s` iff `chunk(s) <= chunk(t)`.
pub fn chunk_mask(t: usize, chunk_frames: usize) -> AttnMask {
    AttnMask::new(t, t, |q, k| k / chunk_frames <= q / chunk_frames)
}

/// Encode `[T, d_in]` feature frames into `[T, enc_d_model]` states.
pub fn encode_offline(v: &ModelView, frames: &Tensor) -> Result<Tensor> {
    if frames.rows() == 0 {
        return Err(PipelineError::Data("encoder: empty input".to_string()));
    }
    if frames.cols() != v.cfg.d_in {
        return Err(PipelineError::Data(format!(
            "encoder: frames have width {}, config says {}",
            frames.cols(),
            v.cfg.d_in
        )));
    }
    let t = frames.rows();
    let mut x = frames
        .matmul(v.p.get("enc.in.w"))?
        .add_bias(v.p.get("enc.in.b"))?;
    x = x.add(&sinusoidal_positions(t, v.cfg.enc_d_model, 0))?;
    let mask = chunk_mask(t, v.cfg.chunk_frames);
    for l in 0..v.cfg.enc_layers {
        x = transformer_layer(&x, &mask, &v.p, &format!("enc.l{l}"), v.cfg.enc_heads)?;
    }
    final_norm(&x, &v.p, "enc")
}

/// Streaming encoder session: accumulates input chunks and yields the newly
/// encoded rows for each.
#[derive(Debug, Clone, Default)]
pub struct EncoderState {
    frames: Vec<f64>,
    n_frames: usize,
    chunks_done: usize,
    finished: bool,
}

impl EncoderState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frames_seen(&self) -> usize {
        self.n_frames
    }

    pub fn chunks_done(&self) -> usize {
        self.chunks_done
    }

    /// Feed the next chunk (`[c, d_in]`); returns that chunk's encoder
    /// output rows. Only a `is_final` chunk may be shorter than the
    /// configured chunk size.
    pub fn push_chunk(&mut self, v: &ModelView, chunk: &Tensor, is_final: bool) -> Result<Tensor> {
        if self.finished {
            return Err(PipelineError::Data(
                "encoder: chunk pushed after the final chunk".to_string(),
            ));
        }
        let c = chunk.rows();
        if c == 0 {
            return Err(PipelineError::Data("encoder: empty chunk".to_string()));
        }
        if c != v.cfg.chunk_frames && !is_final {
            return Err(PipelineError::Data(format!(
                "encoder: partial chunk of {c} frames without the final flag"
            )));
        }
        if c > v.cfg.chunk_frames {
            return Err(PipelineError::Data(format!(
                "encoder: chunk of {c} frames exceeds chunk size {}",
                v.cfg.chunk_frames
            )));
        }
        self.frames.extend_from_slice(chunk.data());
        let start = self.n_frames;
        self.n_frames += c;
        self.chunks_done += 1;
        self.finished = is_final;
        let all = Tensor::from_vec(self.frames.clone(), &[self.n_frames, v.cfg.d_in])?;
        let encoded = encode_offline(v, &all)?;
        Ok(encoded.narrow_rows(start, c)?)
    }
}

/// Group every `group` consecutive rows of `[T, d]` into one `[group*d]` row,
/// zero-padding the tail group. Differentiable (used by stage-1 training of
/// the baseline).
pub fn stack_downsample(frames: &Tensor, group: usize) -> Result<Tensor> {
    let (t, d) = (frames.rows(), frames.cols());
    if t == 0 {
        return Err(PipelineError::Data("stack_downsample: empty input".to_string()));
    }
    let groups = t.div_ceil(group);
    let padded = if groups * group == t {
        frames.clone()
    } else {
        let pad = Tensor::zeros(&[groups * group - t, d]);
        tinytensor::concat_rows(&[frames.clone(), pad])?
    };
    // Row-major reshape concatenates each group's rows into one wide row.
    Ok(padded.reshape(&[groups, group * d])?)
}
