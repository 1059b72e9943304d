//! Speech-unit generation: a causal transformer over upsampled LM hidden
//! states with a CTC output head, plus the incremental prefix beam search
//! that turns per-frame unit distributions into a committed unit sequence.
//!
//! Each committed text token contributes `U` generator frames (its fused
//! hidden state repeated, plus a per-slot position embedding). The
//! transformer is causal, so appending a token's window never changes the
//! frames of earlier windows — incremental decoding recomputes and slices,
//! bit-identical to one offline pass.

use std::collections::HashMap;

use crate::error::{PipelineError, Result};
use crate::model::ModelView;
use crate::Tensor;

/// CTC blank symbol; real units use ids `1..=unit_vocab`.
pub const BLANK: usize = 0;

/// Log-probabilities `[L·U, unit_vocab+1]` for `L` fused hidden rows.
/// Training calls this with graph tensors; inference with constants.
pub fn unit_logprobs(v: &ModelView, fused: &Tensor) -> Result<Tensor> {
    let l = fused.rows();
    if l == 0 {
        return Err(PipelineError::Data(
            "unit generation needs at least one token".to_string(),
        ));
    }
    if fused.cols() != v.cfg.lm_d_model {
        return Err(PipelineError::Config(format!(
            "fused width {} != LM width {}",
            fused.cols(),
            v.cfg.lm_d_model
        )));
    }
    let x = fused
        .matmul(v.p.get("gen.in.w"))?
        .add_bias(v.p.get("gen.in.b"))?;
    let mut x = x.repeat_rows(v.cfg.upsample)?;
    // Tile the per-slot position table over all L windows. Listing the same
    // parent L times is fine: gradient contributions accumulate per node.
    let pos = v.p.get("gen.pos");
    let tiled = tinytensor::concat_rows(&vec![pos.clone(); l])?;
    x = x.add(&tiled)?;
    let mask = tinytensor::AttnMask::causal(l * v.cfg.upsample);
    for layer in 0..v.cfg.gen_layers {
        x = crate::layers::transformer_layer(
            &x,
            &mask,
            &v.p,
            &format!("gen.l{layer}"),
            v.cfg.gen_heads,
        )?;
    }
    let x = crate::layers::final_norm(&x, &v.p, "gen")?;
    let logits = x
        .matmul(v.p.get("gen.head.w"))?
        .add_bias(v.p.get("gen.head.b"))?;
    Ok(logits.log_softmax(1)?)
}

/// The newest token's window: the last `U` rows of [`unit_logprobs`] over
/// all fused rows committed so far, as plain vectors.
pub fn latest_window(v: &ModelView, fused_rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let l = fused_rows.len();
    let d = v.cfg.lm_d_model;
    let flat: Vec<f64> = fused_rows.iter().flat_map(|r| r.iter().copied()).collect();
    let fused = Tensor::from_vec(flat, &[l, d])?;
    let lp = unit_logprobs(v, &fused)?;
    let w = lp.cols();
    let start = (l - 1) * v.cfg.upsample;
    Ok((start..l * v.cfg.upsample)
        .map(|r| lp.data()[r * w..(r + 1) * w].to_vec())
        .collect())
}

/// External language model interface for shallow fusion: natural-log
/// probability of `unit` following `context`.
pub trait UnitLm {
    fn logprob(&self, context: &[usize], unit: usize) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct CtcDecoderConfig {
    pub beam_width: usize,
    /// Weight on the fusion LM, applied once per emitted unit.
    pub lm_weight: f64,
}

impl Default for CtcDecoderConfig {
    fn default() -> Self {
        CtcDecoderConfig {
            beam_width: 10,
            lm_weight: 0.5,
        }
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone)]
struct Beam {
    seq: Vec<usize>,
    /// Log-probability mass of alignments producing `seq` and ending blank.
    p_b: f64,
    /// ... and ending with the last unit of `seq`.
    p_nb: f64,
}

impl Beam {
    fn score(&self) -> f64 {
        lse2(self.p_b, self.p_nb)
    }
}

/// Incremental CTC prefix beam search. State persists across windows: a unit
/// continuing over a window boundary still collapses, and a window boundary
/// with a blank in between still separates repeats.
///
/// Width 1 switches to greedy best-path decoding (argmax per frame, then
/// collapse): approximating a marginal argmax with a single prefix is
/// strictly worse than following the best alignment path.
#[derive(Debug, Clone)]
pub struct CtcDecoder {
    cfg: CtcDecoderConfig,
    beams: Vec<Beam>,
    /// Greedy mode: the previous frame's argmax symbol (blank included).
    greedy_prev: usize,
    greedy_seq: Vec<usize>,
    committed: usize,
}

impl CtcDecoder {
    pub fn new(cfg: CtcDecoderConfig) -> Self {
        CtcDecoder {
            cfg,
            beams: vec![Beam {
                seq: Vec::new(),
                p_b: 0.0,
                p_nb: f64::NEG_INFINITY,
            }],
            greedy_prev: BLANK,
            greedy_seq: Vec::new(),
            committed: 0,
        }
    }

    /// Consume one window of per-frame unit log-probabilities.
    pub fn process_window(
        &mut self,
        window: &[Vec<f64>],
        lm: Option<&dyn UnitLm>,
    ) -> Result<()> {
        if self.cfg.beam_width == 0 {
            return Err(PipelineError::Config("beam width must be >= 1".to_string()));
        }
        for row in window {
            if row.len() < 2 {
                return Err(PipelineError::Config(
                    "CTC rows need blank plus at least one unit".to_string(),
                ));
            }
            if self.cfg.beam_width == 1 {
                self.greedy_frame(row);
            } else {
                self.beam_frame(row, lm);
            }
        }
        Ok(())
    }

    fn greedy_frame(&mut self, row: &[f64]) {
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        if best != BLANK && best != self.greedy_prev {
            self.greedy_seq.push(best);
        }
        self.greedy_prev = best;
    }

    fn beam_frame(&mut self, row: &[f64], lm: Option<&dyn UnitLm>) {
        let mut next: HashMap<Vec<usize>, Beam> = HashMap::new();
        let bump = |seq: &Vec<usize>, blank: bool, mass: f64, map: &mut HashMap<Vec<usize>, Beam>| {
            let e = map.entry(seq.clone()).or_insert_with(|| Beam {
                seq: seq.clone(),
                p_b: f64::NEG_INFINITY,
                p_nb: f64::NEG_INFINITY,
            });
            if blank {
                e.p_b = lse2(e.p_b, mass);
            } else {
                e.p_nb = lse2(e.p_nb, mass);
            }
        };
        for beam in &self.beams {
            let total = beam.score();
            // Blank keeps the prefix and separates repeats.
            bump(&beam.seq, true, total + row[BLANK], &mut next);
            // The last unit continuing its emission: collapses, no growth.
            if let Some(&last) = beam.seq.last() {
                bump(&beam.seq, false, beam.p_nb + row[last], &mut next);
            }
            // The fusion LM speaks unit space (labels shifted off blank).
            let ctx = labels_to_units(&beam.seq);
            // Extensions grow the prefix and pay the fusion LM once.
            for u in 1..row.len() {
                let base = if beam.seq.last() == Some(&u) {
                    // Same unit again only counts as new if a blank
                    // intervened.
                    beam.p_b
                } else {
                    total
                };
                if base == f64::NEG_INFINITY {
                    continue;
                }
                let mut mass = base + row[u];
                if let Some(lm) = lm {
                    mass += self.cfg.lm_weight * lm.logprob(&ctx, u - 1);
                }
                let mut seq = beam.seq.clone();
                seq.push(u);
                bump(&seq, false, mass, &mut next);
            }
        }
        let mut beams: Vec<Beam> = next.into_values().collect();
        beams.sort_by(|a, b| {
            b.score()
                .partial_cmp(&a.score())
                .unwrap()
                .then_with(|| a.seq.cmp(&b.seq))
        });
        beams.truncate(self.cfg.beam_width);
        self.beams = beams;
    }

    fn best_seq(&self) -> &[usize] {
        if self.cfg.beam_width == 1 {
            &self.greedy_seq
        } else {
            &self.beams[0].seq
        }
    }

    /// Collapsed output so far (0-based units), committed or not.
    pub fn current_best(&self) -> Vec<usize> {
        labels_to_units(self.best_seq())
    }

    /// Every live hypothesis as (units, score), best first. A hypothesis
    /// score is the log CTC marginal of its collapsed sequence plus the
    /// weighted fusion-LM total. Greedy mode (width 1) follows a single
    /// alignment path and has no marginal, so it reports nothing.
    pub fn hypotheses(&self) -> Vec<(Vec<usize>, f64)> {
        if self.cfg.beam_width == 1 {
            return Vec::new();
        }
        self.beams
            .iter()
            .map(|b| (labels_to_units(&b.seq), b.score()))
            .collect()
    }

    /// Window-end commitment: prune to the single best hypothesis and return
    /// the units that became final since the last commit.
    pub fn commit(&mut self) -> Vec<usize> {
        if self.cfg.beam_width > 1 {
            self.beams.truncate(1);
        }
        let seq = self.best_seq();
        let new = labels_to_units(&seq[self.committed..]);
        self.committed = seq.len();
        new
    }

    /// Final flush: no pruning, just report the best hypothesis's remaining
    /// units. The decoder is exhausted afterwards.
    pub fn finish(&mut self) -> Vec<usize> {
        let seq = self.best_seq();
        let new = labels_to_units(&seq[self.committed..]);
        self.committed = seq.len();
        new
    }
}

/// CTC label space keeps 0 for blank and `1..=V` for units; everything the
/// decoder reports (and every fusion-LM query) uses dataset units `0..V`.
fn labels_to_units(labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|&l| l - 1).collect()
}

/// Best-path decode of a whole log-probability matrix: argmax per row, then
/// collapse repeats and drop blanks.
pub fn greedy_decode(rows: &[Vec<f64>]) -> Vec<usize> {
    let mut decoder = CtcDecoder::new(CtcDecoderConfig {
        beam_width: 1,
        lm_weight: 0.0,
    });
    decoder.process_window(rows, None).expect("greedy decode");
    decoder.finish()
}
