//! Decoder-only causal LM over the layout
//! `[prefix text][speech prompts][postfix text][generated text]`.
//!
//! The KV cache tracks that layout with contiguous absolute positions.
//! Inserting prompts mid-session shifts the positions of everything after
//! the prompt slot, so the cache drops the affected rows and recomputes them
//! — the contract is exact agreement with a from-scratch pass over the new
//! layout, and the recomputation path is numerically identical to the batch
//! path by construction.

use tinytensor::AttnMask;

use crate::error::{PipelineError, Result};
use crate::layers::multi_head_attention;
use crate::model::{ModelView, EOS};
use crate::Tensor;

/// Incremental decoding state for one session.
#[derive(Debug, Clone)]
pub struct KvCache {
    /// Raw input embedding per layout position (before position encoding).
    embeds: Vec<Vec<f64>>,
    prefix_len: usize,
    prompt_len: usize,
    gen_len: usize,
    /// Per-layer cached key/value rows, flattened `[pos, d]`.
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Logits predicted from the last layout entry.
    last_logits: Vec<f64>,
    finalized: bool,
}

/// Output of one incremental step: next-token logits and the per-layer
/// hidden states of the consumed position.
pub struct StepOut {
    pub logits: Vec<f64>,
    pub hiddens: Vec<Vec<f64>>,
}

impl KvCache {
    /// Seed the cache with the template: prefix followed by (empty prompt
    /// slot and) postfix.
    pub fn new(v: &ModelView) -> Result<Self> {
        let mut cache = KvCache {
            embeds: Vec::new(),
            prefix_len: v.cfg.prefix_ids.len(),
            prompt_len: 0,
            gen_len: 0,
            k: vec![Vec::new(); v.cfg.lm_layers],
            v: vec![Vec::new(); v.cfg.lm_layers],
            last_logits: Vec::new(),
            finalized: false,
        };
        for &id in v.cfg.prefix_ids.iter().chain(&v.cfg.postfix_ids) {
            cache.embeds.push(token_embedding(v, id)?);
        }
        cache.recompute_from(v, 0)?;
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.embeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeds.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn generated_len(&self) -> usize {
        self.gen_len
    }

    /// Logits for the next token, as of the latest entry.
    pub fn last_logits(&self) -> &[f64] {
        &self.last_logits
    }

    /// Mark the source as fully read; later prompt insertions are rejected.
    pub fn mark_final(&mut self) {
        self.finalized = true;
    }

    /// Insert prompt embeddings (LM width) at the end of the prompt slot and
    /// restore the shifted suffix. A no-op for an empty batch.
    pub fn extend_prompt(&mut self, v: &ModelView, prompts: &[Vec<f64>]) -> Result<()> {
        if prompts.is_empty() {
            return Ok(());
        }
        if self.finalized {
            return Err(PipelineError::Data(
                "prompt insertion after the final chunk".to_string(),
            ));
        }
        let at = self.prefix_len + self.prompt_len;
        for (i, p) in prompts.iter().enumerate() {
            if p.len() != v.cfg.lm_d_model {
                return Err(PipelineError::Config(format!(
                    "prompt embedding width {} != LM width {}",
                    p.len(),
                    v.cfg.lm_d_model
                )));
            }
            self.embeds.insert(at + i, p.clone());
        }
        self.prompt_len += prompts.len();
        self.recompute_from(v, at)
    }

    /// Append a generated token and return its logits and hidden states.
    pub fn step(&mut self, v: &ModelView, token: usize) -> Result<StepOut> {
        self.embeds.push(token_embedding(v, token)?);
        self.gen_len += 1;
        let pos = self.embeds.len() - 1;
        self.truncate_layers(pos);
        self.forward_pos(v, pos)
    }

    /// Drop cached rows at and after `pos`, then rebuild them in order.
    fn recompute_from(&mut self, v: &ModelView, pos: usize) -> Result<()> {
        self.truncate_layers(pos);
        for p in pos..self.embeds.len() {
            let out = self.forward_pos(v, p)?;
            self.last_logits = out.logits;
        }
        Ok(())
    }

    fn truncate_layers(&mut self, pos: usize) {
        let d_model = self.embeds.first().map(|e| e.len()).unwrap_or(0);
        for buf in self.k.iter_mut().chain(self.v.iter_mut()) {
            buf.truncate(pos * d_model);
        }
    }

    /// Run one layout position through every layer, appending its K/V rows.
    fn forward_pos(&mut self, v: &ModelView, pos: usize) -> Result<StepOut> {
        let d = v.cfg.lm_d_model;
        if pos >= v.cfg.max_positions {
            return Err(PipelineError::Data(format!(
                "decoder layout length {} exceeds max_positions {}",
                pos + 1,
                v.cfg.max_positions
            )));
        }
        let emb = Tensor::from_vec(self.embeds[pos].clone(), &[1, d])?;
        let pos_row = v.p.get("lm.pos").narrow_rows(pos, 1)?;
        let mut x = emb.add(&pos_row)?;
        let mut hiddens = Vec::with_capacity(v.cfg.lm_layers);
        for l in 0..v.cfg.lm_layers {
            let pre = format!("lm.l{l}");
            let xn = x.layer_norm(
                v.p.get(&format!("{pre}.ln1.g")),
                v.p.get(&format!("{pre}.ln1.b")),
            )?;
            let q = xn.matmul(v.p.get(&format!("{pre}.att.wq")))?;
            let k_new = xn.matmul(v.p.get(&format!("{pre}.att.wk")))?;
            let v_new = xn.matmul(v.p.get(&format!("{pre}.att.wv")))?;
            debug_assert_eq!(self.k[l].len(), pos * d, "cache rows out of sync");
            self.k[l].extend_from_slice(k_new.data());
            self.v[l].extend_from_slice(v_new.data());
            let keys = Tensor::from_vec(self.k[l].clone(), &[pos + 1, d])?;
            let vals = Tensor::from_vec(self.v[l].clone(), &[pos + 1, d])?;
            let att = multi_head_attention(
                &q,
                &keys,
                &vals,
                &AttnMask::full(1, pos + 1),
                v.cfg.lm_heads,
            )?;
            x = x.add(&att.matmul(v.p.get(&format!("{pre}.att.wo")))?)?;
            let xn = x.layer_norm(
                v.p.get(&format!("{pre}.ln2.g")),
                v.p.get(&format!("{pre}.ln2.b")),
            )?;
            let h = xn
                .matmul(v.p.get(&format!("{pre}.ffn.w1")))?
                .add_bias(v.p.get(&format!("{pre}.ffn.b1")))?
                .relu()?
                .matmul(v.p.get(&format!("{pre}.ffn.w2")))?
                .add_bias(v.p.get(&format!("{pre}.ffn.b2")))?;
            x = x.add(&h)?;
            hiddens.push(x.data().to_vec());
        }
        let xf = crate::layers::final_norm(&x, &v.p, "lm")?;
        let logits = xf
            .matmul(v.p.get("lm.head.w"))?
            .add_bias(v.p.get("lm.head.b"))?;
        let logits = logits.data().to_vec();
        self.last_logits = logits.clone();
        Ok(StepOut { logits, hiddens })
    }
}

/// Scaled embedding row for one text token.
pub fn token_embedding(v: &ModelView, token: usize) -> Result<Vec<f64>> {
    if token >= v.cfg.text_vocab {
        return Err(PipelineError::Data(format!(
            "text token {token} out of vocabulary ({})",
            v.cfg.text_vocab
        )));
    }
    Ok(v.p.get("lm.emb").narrow_rows(token, 1)?.data().to_vec())
}

/// Batched teacher-forcing forward over pre-position embeddings `[L, d]`.
/// Returns logits `[L, vocab]` and each layer's hidden matrix `[L, d]`.
pub fn forward_batch(v: &ModelView, embeds: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let len = embeds.rows();
    if len > v.cfg.max_positions {
        return Err(PipelineError::Data(format!(
            "sequence length {len} exceeds max_positions {}",
            v.cfg.max_positions
        )));
    }
    let pos = v.p.get("lm.pos").narrow_rows(0, len)?;
    let mut x = embeds.add(&pos)?;
    let mask = AttnMask::causal(len);
    let mut hiddens = Vec::with_capacity(v.cfg.lm_layers);
    for l in 0..v.cfg.lm_layers {
        x = crate::layers::transformer_layer(&x, &mask, &v.p, &format!("lm.l{l}"), v.cfg.lm_heads)?;
        hiddens.push(x.clone());
    }
    let xf = crate::layers::final_norm(&x, &v.p, "lm")?;
    let logits = xf
        .matmul(v.p.get("lm.head.w"))?
        .add_bias(v.p.get("lm.head.b"))?;
    Ok((logits, hiddens))
}

/// Eq.-style layer fusion: softmax-normalized weights over per-layer hidden
/// matrices (all `[L, d]`). Used with graph tensors in training and constant
/// tensors at inference.
pub fn fuse_hidden(beta: &Tensor, hiddens: &[Tensor]) -> Result<Tensor> {
    if hiddens.is_empty() {
        return Err(PipelineError::Config("fusion needs at least one layer".to_string()));
    }
    if beta.numel() != hiddens.len() {
        return Err(PipelineError::Config(format!(
            "{} fusion weights for {} layers",
            beta.numel(),
            hiddens.len()
        )));
    }
    let w = beta.softmax(0)?;
    let mut fused = hiddens[0].scale_by(&w.narrow_rows(0, 1)?)?;
    for (m, h) in hiddens.iter().enumerate().skip(1) {
        fused = fused.add(&h.scale_by(&w.narrow_rows(m, 1)?)?)?;
    }
    Ok(fused)
}

/// Fuse one step's per-layer hidden rows with the model's β at inference.
pub fn fuse_step(v: &ModelView, hiddens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = hiddens[0].len();
    let rows: Vec<Tensor> = hiddens
        .iter()
        .map(|h| Tensor::from_vec(h.clone(), &[1, d]))
        .collect::<tinytensor::Result<_>>()?;
    let fused = fuse_hidden(v.p.get("fuse.beta"), &rows)?;
    Ok(fused.data().to_vec())
}

/// Result of a generation call: committed tokens (EOS excluded), the fused
/// hidden state per token, and whether EOS ended generation.
pub struct GenOut {
    pub tokens: Vec<usize>,
    pub fused: Vec<Vec<f64>>,
    pub hit_eos: bool,
}

struct Hyp {
    cache: KvCache,
    tokens: Vec<usize>,
    fused: Vec<Vec<f64>>,
    score: f64,
    done: bool,
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    let lz = z.ln() + m;
    logits.iter().map(|&x| x - lz).collect()
}

/// Beam search continuing from `cache`. Stops after `max_steps` tokens or
/// when every hypothesis has emitted EOS. The winning hypothesis replaces
/// `cache` (top-1 pruning) and its tokens are final.
fn beam_generate(
    cache: &mut KvCache,
    v: &ModelView,
    max_steps: usize,
    beam_width: usize,
) -> Result<GenOut> {
    if max_steps == 0 || beam_width == 0 {
        return Err(PipelineError::Config(
            "generation needs max_steps >= 1 and beam >= 1".to_string(),
        ));
    }
    let mut hyps = vec![Hyp {
        cache: cache.clone(),
        tokens: Vec::new(),
        fused: Vec::new(),
        score: 0.0,
        done: false,
    }];
    for _ in 0..max_steps {
        if hyps.iter().all(|h| h.done) {
            break;
        }
        let mut next: Vec<Hyp> = Vec::new();
        for hyp in hyps {
            if hyp.done {
                next.push(hyp);
                continue;
            }
            let lp = log_softmax_row(hyp.cache.last_logits());
            let mut ranked: Vec<usize> = (0..lp.len()).collect();
            ranked.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
            for &tok in ranked.iter().take(beam_width) {
                let mut child = Hyp {
                    cache: hyp.cache.clone(),
                    tokens: hyp.tokens.clone(),
                    fused: hyp.fused.clone(),
                    score: hyp.score + lp[tok],
                    done: false,
                };
                if tok == EOS {
                    child.done = true;
                } else {
                    let out = child.cache.step(v, tok)?;
                    child.tokens.push(tok);
                    child.fused.push(fuse_step(v, &out.hiddens)?);
                }
                next.push(child);
            }
        }
        // Deterministic ranking: score first, then token sequence.
        next.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        next.truncate(beam_width);
        hyps = next;
    }
    let winner = hyps.swap_remove(0);
    *cache = winner.cache;
    Ok(GenOut {
        tokens: winner.tokens,
        fused: winner.fused,
        hit_eos: winner.done,
    })
}

/// Wait-k constrained generation: up to `l_gen` tokens this chunk.
pub fn generate_constrained(
    cache: &mut KvCache,
    v: &ModelView,
    l_gen: usize,
    beam_width: usize,
) -> Result<GenOut> {
    beam_generate(cache, v, l_gen, beam_width)
}

/// Tail generation once the source is fully read: run to EOS or `l_max`.
pub fn tail_generate(
    cache: &mut KvCache,
    v: &ModelView,
    l_max: usize,
    beam_width: usize,
) -> Result<GenOut> {
    beam_generate(cache, v, l_max, beam_width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> Model {
        let cfg = ModelConfig {
            lm_d_model: 16,
            lm_layers: 2,
            lm_heads: 2,
            text_vocab: 8,
            max_positions: 32,
            ..ModelConfig::default()
        };
        Model::new(cfg, 31).unwrap()
    }

    fn rand_prompt(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn empty_cache_plus_token_gives_logits() {
        let model = toy_model();
        let bind = model.params.bind(&[]);
        let v = model.view(&bind);
        let mut cache = KvCache::new(&v).unwrap();
        assert_eq!(cache.last_logits().len(), 8);
        let out = cache.step(&v, 3).unwrap();
        assert_eq!(out.logits.len(), 8);
        assert_eq!(out.hiddens.len(), 2);
        assert!(out.logits.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn incremental_steps_match_batch_forward() {
        let model = toy_model();
        let bind = model.params.bind(&[]);
        let v = model.view(&bind);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let prompts: Vec<Vec<f64>> = (0..3).map(|_| rand_prompt(&mut rng, 16)).collect();

        let mut cache = KvCache::new(&v).unwrap();
        cache.extend_prompt(&v, &prompts).unwrap();
        let tokens = [4usize, 6, 3];
        let mut inc_logits = vec![cache.last_logits().to_vec()];
        for &t in &tokens {
            let out = cache.step(&v, t).unwrap();
            inc_logits.push(out.logits);
        }

        // Batch layout: prefix, prompts, postfix, generated.
        let emb = v.p.get("lm.emb");
        let mut rows: Vec<Tensor> = Vec::new();
        for &id in &model.cfg.prefix_ids {
            rows.push(emb.narrow_rows(id, 1).unwrap());
        }
        for p in &prompts {
            rows.push(Tensor::from_vec(p.clone(), &[1, 16]).unwrap());
        }
        for &id in &model.cfg.postfix_ids {
            rows.push(emb.narrow_rows(id, 1).unwrap());
        }
        for &t in &tokens {
            rows.push(emb.narrow_rows(t, 1).unwrap());
        }
        let embeds = tinytensor::concat_rows(&rows).unwrap();
        let (logits, _) = forward_batch(&v, &embeds).unwrap();
        // Logits after the postfix and after each generated token.
        let base = model.cfg.prefix_ids.len() + 3 + model.cfg.postfix_ids.len();
        for (i, got) in inc_logits.iter().enumerate() {
            let row = base - 1 + i;
            for c in 0..8 {
                let want = logits.get2(row, c);
                assert!(
                    (got[c] - want).abs() < 1e-9,
                    "step {i} logit {c}: {} vs {}",
                    got[c],
                    want
                );
            }
        }
    }

    #[test]
    fn insertion_equals_scratch_decode() {
        let model = toy_model();
        let bind = model.params.bind(&[]);
        let v = model.view(&bind);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p1: Vec<Vec<f64>> = (0..2).map(|_| rand_prompt(&mut rng, 16)).collect();
        let p2: Vec<Vec<f64>> = (0..1).map(|_| rand_prompt(&mut rng, 16)).collect();

        // Interleaved: insert, decode, insert again, decode.
        let mut live = KvCache::new(&v).unwrap();
        live.extend_prompt(&v, &p1).unwrap();
        live.step(&v, 5).unwrap();
        live.extend_prompt(&v, &p2).unwrap();
        live.step(&v, 7).unwrap();

        // Scratch: all prompts up front, then the generated tokens.
        let mut scratch = KvCache::new(&v).unwrap();
        let all: Vec<Vec<f64>> = p1.iter().chain(&p2).cloned().collect();
        scratch.extend_prompt(&v, &all).unwrap();
        scratch.step(&v, 5).unwrap();
        scratch.step(&v, 7).unwrap();

        for (a, b) in live.last_logits().iter().zip(scratch.last_logits()) {
            assert!((a - b).abs() < 1e-9);
        }

        // Two single insertions == one double insertion.
        let mut split = KvCache::new(&v).unwrap();
        split.extend_prompt(&v, &p1[..1].to_vec()).unwrap();
        split.extend_prompt(&v, &p1[1..].to_vec()).unwrap();
        let mut joint = KvCache::new(&v).unwrap();
        joint.extend_prompt(&v, &p1).unwrap();
        for (a, b) in split.last_logits().iter().zip(joint.last_logits()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_insertion_is_identity_and_final_blocks() {
        let model = toy_model();
        let bind = model.params.bind(&[]);
        let v = model.view(&bind);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut cache = KvCache::new(&v).unwrap();
        let before = cache.last_logits().to_vec();
        cache.extend_prompt(&v, &[]).unwrap();
        assert_eq!(cache.last_logits(), &before[..]);

        cache.mark_final();
        let p = vec![rand_prompt(&mut rng, 16)];
        assert!(cache.extend_prompt(&v, &p).is_err());
        // But empty insertions stay fine after Final.
        assert!(cache.extend_prompt(&v, &[]).is_ok());
    }

    #[test]
    fn fusion_one_hot_and_uniform() {
        let h1 = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let h2 = Tensor::from_vec(vec![5.0, 6.0], &[1, 2]).unwrap();
        // Strong one-hot weight on layer 2.
        let beta = Tensor::from_vec(vec![-60.0, 60.0], &[2]).unwrap();
        let fused = fuse_hidden(&beta, &[h1.clone(), h2.clone()]).unwrap();
        assert!((fused.data()[0] - 5.0).abs() < 1e-12);
        // Uniform weights average the layers.
        let beta = Tensor::from_vec(vec![0.3, 0.3], &[2]).unwrap();
        let fused = fuse_hidden(&beta, &[h1, h2]).unwrap();
        assert!((fused.data()[0] - 3.0).abs() < 1e-12);
        assert!((fused.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_is_shift_invariant() {
        // softmax normalization: adding a constant to all raw weights leaves
        // the fused output unchanged.
        let h: Vec<Tensor> = (0..3)
            .map(|i| Tensor::from_vec(vec![i as f64, 1.0 - i as f64], &[1, 2]).unwrap())
            .collect();
        let b1 = Tensor::from_vec(vec![0.1, 0.7, -0.2], &[3]).unwrap();
        let b2 = Tensor::from_vec(vec![5.1, 5.7, 4.8], &[3]).unwrap();
        let f1 = fuse_hidden(&b1, &h).unwrap();
        let f2 = fuse_hidden(&b2, &h).unwrap();
        for (a, b) in f1.data().iter().zip(f2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let model = toy_model();
        let bind = model.params.bind(&[]);
        let v = model.view(&bind);
        let mut beam_cache = KvCache::new(&v).unwrap();
        let out = generate_constrained(&mut beam_cache, &v, 4, 1).unwrap();

        let mut greedy_cache = KvCache::new(&v).unwrap();
        let mut greedy = Vec::new();
        for _ in 0..4 {
            let lp = log_softmax_row(greedy_cache.last_logits());
            let best = (0..lp.len())
                .max_by(|&a, &b| lp[a].partial_cmp(&lp[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            if best == EOS {
                break;
            }
            greedy.push(best);
            greedy_cache.step(&v, best).unwrap();
        }
        assert_eq!(out.tokens, greedy);
    }

    #[test]
    fn full_width_beam_matches_exhaustive_search() {
        let model = toy_model();
        let bind = model.params.bind(&[]);
        let v = model.view(&bind);
        let vocab = model.cfg.text_vocab;

        let mut cache = KvCache::new(&v).unwrap();
        let out = generate_constrained(&mut cache, &v, 2, vocab).unwrap();

        // Enumerate every length-<=2 candidate (EOS truncates) and score it.
        let mut best_score = f64::NEG_INFINITY;
        let mut best: Vec<usize> = Vec::new();
        for t1 in 0..vocab {
            let base = KvCache::new(&v).unwrap();
            let lp1 = log_softmax_row(base.last_logits());
            if t1 == EOS {
                if lp1[t1] > best_score {
                    best_score = lp1[t1];
                    best = vec![];
                }
                continue;
            }
            let mut c1 = base.clone();
            c1.step(&v, t1).unwrap();
            let lp2 = log_softmax_row(c1.last_logits());
            for t2 in 0..vocab {
                let score = lp1[t1] + lp2[t2];
                let seq = if t2 == EOS { vec![t1] } else { vec![t1, t2] };
                if score > best_score + 1e-15 {
                    best_score = score;
                    best = seq;
                }
            }
        }
        assert_eq!(out.tokens, best);
    }

    #[test]
    fn generation_is_deterministic() {
        let model = toy_model();
        let bind = model.params.bind(&[]);
        let v = model.view(&bind);
        let run = || {
            let mut cache = KvCache::new(&v).unwrap();
            generate_constrained(&mut cache, &v, 5, 3).unwrap().tokens
        };
        assert_eq!(run(), run());
    }
}
