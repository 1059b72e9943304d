//! Two-stage training.
//!
//! Stage 1 teacher-forces the text path: the full offline speech prompt is
//! prepended and the decoder is trained with cross-entropy plus a weighted
//! quantity term that calibrates the boundary predictor. Stage 2 freezes
//! everything but the layer-fusion weights and the speech generator, and
//! trains them under CTC against the reference unit sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tinytensor::{backward, concat_rows, ctc_loss, min_frames, Adam, AdamConfig};

use crate::cif;
use crate::data::Dataset;
use crate::decoder_lm::{forward_batch, fuse_hidden};
use crate::encoder::{encode_offline, stack_downsample};
use crate::error::{PipelineError, Result};
use crate::model::{
    Model, ModelView, EOS, STAGE1_SCOPES_CIF, STAGE1_SCOPES_STACK, STAGE2_SCOPES, TEXT_BASE,
};
use crate::scheduler::PromptMode;
use crate::speech_generator::unit_logprobs;
use crate::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    /// Weight of the quantity term in stage 1.
    pub gamma: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub mode: PromptMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            gamma: 0.05,
            lr: 1e-3,
            steps: 200,
            batch: 4,
            seed: 13,
            mode: PromptMode::Cif,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(PipelineError::Config(format!("unknown stage {}", self.stage)));
        }
        if self.gamma < 0.0 {
            return Err(PipelineError::Config("gamma must be >= 0".to_string()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(PipelineError::Config("lr must be positive".to_string()));
        }
        if self.batch == 0 {
            return Err(PipelineError::Config("batch must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Per-step mean batch losses, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub losses: Vec<f64>,
}

impl TrainStats {
    pub fn first(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Teacher-forced diagnostics on a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherForcedReport {
    /// Fraction of correct next-token predictions (EOS position included).
    pub token_accuracy: f64,
    /// Mean relative boundary-count error `|Σα − N| / N`; None in stack mode.
    pub quantity_gap: Option<f64>,
}

fn check_compat(model: &Model, ds: &Dataset) -> Result<()> {
    let spec = &ds.meta.spec;
    if spec.d_in != model.cfg.d_in {
        return Err(PipelineError::Config(format!(
            "dataset frames are {}-dim, model wants {}",
            spec.d_in, model.cfg.d_in
        )));
    }
    if TEXT_BASE + spec.target_vocab > model.cfg.text_vocab {
        return Err(PipelineError::Config(format!(
            "target vocab {} + reserved tokens exceeds text vocab {}",
            spec.target_vocab, model.cfg.text_vocab
        )));
    }
    if spec.unit_vocab > model.cfg.unit_vocab {
        return Err(PipelineError::Config(format!(
            "dataset unit vocab {} exceeds model unit vocab {}",
            spec.unit_vocab, model.cfg.unit_vocab
        )));
    }
    Ok(())
}

/// Map dataset units to CTC labels (blank is 0, labels are shifted by one).
fn unit_labels(units: &[usize], unit_vocab: usize) -> Result<Vec<usize>> {
    units
        .iter()
        .map(|&u| {
            if u >= unit_vocab {
                Err(PipelineError::Data(format!(
                    "unit {u} out of vocabulary ({unit_vocab})"
                )))
            } else {
                Ok(u + 1)
            }
        })
        .collect()
}

/// Offline prompt matrix for teacher forcing, plus the raw quantity loss in
/// boundary-aware mode.
fn offline_prompts(
    v: &ModelView,
    enc: &Tensor,
    n_target: usize,
    mode: PromptMode,
) -> Result<(Tensor, Option<Tensor>)> {
    match mode {
        PromptMode::Cif => {
            let alpha = cif::alphas(enc)?;
            let qua = cif::quantity_loss(&alpha, n_target)?;
            let scaled = cif::scale_for_training(&alpha, n_target)?;
            let carry = cif::teacher_forced_prompts(&cif::payload(enc)?, &scaled, n_target)?;
            Ok((cif::project_prompts(v, &carry)?, Some(qua)))
        }
        PromptMode::Stack16 => {
            let stacked = stack_downsample(enc, v.cfg.stack_group)?;
            let p = stacked
                .matmul(v.p.get("stack.proj.w"))?
                .add_bias(v.p.get("stack.proj.b"))?;
            Ok((p, None))
        }
    }
}

/// Decoder input embeddings `[prefix][prompts][postfix][target]`, graph
/// intact through the prompt rows.
fn lm_input(v: &ModelView, prompts: &Tensor, target: &[usize]) -> Result<Tensor> {
    let emb = v.p.get("lm.emb");
    let mut parts = Vec::new();
    for &t in &v.cfg.prefix_ids {
        parts.push(emb.narrow_rows(t, 1)?);
    }
    parts.push(prompts.clone());
    for &t in &v.cfg.postfix_ids {
        parts.push(emb.narrow_rows(t, 1)?);
    }
    for &y in target {
        let tok = TEXT_BASE + y;
        if tok >= v.cfg.text_vocab {
            return Err(PipelineError::Data(format!(
                "target token {y} maps to {tok}, past text vocab {}",
                v.cfg.text_vocab
            )));
        }
        parts.push(emb.narrow_rows(tok, 1)?);
    }
    Ok(concat_rows(&parts)?)
}

fn prompt_span(v: &ModelView, prompts: &Tensor) -> usize {
    v.cfg.prefix_ids.len() + prompts.rows() + v.cfg.postfix_ids.len()
}

fn stage1_loss(
    v: &ModelView,
    frames: &Tensor,
    target: &[usize],
    gamma: f64,
    mode: PromptMode,
) -> Result<Tensor> {
    if target.is_empty() {
        return Err(PipelineError::Data("utterance has no target tokens".to_string()));
    }
    let enc = encode_offline(v, frames)?;
    let (prompts, qua) = offline_prompts(v, &enc, target.len(), mode)?;
    let embeds = lm_input(v, &prompts, target)?;
    let (logits, _) = forward_batch(v, &embeds)?;
    let pred = logits.narrow_rows(prompt_span(v, &prompts) - 1, target.len() + 1)?;
    let labels: Vec<usize> = target.iter().map(|&y| TEXT_BASE + y).chain([EOS]).collect();
    let ce = pred.cross_entropy(&labels)?;
    match qua {
        Some(q) => Ok(ce.add(&q.scale(gamma)?)?),
        None => Ok(ce),
    }
}

fn stage2_loss(
    v: &ModelView,
    frames: &Tensor,
    target: &[usize],
    units: &[usize],
    mode: PromptMode,
) -> Result<Tensor> {
    if target.is_empty() || units.is_empty() {
        return Err(PipelineError::Data("utterance has no targets".to_string()));
    }
    let enc = encode_offline(v, frames)?;
    let (prompts, _) = offline_prompts(v, &enc, target.len(), mode)?;
    let embeds = lm_input(v, &prompts, target)?;
    let (_, hiddens) = forward_batch(v, &embeds)?;
    // Hidden rows where the generated text tokens are the decoder input.
    let at = prompt_span(v, &prompts);
    let taken: Vec<Tensor> = hiddens
        .iter()
        .map(|h| h.narrow_rows(at, target.len()))
        .collect::<tinytensor::Result<_>>()?;
    let fused = fuse_hidden(v.p.get("fuse.beta"), &taken)?;
    let logp = unit_logprobs(v, &fused)?;
    let labels = unit_labels(units, v.cfg.unit_vocab)?;
    if min_frames(&labels) > logp.rows() {
        return Err(PipelineError::Data(format!(
            "{} generator frames cannot emit {} units; raise upsample",
            logp.rows(),
            labels.len()
        )));
    }
    Ok(ctc_loss(&logp, &labels)?)
}

fn run_training(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    scopes: &[&str],
    stage2: bool,
) -> Result<TrainStats> {
    cfg.validate()?;
    check_compat(model, ds)?;
    let frames: Vec<Tensor> = ds
        .utterances
        .iter()
        .map(|u| ds.load_frames(u))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.random_range(0..ds.utterances.len()))
            .collect();
        let bind = model.params.bind(scopes);
        let (loss_val, grad_opts) = {
            let v = model.view(&bind);
            let mut total: Option<Tensor> = None;
            for &i in &batch {
                let utt = &ds.utterances[i];
                let l = if stage2 {
                    stage2_loss(&v, &frames[i], &utt.target, &utt.units, cfg.mode)?
                } else {
                    stage1_loss(&v, &frames[i], &utt.target, cfg.gamma, cfg.mode)?
                };
                total = Some(match total {
                    Some(t) => t.add(&l)?,
                    None => l,
                });
            }
            let loss = total
                .expect("batch >= 1")
                .scale(1.0 / cfg.batch as f64)?;
            let grads = backward(&loss)?;
            (loss.data()[0], model.params.collect_grads(&bind, &grads))
        };
        if !loss_val.is_finite() {
            return Err(PipelineError::Numeric(format!("loss diverged to {loss_val}")));
        }
        let grad_refs: Vec<Option<&[f64]>> = grad_opts.iter().map(|g| g.as_deref()).collect();
        let mut slots = model.params.values_mut();
        opt.adam_step(&mut slots, &grad_refs)?;
        losses.push(loss_val);
    }
    Ok(TrainStats { losses })
}

/// Stage 1: CE + γ·quantity, training encoder, prompt projection, and LM.
pub fn train_stage1(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainStats> {
    let scopes = match cfg.mode {
        PromptMode::Cif => STAGE1_SCOPES_CIF,
        PromptMode::Stack16 => STAGE1_SCOPES_STACK,
    };
    run_training(model, ds, cfg, scopes, false)
}

/// Stage 2: CTC on generator outputs; only fusion weights and generator
/// parameters receive gradients.
pub fn train_stage2(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainStats> {
    run_training(model, ds, cfg, STAGE2_SCOPES, true)
}

pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainStats> {
    match cfg.stage {
        1 => train_stage1(model, ds, cfg),
        2 => train_stage2(model, ds, cfg),
        s => Err(PipelineError::Config(format!("unknown stage {s}"))),
    }
}

/// Teacher-forced token accuracy and boundary-count calibration over a
/// dataset, without touching parameters.
pub fn teacher_forced_report(
    model: &Model,
    ds: &Dataset,
    mode: PromptMode,
) -> Result<TeacherForcedReport> {
    check_compat(model, ds)?;
    let bind = model.params.bind(&[]);
    let v = model.view(&bind);
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut gaps = Vec::new();
    for utt in &ds.utterances {
        let frames = ds.load_frames(utt)?;
        let enc = encode_offline(&v, &frames)?;
        let n = utt.target.len();
        if n == 0 {
            continue;
        }
        if mode == PromptMode::Cif {
            let alpha = cif::alphas(&enc)?;
            let sum: f64 = alpha.data().iter().sum();
            gaps.push((sum - n as f64).abs() / n as f64);
        }
        let (prompts, _) = offline_prompts(&v, &enc, n, mode)?;
        let embeds = lm_input(&v, &prompts, &utt.target)?;
        let (logits, _) = forward_batch(&v, &embeds)?;
        let pred = logits.narrow_rows(prompt_span(&v, &prompts) - 1, n + 1)?;
        let labels: Vec<usize> = utt.target.iter().map(|&y| TEXT_BASE + y).chain([EOS]).collect();
        let vocab = pred.cols();
        for (r, &want) in labels.iter().enumerate() {
            let row = &pred.data()[r * vocab..(r + 1) * vocab];
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            correct += usize::from(arg == want);
            total += 1;
        }
    }
    if total == 0 {
        return Err(PipelineError::Data("dataset has no scorable targets".to_string()));
    }
    Ok(TeacherForcedReport {
        token_accuracy: correct as f64 / total as f64,
        quantity_gap: if gaps.is_empty() {
            None
        } else {
            Some(gaps.iter().sum::<f64>() / gaps.len() as f64)
        },
    })
}
