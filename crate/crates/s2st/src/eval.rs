//! k-sweep evaluation: run sessions across a test set, score them, and
//! emit the CSV/JSON/plot artifacts.
//!
//! Utterances are evaluated in parallel (order-stable); everything else is
//! sequential and deterministic, so repeated runs produce byte-identical
//! reports. `S2ST_THREADS` caps the worker count.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PipelineError, Result};
use crate::metrics;
use crate::model::{Model, TEXT_BASE};
use crate::ngram::NgramModel;
use crate::scheduler::{run_offline, run_session, PromptMode, SessionConfig, SessionLog};
use crate::speech_generator::UnitLm;
use crate::vocoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Cif,
    Stack16,
    Offline,
}

impl EvalMode {
    fn prompt_mode(self) -> PromptMode {
        match self {
            EvalMode::Stack16 => PromptMode::Stack16,
            _ => PromptMode::Cif,
        }
    }
}

/// One session's scores. Latency fields are empty when the session produced
/// no scorable output of that kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRow {
    pub id: String,
    pub k: usize,
    pub bleu: f64,
    pub unit_bleu: f64,
    pub al: Option<f64>,
    pub laal: Option<f64>,
    pub atd: Option<f64>,
    pub start_offset: Option<f64>,
    pub end_offset: Option<f64>,
}

/// Per-k summary. Means skip sessions where a metric was undefined; BLEU is
/// corpus-level over the whole test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KAggregate {
    pub k: usize,
    pub corpus_bleu: f64,
    pub corpus_unit_bleu: f64,
    pub mean_al: Option<f64>,
    pub mean_laal: Option<f64>,
    pub mean_atd: Option<f64>,
    pub mean_start_offset: Option<f64>,
    pub mean_end_offset: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutputs {
    pub mode: EvalMode,
    pub rows: Vec<SessionRow>,
    pub aggregates: Vec<KAggregate>,
}

/// Map generated LM tokens back to dataset text tokens for scoring.
/// Stray specials (never in references) keep a distinct spelling.
fn text_string(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| {
            if t >= TEXT_BASE {
                (t - TEXT_BASE).to_string()
            } else {
                format!("sp{t}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn unit_string(units: &[usize]) -> String {
    units
        .iter()
        .map(|u| u.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

struct Scored {
    row: SessionRow,
    hyp_text: String,
    hyp_units: String,
}

fn score_session(
    id: &str,
    k: usize,
    log: SessionLog,
    ref_target: &[usize],
    ref_units: &[usize],
) -> Result<Scored> {
    let hyp_text = text_string(&log.text_tokens());
    let hyp_units = unit_string(&log.units());
    let ref_text = unit_string(ref_target);
    let ref_unit_text = unit_string(ref_units);
    let src = log.src_duration_ms();
    let hyp_words = log.text_tokens().len();
    let row = SessionRow {
        id: id.to_string(),
        k,
        bleu: metrics::bleu(&[hyp_text.as_str()], &[ref_text.as_str()], 4)?,
        unit_bleu: metrics::bleu(&[hyp_units.as_str()], &[ref_unit_text.as_str()], 4)?,
        al: metrics::average_lagging(&log, src, ref_target.len()).ok(),
        laal: metrics::laal(&log, src, ref_target.len(), hyp_words).ok(),
        atd: metrics::atd(&log).ok(),
        start_offset: metrics::offsets(&log, src).ok().map(|(s, _)| s),
        end_offset: metrics::offsets(&log, src).ok().map(|(_, e)| e),
    };
    Ok(Scored {
        row,
        hyp_text,
        hyp_units,
    })
}

/// Run every utterance at every k (or once, offline) and aggregate.
pub fn evaluate_sweep(
    model: &Model,
    ds: &Dataset,
    lm: Option<&NgramModel>,
    k_list: &[usize],
    mode: EvalMode,
    base: &SessionConfig,
) -> Result<SweepOutputs> {
    if ds.utterances.is_empty() {
        return Err(PipelineError::Data("empty test set".to_string()));
    }
    let ks: Vec<usize> = if mode == EvalMode::Offline {
        vec![0]
    } else if k_list.is_empty() {
        return Err(PipelineError::Config("eval needs at least one k".to_string()));
    } else {
        k_list.to_vec()
    };

    let bind = model.params.bind(&[]);
    let view = model.view(&bind);
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for &k in &ks {
        let cfg = SessionConfig {
            // Offline ignores the lag; any valid value satisfies the config.
            k: if mode == EvalMode::Offline { 1 } else { k },
            mode: mode.prompt_mode(),
            ..*base
        };
        let scored: Vec<Scored> = ds
            .utterances
            .par_iter()
            .map(|utt| -> Result<Scored> {
                let frames = ds.load_frames(utt)?;
                let lm_dyn = lm.map(|m| m as &dyn UnitLm);
                let log = if mode == EvalMode::Offline {
                    run_offline(&frames, &view, lm_dyn, &cfg)?
                } else {
                    run_session(&frames, &view, lm_dyn, &cfg)?
                };
                score_session(&utt.id, k, log, &utt.target, &utt.units)
            })
            .collect::<Result<Vec<_>>>()?;

        let hyp_texts: Vec<&str> = scored.iter().map(|s| s.hyp_text.as_str()).collect();
        let ref_texts: Vec<String> = ds
            .utterances
            .iter()
            .map(|u| unit_string(&u.target))
            .collect();
        let ref_text_refs: Vec<&str> = ref_texts.iter().map(|s| s.as_str()).collect();
        let hyp_units: Vec<&str> = scored.iter().map(|s| s.hyp_units.as_str()).collect();
        let ref_units: Vec<String> = ds.utterances.iter().map(|u| unit_string(&u.units)).collect();
        let ref_unit_refs: Vec<&str> = ref_units.iter().map(|s| s.as_str()).collect();

        aggregates.push(KAggregate {
            k,
            corpus_bleu: metrics::bleu(&hyp_texts, &ref_text_refs, 4)?,
            corpus_unit_bleu: metrics::bleu(&hyp_units, &ref_unit_refs, 4)?,
            mean_al: mean_of(scored.iter().map(|s| s.row.al)),
            mean_laal: mean_of(scored.iter().map(|s| s.row.laal)),
            mean_atd: mean_of(scored.iter().map(|s| s.row.atd)),
            mean_start_offset: mean_of(scored.iter().map(|s| s.row.start_offset)),
            mean_end_offset: mean_of(scored.iter().map(|s| s.row.end_offset)),
        });
        rows.extend(scored.into_iter().map(|s| s.row));
    }
    Ok(SweepOutputs {
        mode,
        rows,
        aggregates,
    })
}

/// Like `evaluate_sweep`, but also keeps each session log (for audits) and
/// optionally writes synthesized waveforms under `wav_dir`.
pub fn evaluate_sweep_with_audio(
    model: &Model,
    ds: &Dataset,
    lm: Option<&NgramModel>,
    k_list: &[usize],
    mode: EvalMode,
    base: &SessionConfig,
    wav_dir: Option<&Path>,
) -> Result<SweepOutputs> {
    let outs = evaluate_sweep(model, ds, lm, k_list, mode, base)?;
    if let Some(dir) = wav_dir {
        fs::create_dir_all(dir)?;
        // One representative pass: re-run at the first k and dump audio.
        let k = outs.aggregates.first().map(|a| a.k).unwrap_or(1);
        let cfg = SessionConfig {
            k: if mode == EvalMode::Offline { 1 } else { k },
            mode: mode.prompt_mode(),
            ..*base
        };
        let bind = model.params.bind(&[]);
        let view = model.view(&bind);
        for utt in &ds.utterances {
            let frames = ds.load_frames(utt)?;
            let lm_dyn = lm.map(|m| m as &dyn UnitLm);
            let log = if mode == EvalMode::Offline {
                run_offline(&frames, &view, lm_dyn, &cfg)?
            } else {
                run_session(&frames, &view, lm_dyn, &cfg)?
            };
            let samples = vocoder::synthesize(&log.units());
            vocoder::write_wav(&dir.join(format!("{}.wav", utt.id)), &samples)?;
        }
    }
    Ok(outs)
}

/// Write `sessions.csv`, `aggregate.json`, and the two plot-data files.
pub fn write_reports(outs: &SweepOutputs, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("sessions.csv"))?;
    for row in &outs.rows {
        w.serialize(row)?;
    }
    w.flush()?;

    fs::write(
        dir.join("aggregate.json"),
        serde_json::to_string_pretty(outs)?,
    )?;

    // Quality-latency tradeoff points, one line per k.
    let mut text_plot = String::from("k,mean_al,corpus_bleu\n");
    let mut unit_plot = String::from("k,mean_atd,corpus_unit_bleu\n");
    for a in &outs.aggregates {
        let al = a.mean_al.map(|v| v.to_string()).unwrap_or_default();
        let atd = a.mean_atd.map(|v| v.to_string()).unwrap_or_default();
        text_plot.push_str(&format!("{},{},{}\n", a.k, al, a.corpus_bleu));
        unit_plot.push_str(&format!("{},{},{}\n", a.k, atd, a.corpus_unit_bleu));
    }
    fs::write(dir.join("plot_text_bleu_vs_al.csv"), text_plot)?;
    fs::write(dir.join("plot_unit_bleu_vs_atd.csv"), unit_plot)?;
    Ok(())
}

/// Install a rayon pool sized from `S2ST_THREADS` (if set) and run `f` in it.
pub fn with_thread_limit<T>(f: impl FnOnce() -> T + Send) -> Result<T>
where
    T: Send,
{
    match std::env::var("S2ST_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .map_err(|_| PipelineError::Config(format!("bad S2ST_THREADS value {raw:?}")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}
