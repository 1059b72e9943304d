//! Latency and quality metrics computed from session logs.
//!
//! All latency numbers are in milliseconds of simulated time and depend
//! only on event timestamps and durations, never on payload content.
//! Computation-aware variants add measured wall-clock compute on top of
//! the simulated emission times when the log captured it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::scheduler::{EventKind, SessionLog};
use crate::vocoder::unit_duration_ms;

/// Additive smoothing for zero n-gram precision counts.
const BLEU_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub al_ms: f64,
    pub laal_ms: f64,
    /// None when the session emitted no speech units.
    pub atd_ms: Option<f64>,
    pub start_offset_ms: f64,
    pub end_offset_ms: f64,
    /// Computation-aware AL; present only when the log has wall-clock data.
    pub ca_al_ms: Option<f64>,
    pub ca_atd_ms: Option<f64>,
}

/// Wait-k style lagging over emission times `d` against an ideal policy
/// that spreads `denom` words evenly over `t` milliseconds.
fn lagging(d: &[f64], t: f64, denom: usize) -> f64 {
    let tau = d
        .iter()
        .position(|&x| x >= t)
        .map(|i| i + 1)
        .unwrap_or(d.len());
    let step = t / denom as f64;
    (0..tau).map(|i| d[i] - i as f64 * step).sum::<f64>() / tau as f64
}

fn text_times(log: &SessionLog) -> Result<Vec<f64>> {
    let d: Vec<f64> = log
        .text_emissions()
        .iter()
        .map(|&(t, _)| t as f64)
        .collect();
    if d.is_empty() {
        return Err(PipelineError::Data(
            "average lagging is undefined for an empty hypothesis".to_string(),
        ));
    }
    Ok(d)
}

/// Average lagging of the text stream against an ideal diagonal policy.
pub fn average_lagging(log: &SessionLog, src_duration_ms: u64, ref_word_count: usize) -> Result<f64> {
    if ref_word_count == 0 {
        return Err(PipelineError::Data("reference has no words".to_string()));
    }
    Ok(lagging(&text_times(log)?, src_duration_ms as f64, ref_word_count))
}

/// Length-adaptive AL: the ideal policy is paced by whichever of the
/// hypothesis and reference is longer.
pub fn laal(
    log: &SessionLog,
    src_duration_ms: u64,
    ref_word_count: usize,
    hyp_word_count: usize,
) -> Result<f64> {
    let denom = ref_word_count.max(hyp_word_count);
    if denom == 0 {
        return Err(PipelineError::Data("both sides have no words".to_string()));
    }
    Ok(lagging(&text_times(log)?, src_duration_ms as f64, denom))
}

/// Cumulative input duration steps: `(read end time, cumulative ms)`.
fn input_steps(log: &SessionLog) -> Result<Vec<(f64, f64)>> {
    let reads = log.reads();
    if reads.is_empty() {
        return Err(PipelineError::Data("log has no read events".to_string()));
    }
    let mut cum = 0.0;
    Ok(reads
        .iter()
        .map(|&(t, dur)| {
            cum += dur as f64;
            (t as f64, cum)
        })
        .collect())
}

/// Earliest input time at which the cumulative read duration reaches `o`;
/// the source end if it never does.
fn corresponding_input_time(steps: &[(f64, f64)], o: f64) -> f64 {
    steps
        .iter()
        .find(|&&(_, cum)| cum >= o)
        .map(|&(t, _)| t)
        .unwrap_or_else(|| steps.last().unwrap().0)
}

fn atd_over(times: &[f64], steps: &[(f64, f64)]) -> f64 {
    let unit_ms = unit_duration_ms();
    let terms: Vec<f64> = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let o = (i + 1) as f64 * unit_ms;
            (t - corresponding_input_time(steps, o)).max(0.0)
        })
        .collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// Average token delay: each emitted speech unit is a fixed-duration
/// output sub-segment matched to the earliest input time with at least as
/// much cumulative duration read; per-term delays floor at zero.
pub fn atd(log: &SessionLog) -> Result<f64> {
    let units = log.unit_emissions();
    if units.is_empty() {
        return Err(PipelineError::Data("log has no speech output".to_string()));
    }
    let steps = input_steps(log)?;
    let times: Vec<f64> = units.iter().map(|&(t, _)| t as f64).collect();
    Ok(atd_over(&times, &steps))
}

/// `(StartOffset, EndOffset)`: delay of the first output event, and lag of
/// the last output event past the source end (negative when the session
/// finished early).
pub fn offsets(log: &SessionLog, src_duration_ms: u64) -> Result<(f64, f64)> {
    let outs: Vec<u64> = log
        .events
        .iter()
        .filter(|e| e.kind != EventKind::ReadChunk)
        .map(|e| e.t_ms)
        .collect();
    match (outs.first(), outs.last()) {
        (Some(&first), Some(&last)) => {
            Ok((first as f64, last as f64 - src_duration_ms as f64))
        }
        _ => Err(PipelineError::Data("log has no output events".to_string())),
    }
}

fn wall_ms(e_t: u64, wall_ns: Option<u64>) -> Option<f64> {
    wall_ns.map(|w| e_t as f64 + w as f64 / 1e6)
}

/// Full latency summary for one session.
pub fn latency_report(
    log: &SessionLog,
    src_duration_ms: u64,
    ref_word_count: usize,
) -> Result<LatencyReport> {
    let hyp_words = log.text_tokens().len();
    let al_ms = average_lagging(log, src_duration_ms, ref_word_count)?;
    let laal_ms = laal(log, src_duration_ms, ref_word_count, hyp_words)?;
    let atd_ms = atd(log).ok();
    let (start_offset_ms, end_offset_ms) = offsets(log, src_duration_ms)?;

    // Computation-aware variants only when every relevant event carries a
    // wall-clock stamp.
    let text = log
        .events
        .iter()
        .filter(|e| e.kind == EventKind::TextToken)
        .map(|e| wall_ms(e.t_ms, e.wall_ns))
        .collect::<Option<Vec<f64>>>();
    let ca_al_ms = text
        .filter(|d| !d.is_empty())
        .map(|d| lagging(&d, src_duration_ms as f64, ref_word_count));
    let ca_atd_ms = (|| {
        let mut times = Vec::new();
        for e in &log.events {
            if e.kind != EventKind::WaveformSegment {
                continue;
            }
            let t = wall_ms(e.t_ms, e.wall_ns)?;
            let n = e.payload["units"].as_array().map(|a| a.len()).unwrap_or(0);
            times.extend(std::iter::repeat(t).take(n));
        }
        if times.is_empty() {
            return None;
        }
        Some(atd_over(&times, &input_steps(log).ok()?))
    })();

    Ok(LatencyReport {
        al_ms,
        laal_ms,
        atd_ms,
        start_offset_ms,
        end_offset_ms,
        ca_al_ms,
        ca_atd_ms,
    })
}

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out: HashMap<Vec<String>, usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU on whitespace tokens: geometric mean of modified n-gram
/// precisions (orders with no n-grams anywhere are skipped; zero
/// numerators are smoothed additively) times the brevity penalty.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], max_order: usize) -> Result<f64> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(PipelineError::Data(format!(
            "bleu needs matched non-empty corpora, got {} hyps / {} refs",
            hyps.len(),
            refs.len()
        )));
    }
    if max_order == 0 {
        return Err(PipelineError::Data("bleu max_order must be >= 1".to_string()));
    }
    let mut num = vec![0usize; max_order];
    let mut den = vec![0usize; max_order];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let ht: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rt: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=max_order {
            let hc = ngrams(&ht, n);
            let rc = ngrams(&rt, n);
            for (g, c) in &hc {
                num[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
                den[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut used = 0usize;
    for n in 0..max_order {
        if den[n] == 0 {
            continue;
        }
        let p = if num[n] == 0 {
            BLEU_EPS
        } else {
            num[n] as f64 / den[n] as f64
        };
        log_sum += p.ln();
        used += 1;
    }
    if used == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / used as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::EmissionEvent;
    use serde_json::json;

    fn ev(kind: EventKind, t_ms: u64, payload: serde_json::Value) -> EmissionEvent {
        EmissionEvent {
            kind,
            t_ms,
            wall_ns: None,
            payload,
        }
    }

    fn read(t_ms: u64, dur_ms: u64) -> EmissionEvent {
        ev(
            EventKind::ReadChunk,
            t_ms,
            json!({"frames": dur_ms / 20, "dur_ms": dur_ms, "prompts": 0, "final": false}),
        )
    }

    fn text(t_ms: u64) -> EmissionEvent {
        ev(EventKind::TextToken, t_ms, json!({"token": 3}))
    }

    fn wave(t_ms: u64, n_units: usize) -> EmissionEvent {
        let units: Vec<usize> = (0..n_units).map(|i| i % 4).collect();
        ev(EventKind::WaveformSegment, t_ms, json!({ "units": units }))
    }

    /// Two 500 ms reads; text at 600 and 1000; 500 ms of speech at each.
    fn fixture_log() -> SessionLog {
        SessionLog {
            events: vec![
                read(500, 500),
                text(600),
                wave(600, 25),
                read(1000, 500),
                text(1000),
                wave(1000, 25),
            ],
        }
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn al_hand_fixture_is_550() {
        close(average_lagging(&fixture_log(), 1000, 2).unwrap(), 550.0);
    }

    #[test]
    fn al_single_word_at_source_end_equals_t() {
        let log = SessionLog {
            events: vec![read(1000, 1000), text(1000)],
        };
        close(average_lagging(&log, 1000, 1).unwrap(), 1000.0);
    }

    #[test]
    fn al_all_words_at_zero_hits_the_anticipation_bound() {
        for n in 1..6usize {
            let mut events = vec![read(0, 0)];
            events.extend((0..n).map(|_| text(0)));
            let log = SessionLog { events };
            let t = 900.0;
            let expect = -((n - 1) as f64) * t / (2.0 * n as f64);
            close(average_lagging(&log, 900, n).unwrap(), expect);
        }
    }

    #[test]
    fn al_is_shift_invariant_below_the_source_end() {
        let a = SessionLog {
            events: vec![read(1000, 1000), text(100), text(200)],
        };
        let b = SessionLog {
            events: vec![read(1000, 1000), text(150), text(250)],
        };
        let al_a = average_lagging(&a, 1000, 2).unwrap();
        let al_b = average_lagging(&b, 1000, 2).unwrap();
        close(al_b - al_a, 50.0);
    }

    #[test]
    fn laal_matches_al_when_hyp_not_longer() {
        let log = fixture_log();
        let al = average_lagging(&log, 1000, 2).unwrap();
        close(laal(&log, 1000, 2, 2).unwrap(), al);
        close(laal(&log, 1000, 3, 2).unwrap(), average_lagging(&log, 1000, 3).unwrap());
    }

    #[test]
    fn laal_grows_denominator_for_long_hypotheses() {
        let log = fixture_log();
        // Against a 1-word reference the 2-word hypothesis doubles the pace.
        let al = average_lagging(&log, 1000, 1).unwrap();
        let la = laal(&log, 1000, 1, 2).unwrap();
        close(al, 300.0);
        close(la, 550.0);
        assert!(la >= al);
    }

    #[test]
    fn empty_hypothesis_is_an_error() {
        let log = SessionLog {
            events: vec![read(1000, 1000)],
        };
        assert!(average_lagging(&log, 1000, 2).is_err());
        assert!(laal(&log, 1000, 2, 0).is_err());
        assert!(average_lagging(&fixture_log(), 1000, 0).is_err());
    }

    #[test]
    fn atd_hand_fixture_is_50() {
        close(atd(&fixture_log()).unwrap(), 50.0);
    }

    #[test]
    fn atd_is_zero_when_outputs_track_input_exactly() {
        let log = SessionLog {
            events: vec![read(500, 500), wave(500, 25), read(1000, 500), wave(1000, 25)],
        };
        close(atd(&log).unwrap(), 0.0);
    }

    #[test]
    fn atd_floors_each_term_at_zero() {
        // Output well before its matched input would go negative unfloored.
        let log = SessionLog {
            events: vec![read(100, 100), wave(100, 25), read(1000, 900), wave(1000, 25)],
        };
        // First 5 units (o ≤ 100 ms) match the 100 ms read: delay 0. The
        // remaining 20 of the first batch need the second read: floored 0.
        // Second batch at 1000 matches 1000: 0. Mean 0.
        close(atd(&log).unwrap(), 0.0);
    }

    #[test]
    fn atd_needs_speech_output() {
        assert!(atd(&SessionLog {
            events: vec![read(500, 500), text(500)]
        })
        .is_err());
    }

    #[test]
    fn offsets_fixture_is_600_and_0() {
        let (s, e) = offsets(&fixture_log(), 1000).unwrap();
        close(s, 600.0);
        close(e, 0.0);
        assert!(offsets(
            &SessionLog {
                events: vec![read(500, 500)]
            },
            500
        )
        .is_err());
    }

    #[test]
    fn delaying_every_emission_never_decreases_atd_or_offsets() {
        let base = fixture_log();
        let mut shifted = base.clone();
        for e in &mut shifted.events {
            if e.kind != EventKind::ReadChunk {
                e.t_ms += 70;
            }
        }
        assert!(atd(&shifted).unwrap() >= atd(&base).unwrap());
        let (s0, e0) = offsets(&base, 1000).unwrap();
        let (s1, e1) = offsets(&shifted, 1000).unwrap();
        assert!(s1 >= s0 && e1 >= e0);
    }

    #[test]
    fn latency_report_collects_everything() {
        let r = latency_report(&fixture_log(), 1000, 2).unwrap();
        close(r.al_ms, 550.0);
        close(r.laal_ms, 550.0);
        close(r.atd_ms.unwrap(), 50.0);
        close(r.start_offset_ms, 600.0);
        close(r.end_offset_ms, 0.0);
        assert!(r.ca_al_ms.is_none(), "no wall clock captured");

        let mut walled = fixture_log();
        for (i, e) in walled.events.iter_mut().enumerate() {
            e.wall_ns = Some((i as u64 + 1) * 1_000_000);
        }
        let r = latency_report(&walled, 1000, 2).unwrap();
        assert!(r.ca_al_ms.unwrap() > r.al_ms);
        assert!(r.ca_atd_ms.unwrap() >= r.atd_ms.unwrap());
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let h = vec!["a b c d".to_string()];
        close(bleu(&h, &h, 4).unwrap(), 100.0);
        let r = vec!["x y z w".to_string()];
        assert!(bleu(&h, &r, 4).unwrap() < 1e-3);
    }

    #[test]
    fn bleu_brevity_fixture() {
        let score = bleu(&["a b c"], &["a b c d"], 4).unwrap();
        let expect = 100.0 * (-1.0f64 / 3.0).exp();
        assert!((score - expect).abs() < 1e-9, "{score} vs {expect}");
        assert!((score - 71.653).abs() < 0.01);
    }

    #[test]
    fn bleu_is_corpus_level_not_mean_of_sentences() {
        // Pooling counts across sentences: p1 = 2/3, p2 = 1/1 → ≈ 81.65,
        // while averaging the sentence scores gives ≈ (100 + 0)/2 = 50.
        let hyps = vec!["a b".to_string(), "x".to_string()];
        let refs = vec!["a b".to_string(), "a".to_string()];
        let pooled = bleu(&hyps, &refs, 2).unwrap();
        assert!((pooled - 100.0 * (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
        let s1 = bleu(&hyps[..1], &refs[..1], 2).unwrap();
        let s2 = bleu(&hyps[1..], &refs[1..], 2).unwrap();
        assert!((pooled - (s1 + s2) / 2.0).abs() > 1.0);
    }

    #[test]
    fn bleu_skips_orders_with_no_ngrams() {
        // One-word strings have no bigrams at all: order 2+ must be skipped,
        // not treated as zero precision.
        let score = bleu(&["a"], &["a"], 4).unwrap();
        close(score, 100.0);
    }

    #[test]
    fn bleu_rejects_mismatched_corpora() {
        let h = vec!["a".to_string()];
        let r: Vec<String> = vec![];
        assert!(bleu(&h, &r, 4).is_err());
        assert!(bleu(&r, &r, 4).is_err());
        assert!(bleu(&h, &h, 0).is_err());
    }

    #[test]
    fn bleu_empty_hypothesis_scores_zero() {
        close(bleu(&[""], &["a b"], 4).unwrap(), 0.0);
    }
}
