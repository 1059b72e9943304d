//! Stand-in vocoder: each speech unit becomes a fixed-length sine segment.
//!
//! Real unit vocoders are out of scope; what matters downstream is that the
//! mapping is deterministic, append-only (synthesizing a longer unit
//! sequence never changes earlier samples), and produces measurable output
//! timing for the latency metrics.

use std::fs;
use std::path::Path;

use crate::error::Result;

pub const SAMPLE_RATE: u32 = 16_000;
/// Samples per unit: 20 ms at 16 kHz.
pub const SAMPLES_PER_UNIT: usize = 320;
const AMPLITUDE: f64 = 0.3;

/// Duration of one synthesized unit in milliseconds.
pub fn unit_duration_ms() -> f64 {
    SAMPLES_PER_UNIT as f64 * 1000.0 / SAMPLE_RATE as f64
}

/// Pitch assignment: unit `s` maps to `200 + 5·s` Hz.
pub fn unit_frequency(unit: usize) -> f64 {
    200.0 + 5.0 * unit as f64
}

/// One unit's segment; the phase restarts at zero each segment.
pub fn synthesize_unit(unit: usize) -> Vec<f64> {
    let f = unit_frequency(unit);
    (0..SAMPLES_PER_UNIT)
        .map(|i| {
            AMPLITUDE
                * (2.0 * std::f64::consts::PI * f * i as f64 / SAMPLE_RATE as f64).sin()
        })
        .collect()
}

/// Concatenated segments for a unit sequence.
pub fn synthesize(units: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(units.len() * SAMPLES_PER_UNIT);
    for &u in units {
        out.extend(synthesize_unit(u));
    }
    out
}

/// Mono 16-bit PCM WAV. Samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + samples.len() * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    bytes.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let clamped = s.clamp(-1.0, 1.0);
        let q = (clamped * 32767.0).round() as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}
