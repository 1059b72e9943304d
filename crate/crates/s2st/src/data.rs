//! Synthetic translation task: token sequences rendered as noisy feature
//! frames, with seeded local reorders and a fixed token-to-unit lexicon.
//!
//! Layout on disk: `manifest.jsonl` (one utterance per line),
//! `dataset.json` (the generating spec plus derived tables), and
//! `frames/<id>.f64` files holding row-major little-endian f64 frames.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub unit_vocab: usize,
    /// Frame feature width.
    pub d_in: usize,
    /// Inclusive range of frames rendered per source token.
    pub frames_per_token: (usize, usize),
    /// Inclusive range of speech units per target token.
    pub units_per_token: (usize, usize),
    /// Probability of swapping each non-overlapping adjacent target pair.
    pub swap_prob: f64,
    /// Stddev of Gaussian noise added to every frame feature.
    pub noise_sigma: f64,
    /// Inclusive range of source tokens per utterance.
    pub utterance_len: (usize, usize),
    pub seed: u64,
    /// Selects the utterance stream only. Datasets sharing `seed` but
    /// differing here (train/test splits) get identical embeddings and
    /// lexicon yet disjoint utterance draws.
    pub split_seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            source_vocab: 6,
            target_vocab: 6,
            unit_vocab: 8,
            d_in: 16,
            frames_per_token: (2, 6),
            units_per_token: (2, 4),
            swap_prob: 0.3,
            noise_sigma: 0.05,
            utterance_len: (3, 8),
            seed: 7,
            split_seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.source_vocab == 0 || self.target_vocab == 0 {
            return bad("vocab sizes must be >= 1");
        }
        if self.unit_vocab < 2 {
            return bad("unit vocab must be >= 2 for repeat-free expansions");
        }
        if self.d_in == 0 {
            return bad("d_in must be >= 1");
        }
        for (lo, hi, name) in [
            (self.frames_per_token.0, self.frames_per_token.1, "frames_per_token"),
            (self.units_per_token.0, self.units_per_token.1, "units_per_token"),
            (self.utterance_len.0, self.utterance_len.1, "utterance_len"),
        ] {
            if lo == 0 || lo > hi {
                return bad(&format!("{name} range must be non-empty and start at >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return bad("swap_prob must lie in [0, 1]");
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    /// Frame file path relative to the dataset root.
    pub frames: String,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub units: Vec<usize>,
}

/// Spec plus the derived tables that make generation auditable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: SyntheticTaskSpec,
    pub n_utterances: usize,
    /// Per-source-token frame embedding, row-major `[source_vocab, d_in]`.
    pub embeddings: Vec<Vec<f64>>,
    /// Per-target-token unit expansion (no internal adjacent repeats).
    pub lexicon: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(root.join("dataset.json"))?)?;
        let manifest = fs::read_to_string(root.join("manifest.jsonl"))?;
        let mut utterances = Vec::new();
        for line in manifest.lines() {
            let line = line.trim();
            if !line.is_empty() {
                utterances.push(serde_json::from_str(line)?);
            }
        }
        if utterances.len() != meta.n_utterances {
            return Err(PipelineError::Data(format!(
                "manifest has {} utterances, dataset.json says {}",
                utterances.len(),
                meta.n_utterances
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            meta,
            utterances,
        })
    }

    /// Read one utterance's frames as a `[T, d_in]` tensor.
    pub fn load_frames(&self, utt: &Utterance) -> Result<Tensor> {
        let bytes = fs::read(self.root.join(&utt.frames))?;
        let d = self.meta.spec.d_in;
        if bytes.len() % 8 != 0 || (bytes.len() / 8) % d != 0 {
            return Err(PipelineError::Data(format!(
                "frame file {} has {} bytes, not a multiple of 8*{d}",
                utt.frames,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = values.len() / d;
        Ok(Tensor::from_vec(values, &[t, d])?)
    }
}

/// Draw a unit expansion of seeded length in range with no internal
/// adjacent repeats.
fn draw_expansion(rng: &mut ChaCha8Rng, spec: &SyntheticTaskSpec) -> Vec<usize> {
    let len = rng.random_range(spec.units_per_token.0..=spec.units_per_token.1);
    let mut out: Vec<usize> = Vec::with_capacity(len);
    for _ in 0..len {
        let mut u = rng.random_range(0..spec.unit_vocab);
        if let Some(&prev) = out.last() {
            if u == prev {
                u = (u + 1) % spec.unit_vocab;
            }
        }
        out.push(u);
    }
    out
}

/// Swap non-overlapping adjacent pairs with the configured probability.
fn reorder(rng: &mut ChaCha8Rng, tokens: &mut [usize], p: f64) {
    let mut i = 0;
    while i + 1 < tokens.len() {
        if rng.random_range(0.0..1.0) < p {
            tokens.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
}

/// Generate a dataset under `root`, overwriting any existing files there.
pub fn generate_dataset(
    spec: &SyntheticTaskSpec,
    n_utterances: usize,
    root: &Path,
) -> Result<Dataset> {
    spec.validate()?;
    if n_utterances == 0 {
        return Err(PipelineError::Config("need at least one utterance".to_string()));
    }
    fs::create_dir_all(root.join("frames"))?;
    let mut task_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ 0xa076_1d64_78bd_642f ^ spec.split_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| PipelineError::Config(format!("bad noise sigma: {e}")))?;

    let embeddings: Vec<Vec<f64>> = (0..spec.source_vocab)
        .map(|_| (0..spec.d_in).map(|_| task_rng.random_range(-1.0..1.0)).collect())
        .collect();
    let lexicon: Vec<Vec<usize>> = (0..spec.target_vocab)
        .map(|_| draw_expansion(&mut task_rng, spec))
        .collect();

    let mut utterances = Vec::with_capacity(n_utterances);
    let mut manifest = String::new();
    for idx in 0..n_utterances {
        let id = format!("utt-{idx:06}");
        let n_src = rng.random_range(spec.utterance_len.0..=spec.utterance_len.1);
        let source: Vec<usize> = (0..n_src)
            .map(|_| rng.random_range(0..spec.source_vocab))
            .collect();

        let mut target: Vec<usize> = source.iter().map(|&s| s % spec.target_vocab).collect();
        reorder(&mut rng, &mut target, spec.swap_prob);
        let units: Vec<usize> = target.iter().flat_map(|&t| lexicon[t].clone()).collect();

        let mut frame_values: Vec<f64> = Vec::new();
        for &s in &source {
            let n_frames = rng.random_range(spec.frames_per_token.0..=spec.frames_per_token.1);
            for _ in 0..n_frames {
                for d in 0..spec.d_in {
                    let eps = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    frame_values.push(embeddings[s][d] + eps);
                }
            }
        }
        let rel = format!("frames/{id}.f64");
        let bytes: Vec<u8> = frame_values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(root.join(&rel), bytes)?;

        let utt = Utterance {
            id,
            frames: rel,
            source,
            target,
            units,
        };
        manifest.push_str(&serde_json::to_string(&utt)?);
        manifest.push('\n');
        utterances.push(utt);
    }
    fs::write(root.join("manifest.jsonl"), manifest)?;

    let meta = DatasetMeta {
        spec: spec.clone(),
        n_utterances,
        embeddings,
        lexicon,
    };
    fs::write(root.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        meta,
        utterances,
    })
}
