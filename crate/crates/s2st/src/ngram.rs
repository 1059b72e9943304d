//! Back-off n-gram language model over integer symbol sequences, used for
//! shallow fusion during unit decoding.
//!
//! Estimation is interpolated absolute discounting: each seen count is
//! discounted by a constant `D` and the freed mass re-spent on the next
//! lower order, bottoming out in a uniform distribution over the declared
//! vocabulary plus the end marker. Context counts are taken as the sum of
//! their extensions so every conditional sums to one exactly, including
//! start-padded contexts.
//!
//! The trained model is materialized into `(log10 prob, log10 backoff)`
//! tables — the same shape an ARPA file stores — so in-memory queries and
//! ARPA round-tripped queries run through identical lookup code.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{PipelineError, Result};
use crate::speech_generator::UnitLm;

const BOS: u32 = 0;
const EOS: u32 = 1;
const TOK_BASE: u32 = 2;
/// ARPA placeholder log10 probability for entries that only exist to carry
/// a backoff weight (start-symbol contexts are never predicted).
const PLACEHOLDER: f64 = -99.0;
const LN_10: f64 = std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy)]
struct Entry {
    /// log10 conditional probability of the gram's last symbol.
    logp: f64,
    /// log10 backoff weight when this gram is used as a context.
    bow: Option<f64>,
}

/// N-gram model with ARPA-style materialized tables.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    /// Declared symbol vocabulary, sorted. The uniform floor spreads over
    /// these plus the end marker.
    vocab: Vec<usize>,
    /// `tables[k-1]` maps k-grams (internal ids) to entries.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

fn intern(tok: usize) -> u32 {
    TOK_BASE + tok as u32
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[usize] {
        &self.vocab
    }

    /// Count-and-normalize training. `discount` must lie in (0, 1); every
    /// sequence is padded with `order-1` start symbols and one end marker.
    pub fn train(
        order: usize,
        discount: f64,
        vocab: &[usize],
        seqs: &[Vec<usize>],
    ) -> Result<Self> {
        if order == 0 {
            return Err(PipelineError::Config("n-gram order must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&discount) || discount == 0.0 {
            return Err(PipelineError::Config(format!(
                "discount must be in (0, 1), got {discount}"
            )));
        }
        let mut vocab: Vec<usize> = vocab.to_vec();
        vocab.sort_unstable();
        vocab.dedup();
        if vocab.is_empty() {
            return Err(PipelineError::Config("empty n-gram vocabulary".to_string()));
        }
        if seqs.is_empty() {
            return Err(PipelineError::Data("no n-gram training sequences".to_string()));
        }
        let known: std::collections::HashSet<usize> = vocab.iter().copied().collect();
        for seq in seqs {
            for &t in seq {
                if !known.contains(&t) {
                    return Err(PipelineError::Data(format!(
                        "training symbol {t} outside the declared vocabulary"
                    )));
                }
            }
        }

        // Event counts per order: windows whose last symbol is not BOS.
        let mut counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        for seq in seqs {
            let mut padded = vec![BOS; order - 1];
            padded.extend(seq.iter().map(|&t| intern(t)));
            padded.push(EOS);
            for k in 1..=order {
                for win in padded.windows(k) {
                    if *win.last().unwrap() == BOS {
                        continue;
                    }
                    *counts[k - 1].entry(win.to_vec()).or_insert(0) += 1;
                }
            }
        }

        // Derived context statistics: total extension count and the number
        // of distinct extensions.
        let mut ctx_total: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        let mut ctx_distinct: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        for k in 1..=order {
            for (gram, &c) in &counts[k - 1] {
                let ctx = gram[..k - 1].to_vec();
                *ctx_total[k - 1].entry(ctx.clone()).or_insert(0) += c;
                *ctx_distinct[k - 1].entry(ctx).or_insert(0) += 1;
            }
        }

        let uniform = 1.0 / (vocab.len() + 1) as f64;
        let lambda = |k: usize, ctx: &[u32]| -> f64 {
            let total = ctx_total[k - 1][ctx] as f64;
            let distinct = ctx_distinct[k - 1][ctx] as f64;
            discount * distinct / total
        };
        // Interpolated probability for an order-k event gram, recursing on
        // raw counts of the shorter suffix.
        fn interp(
            k: usize,
            gram: &[u32],
            counts: &[HashMap<Vec<u32>, u64>],
            ctx_total: &[HashMap<Vec<u32>, u64>],
            ctx_distinct: &[HashMap<Vec<u32>, u64>],
            discount: f64,
            uniform: f64,
        ) -> f64 {
            if k == 0 {
                return uniform;
            }
            let ctx = &gram[..k - 1];
            let (total, distinct) = match ctx_total[k - 1].get(ctx) {
                Some(&t) => (t as f64, ctx_distinct[k - 1][ctx] as f64),
                // Context never seen at this order: defer entirely.
                None => {
                    return interp(
                        k - 1,
                        &gram[1..],
                        counts,
                        ctx_total,
                        ctx_distinct,
                        discount,
                        uniform,
                    )
                }
            };
            let c = counts[k - 1].get(gram).copied().unwrap_or(0) as f64;
            let lower = interp(
                k - 1,
                &gram[1..],
                counts,
                ctx_total,
                ctx_distinct,
                discount,
                uniform,
            );
            (c - discount).max(0.0) / total + discount * distinct / total * lower
        }

        let mut tables: Vec<HashMap<Vec<u32>, Entry>> = vec![HashMap::new(); order];
        for k in 1..=order {
            for gram in counts[k - 1].keys() {
                let p = interp(
                    k,
                    gram,
                    &counts,
                    &ctx_total,
                    &ctx_distinct,
                    discount,
                    uniform,
                );
                tables[k - 1].insert(
                    gram.clone(),
                    Entry {
                        logp: p.log10(),
                        bow: None,
                    },
                );
            }
        }
        // Backoff weights live on the context grams of every higher order.
        // Pure start-padding contexts have no event entry of their own, so
        // they get a placeholder probability.
        for k in 2..=order {
            for ctx in ctx_total[k - 1].keys() {
                let bow = lambda(k, ctx).log10();
                tables[k - 2]
                    .entry(ctx.clone())
                    .or_insert(Entry {
                        logp: PLACEHOLDER,
                        bow: None,
                    })
                    .bow = Some(bow);
            }
        }

        Ok(NgramModel {
            order,
            vocab,
            tables,
        })
    }

    /// Natural-log probability of `word` (or the end marker when `None`)
    /// given the symbols emitted so far. Contexts shorter than `order - 1`
    /// are start-padded; longer ones are truncated to the last `order - 1`.
    pub fn logprob(&self, context: &[usize], word: Option<usize>) -> f64 {
        let w = match word {
            Some(t) => {
                if !self.vocab.contains(&t) {
                    return f64::NEG_INFINITY;
                }
                intern(t)
            }
            None => EOS,
        };
        let need = self.order - 1;
        let mut ctx: Vec<u32> = Vec::with_capacity(need);
        if context.len() < need {
            ctx.resize(need - context.len(), BOS);
        }
        let tail = &context[context.len().saturating_sub(need)..];
        ctx.extend(tail.iter().map(|&t| intern(t)));
        self.lookup(&ctx, w) * LN_10
    }

    /// Classic ARPA back-off walk, in log10.
    fn lookup(&self, ctx: &[u32], w: u32) -> f64 {
        if ctx.is_empty() {
            return match self.tables[0].get(&vec![w]) {
                Some(e) => e.logp,
                // Declared but never seen: the unigram mass left for it is
                // λ(·) times the uniform floor.
                None => {
                    let lam = self.unigram_lambda().unwrap_or(1.0);
                    (lam / (self.vocab.len() + 1) as f64).log10()
                }
            };
        }
        let mut gram = ctx.to_vec();
        gram.push(w);
        if let Some(e) = self.tables[ctx.len()].get(&gram) {
            if e.logp != PLACEHOLDER {
                return e.logp;
            }
        }
        let bow = self.tables[ctx.len() - 1]
            .get(ctx)
            .and_then(|e| e.bow)
            .unwrap_or(0.0);
        bow + self.lookup(&ctx[1..], w)
    }

    /// λ(·) of the empty context: discounted mass of the unigram table,
    /// reconstructed from the stored probabilities so ARPA-loaded models
    /// agree. Σ_seen 10^logp + λ·uniform·|unseen| = 1.
    fn unigram_lambda(&self) -> Option<f64> {
        let uniform = 1.0 / (self.vocab.len() + 1) as f64;
        let mut seen_mass = 0.0;
        let mut seen = 0usize;
        for (gram, e) in &self.tables[0] {
            if gram[0] == BOS || e.logp == PLACEHOLDER {
                continue;
            }
            seen_mass += 10f64.powf(e.logp);
            seen += 1;
        }
        let unseen = (self.vocab.len() + 1).checked_sub(seen)?;
        if unseen == 0 {
            return Some(0.0);
        }
        Some((1.0 - seen_mass) / (uniform * unseen as f64))
    }

    /// Perplexity over held-out sequences (end marker included per sequence).
    pub fn perplexity(&self, seqs: &[Vec<usize>]) -> f64 {
        let mut nll = 0.0;
        let mut events = 0usize;
        for seq in seqs {
            for (i, &w) in seq.iter().enumerate() {
                nll -= self.logprob(&seq[..i], Some(w));
                events += 1;
            }
            nll -= self.logprob(seq, None);
            events += 1;
        }
        (nll / events as f64).exp()
    }

    fn token_string(sym: u32) -> String {
        match sym {
            BOS => "<s>".to_string(),
            EOS => "</s>".to_string(),
            t => (t - TOK_BASE).to_string(),
        }
    }

    fn parse_token(s: &str) -> Result<u32> {
        match s {
            "<s>" => Ok(BOS),
            "</s>" => Ok(EOS),
            t => t
                .parse::<usize>()
                .map(intern)
                .map_err(|_| PipelineError::Data(format!("bad ARPA token {t:?}"))),
        }
    }

    /// Serialize in ARPA format. A leading comment line carries the declared
    /// vocabulary so a round trip restores it exactly.
    pub fn save_arpa(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let vocab_list: Vec<String> = self.vocab.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("\\vocab {}\n\n", vocab_list.join(" ")));
        out.push_str("\\data\\\n");
        for k in 1..=self.order {
            out.push_str(&format!("ngram {}={}\n", k, self.tables[k - 1].len()));
        }
        for k in 1..=self.order {
            out.push_str(&format!("\n\\{k}-grams:\n"));
            let mut grams: Vec<&Vec<u32>> = self.tables[k - 1].keys().collect();
            grams.sort();
            for gram in grams {
                let e = self.tables[k - 1][gram];
                let toks: Vec<String> =
                    gram.iter().map(|&s| Self::token_string(s)).collect();
                match e.bow {
                    Some(b) => out.push_str(&format!("{}\t{}\t{}\n", e.logp, toks.join(" "), b)),
                    None => out.push_str(&format!("{}\t{}\n", e.logp, toks.join(" "))),
                }
            }
        }
        out.push_str("\n\\end\\\n");
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_arpa(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut vocab: Vec<usize> = Vec::new();
        let mut declared: Vec<usize> = Vec::new();
        let mut tables: Vec<HashMap<Vec<u32>, Entry>> = Vec::new();
        let mut current: Option<usize> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line == "\\data\\" || line == "\\end\\" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("\\vocab") {
                for t in rest.split_whitespace() {
                    vocab.push(t.parse::<usize>().map_err(|_| {
                        PipelineError::Data(format!("bad vocab token {t:?}"))
                    })?);
                }
                continue;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (k, n) = rest
                    .split_once('=')
                    .ok_or_else(|| PipelineError::Data(format!("bad count line {line:?}")))?;
                let k: usize = k
                    .trim()
                    .parse()
                    .map_err(|_| PipelineError::Data(format!("bad order in {line:?}")))?;
                let n: usize = n
                    .trim()
                    .parse()
                    .map_err(|_| PipelineError::Data(format!("bad count in {line:?}")))?;
                declared.push(n);
                if tables.len() < k {
                    tables.resize(k, HashMap::new());
                }
                continue;
            }
            if line.starts_with('\\') && line.ends_with("-grams:") {
                let k: usize = line[1..line.len() - "-grams:".len()]
                    .parse()
                    .map_err(|_| PipelineError::Data(format!("bad section {line:?}")))?;
                if k == 0 || k > tables.len() {
                    return Err(PipelineError::Data(format!(
                        "section {line:?} outside declared orders"
                    )));
                }
                current = Some(k);
                continue;
            }
            let k = current
                .ok_or_else(|| PipelineError::Data(format!("entry before any section: {line:?}")))?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 && fields.len() != 3 {
                return Err(PipelineError::Data(format!("bad ARPA line {line:?}")));
            }
            let logp: f64 = fields[0]
                .parse()
                .map_err(|_| PipelineError::Data(format!("bad logp in {line:?}")))?;
            let gram: Vec<u32> = fields[1]
                .split_whitespace()
                .map(Self::parse_token)
                .collect::<Result<_>>()?;
            if gram.len() != k {
                return Err(PipelineError::Data(format!(
                    "{}-gram with {} tokens: {line:?}",
                    k,
                    gram.len()
                )));
            }
            let bow = match fields.get(2) {
                Some(b) => Some(b.parse::<f64>().map_err(|_| {
                    PipelineError::Data(format!("bad backoff in {line:?}"))
                })?),
                None => None,
            };
            tables[k - 1].insert(gram, Entry { logp, bow });
        }
        if tables.is_empty() {
            return Err(PipelineError::Data("ARPA file declares no orders".to_string()));
        }
        for (k, &n) in declared.iter().enumerate() {
            if tables[k].len() != n {
                return Err(PipelineError::Data(format!(
                    "{}-gram section has {} entries, header says {}",
                    k + 1,
                    tables[k].len(),
                    n
                )));
            }
        }
        if vocab.is_empty() {
            return Err(PipelineError::Data(
                "ARPA file missing the \\vocab comment line".to_string(),
            ));
        }
        vocab.sort_unstable();
        vocab.dedup();
        Ok(NgramModel {
            order: tables.len(),
            vocab,
            tables,
        })
    }
}

impl UnitLm for NgramModel {
    fn logprob(&self, context: &[usize], unit: usize) -> f64 {
        NgramModel::logprob(self, context, Some(unit))
    }
}
