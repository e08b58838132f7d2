//! Synthetic extractive-QA generation.
//!
//! Needle-in-haystack construction: a two-token key from the question
//! reappears in the passage directly before the answer tokens, with
//! distractor sites that share the key's first token but not its second.
//! Evidence mode plants a two-hop chain instead: the key points at an
//! evidence token elsewhere, and the answer follows the evidence token's
//! second occurrence.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::example::QAExample;
use crate::data::tokenizer::{Vocab, CLS_ID, SEP_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total vocabulary size including the 4 special tokens.
    pub vocab_size: usize,
    /// Packed sequence length target ([CLS] q [SEP] passage [SEP]).
    pub seq_len: usize,
    pub question_len: usize,
    pub answer_len: usize,
    pub num_distractors: usize,
    pub evidence_mode: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            seq_len: 128,
            question_len: 8,
            answer_len: 4,
            num_distractors: 3,
            evidence_mode: false,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn passage_len(&self) -> usize {
        self.seq_len.saturating_sub(self.question_len + 3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 16 {
            return Err(Error::Config("synth vocab_size must be >= 16".into()));
        }
        if self.question_len < 2 {
            return Err(Error::Config(
                "question_len must hold the 2-token key".into(),
            ));
        }
        if self.answer_len == 0 {
            return Err(Error::Config("answer_len must be >= 1".into()));
        }
        let site_budget = (2 + self.answer_len)
            + if self.evidence_mode { 4 } else { 0 }
            + 2 * self.num_distractors;
        // leave half the passage as filler so site placement terminates
        if self.passage_len() < 2 * site_budget || self.passage_len() == 0 {
            return Err(Error::Config(format!(
                "seq_len {} cannot hold question {} + {} site tokens",
                self.seq_len, self.question_len, site_budget
            )));
        }
        Ok(())
    }
}

/// Vocabulary of `w0..w{n}` content words matching `cfg.vocab_size`.
pub fn synth_vocab(cfg: &SynthConfig) -> Vocab {
    Vocab::from_tokens((0..cfg.vocab_size.saturating_sub(4)).map(|i| format!("w{i}")))
}

/// Claim `len` consecutive unoccupied slots, leaving a one-token gap
/// around every site so planted patterns never merge.
fn place_site(rng: &mut ChaCha8Rng, occupied: &mut [bool], len: usize) -> Result<usize> {
    let n = occupied.len();
    if len > n {
        return Err(Error::Config("site longer than passage".into()));
    }
    let dist = Uniform::from(0..n - len + 1);
    for _ in 0..10_000 {
        let start = dist.sample(rng);
        let lo = start.saturating_sub(1);
        let hi = (start + len + 1).min(n);
        if occupied[lo..hi].iter().any(|&o| o) {
            continue;
        }
        for o in &mut occupied[start..start + len] {
            *o = true;
        }
        return Ok(start);
    }
    Err(Error::Config(
        "could not place synthetic sites; passage too crowded".into(),
    ))
}

pub fn gen_synthetic(cfg: &SynthConfig, n: usize) -> Result<Vec<QAExample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let content = Uniform::from(4..cfg.vocab_size);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(gen_one(cfg, &mut rng, &content)?);
    }
    Ok(out)
}

fn gen_one(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    content: &Uniform<usize>,
) -> Result<QAExample> {
    let key1 = content.sample(rng);
    let key2 = loop {
        let t = content.sample(rng);
        if t != key1 {
            break t;
        }
    };
    let evidence_tok = loop {
        let t = content.sample(rng);
        if t != key1 && t != key2 {
            break t;
        }
    };
    // filler tokens must never fake a site: forbid the key head and the
    // evidence token
    let filler = |rng: &mut ChaCha8Rng| loop {
        let t = content.sample(rng);
        if t != key1 && (!cfg.evidence_mode || t != evidence_tok) {
            return t;
        }
    };

    let jitter_max = (cfg.passage_len() / 8).min(8);
    let jitter = if jitter_max > 0 {
        rng.gen_range(0..=jitter_max)
    } else {
        0
    };
    let plen = cfg.passage_len() - jitter;

    let mut passage: Vec<usize> = (0..plen).map(|_| filler(rng)).collect();
    let mut occupied = vec![false; plen];

    let (answer_rel, evidence_rel) = if cfg.evidence_mode {
        // site A: key1 key2 evidence ; site B: evidence answer...
        let a = place_site(rng, &mut occupied, 3)?;
        let b = place_site(rng, &mut occupied, 1 + cfg.answer_len)?;
        passage[a] = key1;
        passage[a + 1] = key2;
        passage[a + 2] = evidence_tok;
        passage[b] = evidence_tok;
        for i in 0..cfg.answer_len {
            passage[b + 1 + i] = filler(rng);
        }
        ((b + 1, b + cfg.answer_len), Some((a, a + 2)))
    } else {
        let a = place_site(rng, &mut occupied, 2 + cfg.answer_len)?;
        passage[a] = key1;
        passage[a + 1] = key2;
        for i in 0..cfg.answer_len {
            passage[a + 2 + i] = filler(rng);
        }
        ((a + 2, a + 1 + cfg.answer_len), None)
    };

    for _ in 0..cfg.num_distractors {
        let d = place_site(rng, &mut occupied, 2)?;
        passage[d] = key1;
        passage[d + 1] = loop {
            let t = content.sample(rng);
            if t != key2 && t != key1 && (!cfg.evidence_mode || t != evidence_tok) {
                break t;
            }
        };
    }

    let mut token_ids = Vec::with_capacity(plen + cfg.question_len + 3);
    token_ids.push(CLS_ID);
    token_ids.push(key1);
    token_ids.push(key2);
    for _ in 2..cfg.question_len {
        token_ids.push(filler(rng));
    }
    token_ids.push(SEP_ID);
    let passage_start = token_ids.len();
    token_ids.extend_from_slice(&passage);
    token_ids.push(SEP_ID);

    let ex = QAExample {
        question_span: (0, passage_start),
        passage_span: (passage_start, passage_start + plen),
        answer_span: (
            passage_start + answer_rel.0,
            passage_start + answer_rel.1,
        ),
        evidence_spans: evidence_rel
            .map(|(a, b)| vec![(passage_start + a, passage_start + b)])
            .unwrap_or_default(),
        pad_start: token_ids.len(),
        token_ids,
    };
    ex.validate()?;
    Ok(ex)
}
