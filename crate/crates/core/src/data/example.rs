//! Packed QA examples and the line-delimited JSON dataset format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::Vocab;
use crate::error::{Error, Result};

/// One packed extractive-QA example:
/// `[CLS] question [SEP] passage [SEP]` with no padding (padding is a
/// batch-time concern).
///
/// `question_span` and `passage_span` are half-open; `answer_span` and
/// `evidence_spans` are inclusive token ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct QAExample {
    pub token_ids: Vec<usize>,
    /// Question segment `[CLS] question [SEP]`, half-open.
    pub question_span: (usize, usize),
    /// Passage content (excludes the trailing `[SEP]`), half-open.
    pub passage_span: (usize, usize),
    /// Gold answer, inclusive.
    pub answer_span: (usize, usize),
    /// Multi-hop evidence sites, inclusive; empty when not applicable.
    pub evidence_spans: Vec<(usize, usize)>,
    /// First padding index; equals `token_ids.len()` for unpadded examples.
    pub pad_start: usize,
}

impl QAExample {
    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        let (qs, qe) = self.question_span;
        let (ps, pe) = self.passage_span;
        let (s, e) = self.answer_span;
        if qe > ps || pe > n || self.pad_start > n {
            return Err(Error::Data(format!(
                "inconsistent spans q={:?} p={:?} len={}",
                self.question_span, self.passage_span, n
            )));
        }
        if qs != 0 {
            return Err(Error::Data("question segment must start at 0".into()));
        }
        if s > e || s < ps || e >= pe {
            return Err(Error::Data(format!(
                "answer {:?} outside passage {:?}",
                self.answer_span, self.passage_span
            )));
        }
        for &(a, b) in &self.evidence_spans {
            if a > b || a < ps || b >= pe {
                return Err(Error::Data(format!(
                    "evidence ({a}, {b}) outside passage {:?}",
                    self.passage_span
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    question: [usize; 2],
    passage: [usize; 2],
    answer: [usize; 2],
    evidence: Vec<[usize; 2]>,
}

/// Write examples as line-delimited JSON with fields exactly
/// `tokens, question, passage, answer, evidence`.
pub fn write_ldjson(path: &Path, examples: &[QAExample], vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let rec = Record {
            tokens: vocab.strings(&ex.token_ids[..ex.pad_start]),
            question: [ex.question_span.0, ex.question_span.1],
            passage: [ex.passage_span.0, ex.passage_span.1],
            answer: [ex.answer_span.0, ex.answer_span.1],
            evidence: ex.evidence_spans.iter().map(|&(a, b)| [a, b]).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Frequency-capped vocabulary over a line-delimited JSON dataset.
pub fn ldjson_vocab(path: &Path, max_size: usize) -> Result<Vocab> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut counts: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {}", path.display(), lineno + 1, e)))?;
        for t in rec.tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    Ok(Vocab::from_counts(&counts, max_size))
}

/// Read a line-delimited JSON dataset, mapping token strings through the
/// vocabulary (OOV becomes `[UNK]`).
pub fn read_ldjson(path: &Path, vocab: &Vocab) -> Result<Vec<QAExample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {}", path.display(), lineno + 1, e))
        })?;
        let ex = QAExample {
            token_ids: vocab.ids(&rec.tokens),
            question_span: (rec.question[0], rec.question[1]),
            passage_span: (rec.passage[0], rec.passage[1]),
            answer_span: (rec.answer[0], rec.answer[1]),
            evidence_spans: rec.evidence.iter().map(|&[a, b]| (a, b)).collect(),
            pad_start: rec.tokens.len(),
        };
        ex.validate()
            .map_err(|e| Error::Parse(format!("{}:{}: {}", path.display(), lineno + 1, e)))?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenizer::{CLS_ID, SEP_ID};

    fn sample(vocab: &Vocab) -> QAExample {
        let w = |s: &str| vocab.id_of(s);
        QAExample {
            token_ids: vec![CLS_ID, w("w1"), SEP_ID, w("w2"), w("w3"), w("w4"), SEP_ID],
            question_span: (0, 3),
            passage_span: (3, 6),
            answer_span: (4, 5),
            evidence_spans: vec![(3, 3)],
            pad_start: 7,
        }
    }

    #[test]
    fn ldjson_round_trip() {
        let vocab = Vocab::from_tokens((1..5).map(|i| format!("w{i}")));
        let exs = vec![sample(&vocab), sample(&vocab)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ldjson");
        write_ldjson(&p, &exs, &vocab).unwrap();
        let back = read_ldjson(&p, &vocab).unwrap();
        assert_eq!(back, exs);
    }

    #[test]
    fn malformed_line_is_parse_error_with_context() {
        let vocab = Vocab::from_tokens(std::iter::empty());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ldjson");
        std::fs::write(&p, "{not json}\n").unwrap();
        match read_ldjson(&p, &vocab) {
            Err(Error::Parse(msg)) => assert!(msg.contains("bad.ldjson:1")),
            other => panic!("expected parse error, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn invalid_spans_rejected() {
        let vocab = Vocab::from_tokens((1..5).map(|i| format!("w{i}")));
        let mut ex = sample(&vocab);
        ex.answer_span = (1, 2); // inside question segment
        assert!(ex.validate().is_err());
    }
}
