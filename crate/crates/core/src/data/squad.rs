//! SQuAD v1.1 JSON ingestion at subset scale.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::data::example::QAExample;
use crate::data::tokenizer::{tokenize, tokenize_with_offsets, Vocab, CLS_ID, SEP_ID};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    #[serde(default)]
    #[allow(dead_code)]
    title: Option<String>,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    question: String,
    answers: Vec<SquadAnswer>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// Counters for examples dropped during conversion.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SquadSkips {
    /// Answer char offsets that map to no token span.
    pub unmappable_answer: usize,
    /// Answer fell beyond the passage-truncation point.
    pub answer_truncated: usize,
    /// Question alone exceeds the packing budget.
    pub question_too_long: usize,
    /// Question has no gold answers listed.
    pub no_answer: usize,
}

fn parse_file(path: &Path) -> Result<SquadFile> {
    let f = std::fs::File::open(path)?;
    serde_json::from_reader(std::io::BufReader::new(f))
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))
}

/// Frequency-capped vocabulary over all questions and contexts.
pub fn build_squad_vocab(path: &Path, max_size: usize) -> Result<Vocab> {
    let file = parse_file(path)?;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for article in &file.data {
        for para in &article.paragraphs {
            for tok in tokenize(&para.context) {
                *counts.entry(tok).or_insert(0) += 1;
            }
            for qa in &para.qas {
                for tok in tokenize(&qa.question) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(Vocab::from_counts(&counts, max_size))
}

/// Load and pack SQuAD v1.1 examples. Packed sequences longer than
/// `max_seq_len` are truncated from the passage tail; examples whose
/// answer is truncated away (or unmappable) are skipped and counted.
pub fn load_squad_json(
    path: &Path,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<(Vec<QAExample>, SquadSkips)> {
    let file = parse_file(path)?;
    let mut out = Vec::new();
    let mut skips = SquadSkips::default();
    for article in &file.data {
        for para in &article.paragraphs {
            let ctx_tokens = tokenize_with_offsets(&para.context);
            for qa in &para.qas {
                let Some(ans) = qa.answers.first() else {
                    skips.no_answer += 1;
                    continue;
                };
                let q_tokens = tokenize(&qa.question);
                // [CLS] q [SEP] ctx [SEP]
                let budget = max_seq_len.saturating_sub(3 + q_tokens.len());
                if budget == 0 {
                    skips.question_too_long += 1;
                    continue;
                }
                let Some((tok_s, tok_e)) = answer_token_span(&ctx_tokens, ans) else {
                    skips.unmappable_answer += 1;
                    continue;
                };
                let keep = ctx_tokens.len().min(budget);
                if tok_e >= keep {
                    skips.answer_truncated += 1;
                    continue;
                }
                let mut token_ids = Vec::with_capacity(3 + q_tokens.len() + keep);
                token_ids.push(CLS_ID);
                for t in &q_tokens {
                    token_ids.push(vocab.id_of(t));
                }
                token_ids.push(SEP_ID);
                let passage_start = token_ids.len();
                for (t, _, _) in &ctx_tokens[..keep] {
                    token_ids.push(vocab.id_of(t));
                }
                token_ids.push(SEP_ID);
                let ex = QAExample {
                    question_span: (0, passage_start),
                    passage_span: (passage_start, passage_start + keep),
                    answer_span: (passage_start + tok_s, passage_start + tok_e),
                    evidence_spans: Vec::new(),
                    pad_start: token_ids.len(),
                    token_ids,
                };
                ex.validate()?;
                out.push(ex);
            }
        }
    }
    Ok((out, skips))
}

/// Map a char-offset answer onto an inclusive token span of the context.
fn answer_token_span(
    ctx_tokens: &[(String, usize, usize)],
    ans: &SquadAnswer,
) -> Option<(usize, usize)> {
    let ans_len = ans.text.chars().count();
    if ans_len == 0 {
        return None;
    }
    let (cs, ce) = (ans.answer_start, ans.answer_start + ans_len);
    let mut first = None;
    let mut last = None;
    for (i, &(_, ts, te)) in ctx_tokens.iter().enumerate() {
        if te > cs && ts < ce {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{
      "version": "1.1",
      "data": [
        {
          "title": "Cats",
          "paragraphs": [
            {
              "context": "The cat sat on the mat. It purred loudly.",
              "qas": [
                {
                  "id": "q1",
                  "question": "What sat on the mat?",
                  "answers": [{"text": "cat", "answer_start": 4}]
                },
                {
                  "id": "q2",
                  "question": "Where did the cat sit?",
                  "answers": [{"text": "the mat", "answer_start": 15}]
                }
              ]
            }
          ]
        }
      ]
    }"#;

    fn write_fixture(dir: &tempfile::TempDir, content: &str) -> std::path::PathBuf {
        let p = dir.path().join("squad.json");
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn fixture_parses_and_recovers_answer_spans() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(&dir, FIXTURE);
        let vocab = build_squad_vocab(&p, 256).unwrap();
        let (exs, skips) = load_squad_json(&p, &vocab, 64).unwrap();
        assert_eq!(exs.len(), 2);
        assert_eq!(skips, SquadSkips::default());

        // q1: answer char offset 4, text "cat" -> exactly the token "cat"
        let ex = &exs[0];
        let (s, e) = ex.answer_span;
        assert_eq!(s, e);
        assert_eq!(vocab.token(ex.token_ids[s]), "cat");

        // q2: "the mat" covers two tokens
        let ex = &exs[1];
        let (s, e) = ex.answer_span;
        assert_eq!(e - s, 1);
        assert_eq!(vocab.token(ex.token_ids[s]), "the");
        assert_eq!(vocab.token(ex.token_ids[e]), "mat");
    }

    #[test]
    fn empty_data_array_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(&dir, r#"{"data": []}"#);
        let vocab = Vocab::from_tokens(std::iter::empty());
        let (exs, _) = load_squad_json(&p, &vocab, 64).unwrap();
        assert!(exs.is_empty());
    }

    #[test]
    fn malformed_json_is_parse_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(&dir, "{oops");
        match build_squad_vocab(&p, 64) {
            Err(Error::Parse(msg)) => assert!(msg.contains("squad.json")),
            other => panic!("expected parse error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncated_answers_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(&dir, FIXTURE);
        let vocab = build_squad_vocab(&p, 256).unwrap();
        // budget so small the passage is cut before the answers
        let (exs, skips) = load_squad_json(&p, &vocab, 12).unwrap();
        assert!(exs.len() < 2);
        assert!(skips.answer_truncated >= 1);
    }

    #[test]
    fn random_offset_fixtures_recover_substrings() {
        // construct contexts with known word positions and verify the
        // char-offset -> token-span mapping by substring equality
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let words = ["alpha", "bravo", "charlie", "delta", "echo", "fox"];
        for _ in 0..100 {
            let n = rng.gen_range(5..30);
            let toks: Vec<&str> = (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect();
            let context = toks.join(" ");
            let ai = rng.gen_range(0..n);
            let alen = rng.gen_range(1..=(n - ai).min(3));
            let answer_text = toks[ai..ai + alen].join(" ");
            let answer_start: usize = toks[..ai].iter().map(|w| w.len() + 1).sum();
            let ctx_tokens = tokenize_with_offsets(&context);
            let ans = SquadAnswer {
                text: answer_text.clone(),
                answer_start,
            };
            let (s, e) = answer_token_span(&ctx_tokens, &ans).unwrap();
            let recovered: Vec<String> =
                ctx_tokens[s..=e].iter().map(|(t, _, _)| t.clone()).collect();
            assert_eq!(recovered.join(" "), answer_text);
        }
    }
}
