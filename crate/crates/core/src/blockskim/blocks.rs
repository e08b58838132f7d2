//! Block partitioning of packed QA sequences and per-block relevance
//! labels.

use crate::error::{Error, Result};

/// What a block contains, decided by segment overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Contains question-segment tokens ([CLS] question [SEP]) only.
    Question,
    /// Contains passage tokens (possibly with trailing [SEP] or padding).
    Passage,
    /// Entirely padding.
    Pad,
    /// Straddles the question/passage boundary. Treated like `Question`
    /// everywhere: never skimmed, never in the loss.
    Mixed,
}

impl BlockKind {
    /// Blocks that must survive every skim decision.
    pub fn is_protected(self) -> bool {
        matches!(self, BlockKind::Question | BlockKind::Mixed)
    }
}

/// Partition of `[0, padded_len)` into `padded_len / k` disjoint blocks
/// of `k` token positions each.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub block_size: usize,
    pub padded_len: usize,
    pub kinds: Vec<BlockKind>,
}

impl BlockSpec {
    pub fn num_blocks(&self) -> usize {
        self.kinds.len()
    }

    /// Half-open token range `[j*k, (j+1)*k)` of block `j`.
    pub fn range(&self, j: usize) -> (usize, usize) {
        (j * self.block_size, (j + 1) * self.block_size)
    }

    pub fn block_of(&self, token: usize) -> usize {
        token / self.block_size
    }
}

/// Assign block kinds for a packed sequence.
///
/// `question_span` is the half-open token range of the question segment
/// (normally `[0, question_end)`, covering [CLS] question [SEP]); it may
/// be empty for synthetic no-question layouts. `pad_start` is the index
/// of the first padding token.
pub fn partition_blocks(
    padded_len: usize,
    k: usize,
    question_span: (usize, usize),
    pad_start: usize,
) -> Result<BlockSpec> {
    if k == 0 {
        return Err(Error::Config("block size must be >= 1".into()));
    }
    if k > padded_len {
        return Err(Error::Config(format!(
            "block size {} exceeds padded length {}",
            k, padded_len
        )));
    }
    if padded_len % k != 0 {
        return Err(Error::Config(format!(
            "padded length {} not a multiple of block size {}",
            padded_len, k
        )));
    }
    let (qs, qe) = question_span;
    let kinds = (0..padded_len / k)
        .map(|j| {
            let (bs, be) = (j * k, (j + 1) * k);
            let has_question = qs < qe && bs < qe && qs < be;
            let has_non_pad = bs < pad_start;
            // real tokens after the question segment (passage or trailing [SEP])
            let has_post_question = bs.max(qe) < be.min(pad_start);
            if !has_non_pad {
                BlockKind::Pad
            } else if has_question && has_post_question {
                BlockKind::Mixed
            } else if has_question {
                BlockKind::Question
            } else {
                BlockKind::Passage
            }
        })
        .collect();
    Ok(BlockSpec {
        block_size: k,
        padded_len,
        kinds,
    })
}

/// Per-block binary relevance targets plus the loss participation mask.
#[derive(Debug, Clone)]
pub struct BlockLabels {
    /// 1 iff the block overlaps the answer span (or an evidence span when
    /// evidence labelling is enabled).
    pub y: Vec<u8>,
    /// True only for pure passage blocks; question/mixed/pad blocks never
    /// enter the relevance loss.
    pub loss_mask: Vec<bool>,
}

impl BlockLabels {
    pub fn masked_positive_count(&self) -> usize {
        self.y
            .iter()
            .zip(&self.loss_mask)
            .filter(|(y, m)| **m && **y == 1)
            .count()
    }

    pub fn masked_negative_count(&self) -> usize {
        self.y
            .iter()
            .zip(&self.loss_mask)
            .filter(|(y, m)| **m && **y == 0)
            .count()
    }
}

/// Label blocks against an inclusive answer span `[s, e]`.
pub fn block_labels(spec: &BlockSpec, answer_span: (usize, usize)) -> Result<BlockLabels> {
    let (s, e) = answer_span;
    if s > e || e >= spec.padded_len {
        return Err(Error::Data(format!(
            "answer span [{}, {}] invalid for length {}",
            s, e, spec.padded_len
        )));
    }
    for j in 0..spec.num_blocks() {
        let (bs, be) = spec.range(j);
        let overlaps = bs <= e && s < be;
        if overlaps && matches!(spec.kinds[j], BlockKind::Question) {
            return Err(Error::Data(format!(
                "answer span [{}, {}] overlaps question block {}",
                s, e, j
            )));
        }
    }
    let y = (0..spec.num_blocks())
        .map(|j| {
            let (bs, be) = spec.range(j);
            u8::from(bs <= e && s < be)
        })
        .collect();
    let loss_mask = spec
        .kinds
        .iter()
        .map(|kind| matches!(kind, BlockKind::Passage))
        .collect();
    Ok(BlockLabels { y, loss_mask })
}

/// OR evidence spans (inclusive) into existing labels; only passage
/// blocks are affected.
pub fn add_evidence_labels(
    spec: &BlockSpec,
    labels: &mut BlockLabels,
    evidence_spans: &[(usize, usize)],
) {
    for &(s, e) in evidence_spans {
        for j in 0..spec.num_blocks() {
            let (bs, be) = spec.range(j);
            if bs <= e && s < be && labels.loss_mask[j] {
                labels.y[j] = 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squad_scale_partition_has_twelve_blocks() {
        let spec = partition_blocks(384, 32, (0, 12), 384).unwrap();
        assert_eq!(spec.num_blocks(), 12);
    }

    #[test]
    fn block_size_one_is_token_granularity() {
        let spec = partition_blocks(16, 1, (0, 4), 16).unwrap();
        assert_eq!(spec.num_blocks(), 16);
    }

    #[test]
    fn kinds_from_question_range() {
        // seq 64, k=32, question tokens 0..9 -> block 0 mixed-or-question,
        // block 1 passage. Question segment ends inside block 0, so block 0
        // also holds passage tokens and is Mixed (treated as question).
        let spec = partition_blocks(64, 32, (0, 10), 64).unwrap();
        assert!(spec.kinds[0].is_protected());
        assert_eq!(spec.kinds[1], BlockKind::Passage);
    }

    #[test]
    fn question_exactly_fills_block() {
        let spec = partition_blocks(64, 32, (0, 32), 64).unwrap();
        assert_eq!(spec.kinds[0], BlockKind::Question);
        assert_eq!(spec.kinds[1], BlockKind::Passage);
    }

    #[test]
    fn pad_blocks_detected() {
        let spec = partition_blocks(64, 16, (0, 8), 40).unwrap();
        assert_eq!(spec.kinds[3], BlockKind::Pad);
        assert_eq!(spec.kinds[2], BlockKind::Passage);
    }

    #[test]
    fn oversized_block_is_config_error() {
        assert!(matches!(
            partition_blocks(16, 32, (0, 4), 16),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn labels_mark_answer_block_and_mask_question() {
        let spec = partition_blocks(128, 32, (0, 12), 128).unwrap();
        let labels = block_labels(&spec, (40, 45)).unwrap();
        assert_eq!(labels.y[1], 1);
        assert_eq!(labels.y[2], 0);
        assert!(!labels.loss_mask[0], "question block masked out");
        assert!(labels.loss_mask[1]);
    }

    #[test]
    fn answer_straddling_blocks_marks_both() {
        // no-question synthetic layout: both covering blocks are passage
        let spec = partition_blocks(64, 32, (0, 0), 64).unwrap();
        let labels = block_labels(&spec, (30, 33)).unwrap();
        assert_eq!(labels.y, vec![1, 1]);
        assert!(labels.loss_mask.iter().all(|&m| m));
    }

    #[test]
    fn whole_passage_answer_marks_every_passage_block() {
        let spec = partition_blocks(96, 32, (0, 32), 96).unwrap();
        let labels = block_labels(&spec, (32, 95)).unwrap();
        assert_eq!(labels.y, vec![0, 1, 1]);
    }

    #[test]
    fn answer_in_question_is_data_error() {
        let spec = partition_blocks(64, 32, (0, 32), 64).unwrap();
        assert!(matches!(block_labels(&spec, (8, 9)), Err(Error::Data(_))));
    }

    #[test]
    fn evidence_or_only_touches_passage_blocks() {
        let spec = partition_blocks(128, 32, (0, 12), 128).unwrap();
        let mut labels = block_labels(&spec, (40, 45)).unwrap();
        let before = labels.y.clone();
        add_evidence_labels(&spec, &mut labels, &[(70, 75)]);
        assert_eq!(labels.y[2], 1);
        // only the evidence block changed
        for j in 0..spec.num_blocks() {
            if j != 2 {
                assert_eq!(labels.y[j], before[j]);
            }
        }
    }
}
