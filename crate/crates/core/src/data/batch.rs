//! Batch assembly: padding, block partitioning and label construction.

use crate::blockskim::{
    add_evidence_labels, block_labels, partition_blocks, BlockLabels, BlockSpec,
};
use crate::data::example::QAExample;
use crate::data::tokenizer::PAD_ID;
use crate::error::{Error, Result};

/// One example prepared for a forward pass.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Index into the source example list.
    pub example_index: usize,
    /// Padded token ids (common batch length, multiple of the block size).
    pub token_ids: Vec<usize>,
    /// True at real-token positions.
    pub pad_mask: Vec<bool>,
    pub spec: BlockSpec,
    pub labels: BlockLabels,
    /// Inclusive gold answer span.
    pub answer: (usize, usize),
    /// Half-open passage range (valid span-decode region).
    pub passage_span: (usize, usize),
    /// Half-open question segment range ([CLS] question [SEP]).
    pub question_span: (usize, usize),
}

/// Pad the selected examples to a common length (a multiple of `k`) and
/// attach block structure and labels. With `evidence_labels`, evidence
/// blocks are folded into the positive label set.
pub fn make_batch(
    examples: &[QAExample],
    indices: &[usize],
    k: usize,
    evidence_labels: bool,
    max_len: usize,
) -> Result<Vec<BatchItem>> {
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    let longest = indices
        .iter()
        .map(|&i| examples[i].token_ids.len())
        .max()
        .unwrap();
    let batch_len = longest.div_ceil(k) * k;
    make_batch_padded(examples, indices, k, evidence_labels, max_len, batch_len)
}

/// [`make_batch`] with an explicit common length (aligning fresh items
/// with a previously captured trace).
pub fn make_batch_padded(
    examples: &[QAExample],
    indices: &[usize],
    k: usize,
    evidence_labels: bool,
    max_len: usize,
    batch_len: usize,
) -> Result<Vec<BatchItem>> {
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    if batch_len > max_len {
        return Err(Error::Dimension(format!(
            "batch length {batch_len} exceeds model maximum {max_len}"
        )));
    }
    if batch_len % k != 0 {
        return Err(Error::Dimension(format!(
            "batch length {batch_len} not a multiple of block size {k}"
        )));
    }
    if let Some(&long) = indices
        .iter()
        .find(|&&i| examples[i].token_ids.len() > batch_len)
    {
        return Err(Error::Dimension(format!(
            "example {long} longer than batch length {batch_len}"
        )));
    }
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let ex = &examples[i];
        let mut token_ids = ex.token_ids.clone();
        let pad_start = token_ids.len();
        token_ids.resize(batch_len, PAD_ID);
        let mut pad_mask = vec![true; pad_start];
        pad_mask.resize(batch_len, false);
        let spec = partition_blocks(batch_len, k, ex.question_span, pad_start)?;
        let mut labels = block_labels(&spec, ex.answer_span)?;
        if evidence_labels {
            add_evidence_labels(&spec, &mut labels, &ex.evidence_spans);
        }
        out.push(BatchItem {
            example_index: i,
            token_ids,
            pad_mask,
            spec,
            labels,
            answer: ex.answer_span,
            passage_span: ex.passage_span,
            question_span: ex.question_span,
        });
    }
    Ok(out)
}
