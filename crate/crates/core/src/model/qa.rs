//! Extractive-QA span head and loss.

use crate::error::{Error, Result};
use crate::model::encoder::{BoundQa, MASK_PENALTY};
use crate::numerics::Tensor;
use crate::{Graph, TensorData};

/// Start/end position logits, still attached to the graph.
#[derive(Debug, Clone, Copy)]
pub struct QaLogits {
    pub start: Tensor,
    pub end: Tensor,
}

/// One linear layer `d -> 2`; column 0 holds start logits, column 1 end
/// logits.
pub fn qa_head(g: &mut Graph, qa: &BoundQa, hidden: Tensor) -> Result<QaLogits> {
    let n = g.shape(hidden)[0];
    let both = g.matmul(hidden, qa.w)?;
    let both = g.add_bias(both, qa.b)?;
    let start = g.slice_last(both, 0, 1)?;
    let start = g.reshape(start, vec![n])?;
    let end = g.slice_last(both, 1, 1)?;
    let end = g.reshape(end, vec![n])?;
    Ok(QaLogits { start, end })
}

/// Mean of start and end cross entropies over positions, with padding
/// positions pushed out of the distribution by an additive penalty.
pub fn qa_loss(
    g: &mut Graph,
    logits: &QaLogits,
    pad_mask: &[bool],
    answer: (usize, usize),
) -> Result<Tensor> {
    let n = g.shape(logits.start)[0];
    if pad_mask.len() != n {
        return Err(Error::Dimension("qa_loss: pad mask length mismatch".into()));
    }
    let (s, e) = answer;
    if s > e || e >= n {
        return Err(Error::Data(format!(
            "qa_loss: answer span [{s}, {e}] invalid for length {n}"
        )));
    }
    let penalty: Vec<f64> = pad_mask
        .iter()
        .map(|&real| if real { 0.0 } else { MASK_PENALTY })
        .collect();
    let pen = g.constant(TensorData::from_slice(&penalty))?;
    let mut side = |logit: Tensor, target: usize| -> Result<Tensor> {
        let masked = g.add(logit, pen)?;
        let row = g.reshape(masked, vec![1, n])?;
        let ce = g.cross_entropy(row, &[target])?;
        g.sum(ce)
    };
    let ls = side(logits.start, s)?;
    let le = side(logits.end, e)?;
    let sum = g.add(ls, le)?;
    g.scale(sum, 0.5)
}
