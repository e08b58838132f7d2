//! Block relevance losses and their combination with the QA loss.

use crate::blockskim::blocks::BlockLabels;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, TensorData};

/// Per-layer relevance loss, split by label so the balance factor can be
/// applied to the positive side exactly once.
///
/// Returns `(loss_pos, loss_neg)`: sums of per-block cross entropies over
/// loss-masked blocks with label 1 and 0 respectively. Either side is a
/// constant zero when it has no blocks.
pub fn blockskim_loss(
    g: &mut Graph<f64>,
    logits: Tensor,
    labels: &BlockLabels,
) -> Result<(Tensor, Tensor)> {
    let sh = g.shape(logits);
    if sh.len() != 2 || sh[1] != 2 {
        return Err(Error::Dimension(format!(
            "blockskim_loss: logits must be [blocks, 2], got {:?}",
            sh
        )));
    }
    if sh[0] != labels.y.len() {
        return Err(Error::Dimension(format!(
            "blockskim_loss: {} logit rows vs {} blocks",
            sh[0],
            labels.y.len()
        )));
    }
    let side = |g: &mut Graph<f64>, want: u8| -> Result<Tensor> {
        let idx: Vec<usize> = (0..labels.y.len())
            .filter(|&j| labels.loss_mask[j] && labels.y[j] == want)
            .collect();
        if idx.is_empty() {
            return g.constant(TensorData::scalar(0.0));
        }
        let rows = g.index_select_rows(logits, &idx)?;
        let targets = vec![want as usize; idx.len()];
        let ce = g.cross_entropy(rows, &targets)?;
        g.sum(ce)
    };
    Ok((side(g, 1)?, side(g, 0)?))
}

/// Total objective: `l_qa + alpha * sum_layers(beta * pos + neg)`.
/// With `alpha = 0` this is exactly the QA loss.
pub fn total_loss(
    g: &mut Graph<f64>,
    l_qa: Tensor,
    per_layer: &[(Tensor, Tensor)],
    alpha: f64,
    beta: f64,
) -> Result<Tensor> {
    if alpha < 0.0 {
        return Err(Error::Domain(format!("alpha must be >= 0, got {}", alpha)));
    }
    if beta <= 0.0 {
        return Err(Error::Domain(format!("beta must be > 0, got {}", beta)));
    }
    let mut skim_sum: Option<Tensor> = None;
    for &(pos, neg) in per_layer {
        let weighted = g.scale(pos, beta)?;
        let layer = g.add(weighted, neg)?;
        skim_sum = Some(match skim_sum {
            Some(acc) => g.add(acc, layer)?,
            None => layer,
        });
    }
    match skim_sum {
        Some(sum) => {
            let scaled = g.scale(sum, alpha)?;
            g.add(l_qa, scaled)
        }
        None => Ok(l_qa),
    }
}

/// Balance factor from the training set's block label statistics:
/// masked negatives over masked positives, rounded to the nearest
/// integer with a floor of 1.
pub fn compute_beta<'a>(labels: impl IntoIterator<Item = &'a BlockLabels>) -> Result<f64> {
    let mut pos = 0usize;
    let mut neg = 0usize;
    for l in labels {
        pos += l.masked_positive_count();
        neg += l.masked_negative_count();
    }
    if pos == 0 {
        return Err(Error::Data(
            "compute_beta: no positive blocks in dataset".into(),
        ));
    }
    let ratio = neg as f64 / pos as f64;
    Ok(ratio.round().max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockskim::blocks::BlockLabels;

    fn uniform_logits(g: &mut Graph<f64>, n: usize) -> Tensor {
        g.constant(TensorData::zeros(vec![n, 2])).unwrap()
    }

    fn labels(y: Vec<u8>, mask: Vec<bool>) -> BlockLabels {
        BlockLabels { y, loss_mask: mask }
    }

    #[test]
    fn balanced_hand_case_is_29_ln2() {
        let mut g = Graph::<f64>::new();
        let logits = uniform_logits(&mut g, 10);
        let mut y = vec![0u8; 10];
        y[0] = 1;
        let l = labels(y, vec![true; 10]);
        let (pos, neg) = blockskim_loss(&mut g, logits, &l).unwrap();
        let qa = g.constant(TensorData::scalar(0.0)).unwrap();
        let total = total_loss(&mut g, qa, &[(pos, neg)], 1.0, 20.0).unwrap();
        let expect = 29.0 * std::f64::consts::LN_2;
        assert!((g.value(total).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn all_masked_out_gives_zero_zero() {
        let mut g = Graph::<f64>::new();
        let logits = uniform_logits(&mut g, 4);
        let l = labels(vec![1, 0, 0, 1], vec![false; 4]);
        let (pos, neg) = blockskim_loss(&mut g, logits, &l).unwrap();
        assert_eq!(g.value(pos).item(), 0.0);
        assert_eq!(g.value(neg).item(), 0.0);
    }

    #[test]
    fn saturated_logits_give_tiny_losses() {
        let mut g = Graph::<f64>::new();
        let rows: Vec<Vec<f64>> = vec![
            vec![-10.0, 10.0], // y=1, confident positive
            vec![10.0, -10.0], // y=0, confident negative
        ];
        let logits = g
            .constant(TensorData::from_rows(&rows).unwrap())
            .unwrap();
        let l = labels(vec![1, 0], vec![true, true]);
        let (pos, neg) = blockskim_loss(&mut g, logits, &l).unwrap();
        assert!(g.value(pos).item() < 1e-3);
        assert!(g.value(neg).item() < 1e-3);
    }

    #[test]
    fn alpha_zero_reduces_to_qa_loss() {
        let mut g = Graph::<f64>::new();
        let logits = uniform_logits(&mut g, 6);
        let l = labels(vec![1, 0, 0, 0, 0, 0], vec![true; 6]);
        let (pos, neg) = blockskim_loss(&mut g, logits, &l).unwrap();
        let qa = g.constant(TensorData::scalar(1.37)).unwrap();
        let total = total_loss(&mut g, qa, &[(pos, neg)], 0.0, 20.0).unwrap();
        assert_eq!(g.value(total).item(), 1.37);
    }

    #[test]
    fn two_layer_hand_total() {
        // l_qa=1.0, alpha=0.1, two layers each 29*ln2 with beta=20
        let mut g = Graph::<f64>::new();
        let mut per_layer = Vec::new();
        for _ in 0..2 {
            let logits = uniform_logits(&mut g, 10);
            let mut y = vec![0u8; 10];
            y[0] = 1;
            let l = labels(y, vec![true; 10]);
            per_layer.push(blockskim_loss(&mut g, logits, &l).unwrap());
        }
        let qa = g.constant(TensorData::scalar(1.0)).unwrap();
        let total = total_loss(&mut g, qa, &per_layer, 0.1, 20.0).unwrap();
        let expect = 1.0 + 0.1 * 2.0 * 29.0 * std::f64::consts::LN_2;
        assert!((g.value(total).item() - expect).abs() < 1e-9);
        // matches the rounded hand figure too
        assert!((g.value(total).item() - 5.020).abs() < 1e-3);
    }

    #[test]
    fn beta_scales_positive_side_linearly() {
        let mut g = Graph::<f64>::new();
        let logits = uniform_logits(&mut g, 8);
        let l = labels(vec![1, 1, 0, 0, 0, 0, 0, 0], vec![true; 8]);
        let (pos, neg) = blockskim_loss(&mut g, logits, &l).unwrap();
        let qa = g.constant(TensorData::scalar(0.0)).unwrap();
        let t1 = total_loss(&mut g, qa, &[(pos, neg)], 1.0, 1.0).unwrap();
        let t5 = total_loss(&mut g, qa, &[(pos, neg)], 1.0, 5.0).unwrap();
        let pos_v = g.value(pos).item();
        let diff = g.value(t5).item() - g.value(t1).item();
        assert!((diff - 4.0 * pos_v).abs() < 1e-12);
    }

    #[test]
    fn beta_from_counts() {
        let balanced = vec![labels(vec![1, 0], vec![true, true])];
        assert_eq!(compute_beta(&balanced).unwrap(), 1.0);

        let three_to_one = vec![labels(vec![1, 0, 0, 0], vec![true; 4])];
        assert_eq!(compute_beta(&three_to_one).unwrap(), 3.0);

        let no_pos = vec![labels(vec![0, 0], vec![true, true])];
        assert!(matches!(compute_beta(&no_pos), Err(Error::Data(_))));

        // floor at 1 even when negatives are rare
        let pos_heavy = vec![labels(vec![1, 1, 1, 0], vec![true; 4])];
        assert_eq!(compute_beta(&pos_heavy).unwrap(), 1.0);
    }
}
