//! Block-level attention aggregation and probe feature extraction.

use crate::data::BatchItem;
use crate::error::{Error, Result};
use crate::TensorData;

/// Aggregate attention from source block `[a,b]` to destination block
/// `[c,d]` (inclusive ranges): attention from a block is averaged over
/// its rows while attention to a block is accumulated over its columns,
/// i.e. `(1/(b-a+1)) * sum_{i=a..b} sum_{j=c..d} attn[i,j]`.
pub fn block_attention(
    attn: &TensorData,
    src: (usize, usize),
    dst: (usize, usize),
) -> Result<f64> {
    let sh = attn.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::Dimension(format!(
            "block_attention: expected square [N,N], got {:?}",
            sh
        )));
    }
    let n = sh[0];
    let (a, b) = src;
    let (c, d) = dst;
    if a > b || b >= n || c > d || d >= n {
        return Err(Error::Domain(format!(
            "block_attention: empty or out-of-range block ({a},{b}) -> ({c},{d}) for N={n}"
        )));
    }
    let data = attn.data();
    let mut sum = 0.0;
    for i in a..=b {
        for j in c..=d {
            sum += data[i * n + j];
        }
    }
    Ok(sum / (b - a + 1) as f64)
}

/// Number of probe features per attention head.
pub const FEATURES_PER_HEAD: usize = 6;

/// Per-block probe features for one layer's attention `[H,N,N]`:
/// for each head, attention from the block to itself, to the question
/// sentence, to `[CLS]`, to the `[SEP]` tokens, to the rest of the
/// passage, and from the question to the block; concatenated over heads
/// (length `6*H`). Only loss-masked (pure passage) blocks are returned,
/// each with its block id.
pub fn probe_features(
    attn_layer: &TensorData,
    item: &BatchItem,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let sh = attn_layer.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(Error::Dimension(format!(
            "probe_features: expected [H,N,N], got {:?}",
            sh
        )));
    }
    let (heads, n) = (sh[0], sh[1]);
    if n != item.token_ids.len() {
        return Err(Error::Alignment(format!(
            "probe_features: trace length {} vs item length {}",
            n,
            item.token_ids.len()
        )));
    }
    let k = item.spec.block_size;
    let qe = item.question_span.1;
    // question sentence excludes [CLS] and the first [SEP]
    let q_sent = if qe >= 3 { Some((1, qe - 2)) } else { None };
    let cls = (0usize, 0usize);
    let mut seps = Vec::new();
    if qe >= 1 {
        seps.push(qe - 1);
    }
    if item.passage_span.1 < n {
        seps.push(item.passage_span.1);
    }
    let (ps, pe) = item.passage_span;

    let head_view = |h: usize| -> TensorData {
        let start = h * n * n;
        TensorData::new(vec![n, n], attn_layer.data()[start..start + n * n].to_vec()).unwrap()
    };

    let mut out = Vec::new();
    for j in 0..item.spec.num_blocks() {
        if !item.labels.loss_mask[j] {
            continue;
        }
        let (bs, be) = (j * k, (j + 1) * k - 1);
        let mut feats = Vec::with_capacity(FEATURES_PER_HEAD * heads);
        for h in 0..heads {
            let view = head_view(h);
            feats.push(block_attention(&view, (bs, be), (bs, be))?);
            feats.push(match q_sent {
                Some(q) => block_attention(&view, (bs, be), q)?,
                None => 0.0,
            });
            feats.push(block_attention(&view, (bs, be), cls)?);
            let mut sep_sum = 0.0;
            for &s in &seps {
                sep_sum += block_attention(&view, (bs, be), (s, s))?;
            }
            feats.push(sep_sum);
            // rest of passage: passage range minus this block
            let mut rest = 0.0;
            if ps < bs {
                rest += block_attention(&view, (bs, be), (ps, bs - 1))?;
            }
            if be + 1 < pe {
                rest += block_attention(&view, (bs, be), (be + 1, pe - 1))?;
            }
            feats.push(rest);
            feats.push(match q_sent {
                Some(q) => block_attention(&view, q, (bs, be))?,
                None => 0.0,
            });
        }
        out.push((j, feats));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_hand_sum() {
        // uniform 1/N, dst width 32 at N=64 -> 0.5
        let n = 64;
        let attn = TensorData::full(vec![n, n], 1.0 / n as f64);
        let v = block_attention(&attn, (0, 15), (0, 31)).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn full_sequence_is_row_normalization() {
        let n = 8;
        // random-ish rows normalized to 1
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                data[i * n + j] = ((i * 7 + j * 3) % 5 + 1) as f64;
                s += data[i * n + j];
            }
            for j in 0..n {
                data[i * n + j] /= s;
            }
        }
        let attn = TensorData::new(vec![n, n], data).unwrap();
        let v = block_attention(&attn, (0, n - 1), (0, n - 1)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cell_is_exact_entry() {
        let n = 4;
        let data: Vec<f64> = (0..16).map(|v| v as f64 * 0.01).collect();
        let attn = TensorData::new(vec![n, n], data.clone()).unwrap();
        let v = block_attention(&attn, (2, 2), (3, 3)).unwrap();
        assert_eq!(v, data[2 * 4 + 3]);
    }

    #[test]
    fn additive_over_disjoint_destinations() {
        let n = 12;
        let data: Vec<f64> = (0..n * n).map(|v| ((v * 13) % 7) as f64 * 0.1).collect();
        let attn = TensorData::new(vec![n, n], data).unwrap();
        let whole = block_attention(&attn, (0, 3), (4, 11)).unwrap();
        let left = block_attention(&attn, (0, 3), (4, 7)).unwrap();
        let right = block_attention(&attn, (0, 3), (8, 11)).unwrap();
        assert!((whole - (left + right)).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_domain_error() {
        let attn = TensorData::zeros(vec![4, 4]);
        assert!(matches!(
            block_attention(&attn, (0, 4), (0, 1)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            block_attention(&attn, (2, 1), (0, 1)),
            Err(Error::Domain(_))
        ));
    }
}
