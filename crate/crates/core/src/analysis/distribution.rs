//! Received-attention distributions: answer tokens vs irrelevant tokens.

use serde::Serialize;

use crate::data::BatchItem;
use crate::error::{Error, Result};
use crate::TensorData;

pub const HISTOGRAM_BINS: usize = 32;

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub answer: Vec<u64>,
    pub irrelevant: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerDistribution {
    pub layer: usize,
    pub answer_mean: f64,
    pub answer_std: f64,
    pub answer_count: usize,
    pub irrelevant_mean: f64,
    pub irrelevant_std: f64,
    pub irrelevant_count: usize,
    pub histogram: Histogram,
}

/// Per-layer comparison of received attention on answer vs irrelevant
/// passage tokens.
#[derive(Debug, Clone, Serialize)]
pub struct AttnDistribution {
    pub layers: Vec<LayerDistribution>,
}

/// Received attention per token: column sum over non-pad rows divided by
/// the row count, averaged over heads.
fn received_attention(attn: &TensorData, pad_mask: &[bool]) -> Vec<f64> {
    let sh = attn.shape();
    let (heads, n) = (sh[0], sh[1]);
    let rows: Vec<usize> = (0..n).filter(|&i| pad_mask[i]).collect();
    let data = attn.data();
    let mut out = vec![0.0; n];
    for h in 0..heads {
        let base = h * n * n;
        for &i in &rows {
            let row = &data[base + i * n..base + (i + 1) * n];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    let denom = (rows.len() * heads) as f64;
    for o in &mut out {
        *o /= denom;
    }
    out
}

/// Profile captured traces against their examples. Answer tokens are the
/// gold span; irrelevant tokens are the remaining passage tokens. The
/// two groups partition the passage.
pub fn profile_distribution(
    traces: &[Vec<TensorData>],
    items: &[BatchItem],
) -> Result<AttnDistribution> {
    if traces.len() != items.len() {
        return Err(Error::Alignment(format!(
            "{} traces vs {} examples",
            traces.len(),
            items.len()
        )));
    }
    if traces.is_empty() {
        return Err(Error::Data("profile_distribution: empty input".into()));
    }
    let layers = traces[0].len();
    let mut answer: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut irrelevant: Vec<Vec<f64>> = vec![Vec::new(); layers];
    for (trace, item) in traces.iter().zip(items) {
        if trace.len() != layers {
            return Err(Error::Alignment("inconsistent layer count in traces".into()));
        }
        for (l, attn) in trace.iter().enumerate() {
            if attn.shape().len() != 3 || attn.shape()[1] != item.token_ids.len() {
                return Err(Error::Alignment(format!(
                    "trace shape {:?} vs item length {}",
                    attn.shape(),
                    item.token_ids.len()
                )));
            }
            let recv = received_attention(attn, &item.pad_mask);
            let (s, e) = item.answer;
            for t in item.passage_span.0..item.passage_span.1 {
                if !item.pad_mask[t] {
                    continue;
                }
                if t >= s && t <= e {
                    answer[l].push(recv[t]);
                } else {
                    irrelevant[l].push(recv[t]);
                }
            }
        }
    }

    let stats = |v: &[f64]| -> (f64, f64) {
        if v.is_empty() {
            return (0.0, 0.0);
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };

    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let (am, asd) = stats(&answer[l]);
        let (im, isd) = stats(&irrelevant[l]);
        let hi = answer[l]
            .iter()
            .chain(&irrelevant[l])
            .copied()
            .fold(0.0_f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut hist = Histogram {
            lo: 0.0,
            hi,
            answer: vec![0; HISTOGRAM_BINS],
            irrelevant: vec![0; HISTOGRAM_BINS],
        };
        let bin = |v: f64| -> usize {
            (((v / hi) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
        };
        for &v in &answer[l] {
            hist.answer[bin(v)] += 1;
        }
        for &v in &irrelevant[l] {
            hist.irrelevant[bin(v)] += 1;
        }
        out.push(LayerDistribution {
            layer: l,
            answer_mean: am,
            answer_std: asd,
            answer_count: answer[l].len(),
            irrelevant_mean: im,
            irrelevant_std: isd,
            irrelevant_count: irrelevant[l].len(),
            histogram: hist,
        });
    }
    Ok(AttnDistribution { layers: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockskim::partition_blocks;
    use crate::data::BatchItem;

    fn item_for(n: usize, q_end: usize, answer: (usize, usize)) -> BatchItem {
        let spec = partition_blocks(n, 4, (0, q_end), n).unwrap();
        let labels = crate::blockskim::block_labels(&spec, answer).unwrap();
        BatchItem {
            example_index: 0,
            token_ids: vec![5; n],
            pad_mask: vec![true; n],
            spec,
            labels,
            answer,
            passage_span: (q_end, n - 1),
            question_span: (0, q_end),
        }
    }

    #[test]
    fn uniform_attention_equalizes_means() {
        let n = 16;
        let item = item_for(n, 4, (6, 7));
        let attn = TensorData::full(vec![2, n, n], 1.0 / n as f64);
        let d = profile_distribution(&[vec![attn]], &[item]).unwrap();
        let l = &d.layers[0];
        assert!((l.answer_mean - l.irrelevant_mean).abs() < 1e-12);
    }

    #[test]
    fn counts_partition_passage_tokens() {
        let n = 16;
        let item = item_for(n, 4, (6, 7));
        let attn = TensorData::full(vec![2, n, n], 1.0 / n as f64);
        let d = profile_distribution(&[vec![attn]], &[item.clone()]).unwrap();
        let l = &d.layers[0];
        let passage_tokens = item.passage_span.1 - item.passage_span.0;
        assert_eq!(l.answer_count + l.irrelevant_count, passage_tokens);
        // histogram mass equals sample count
        let mass: u64 = l.histogram.answer.iter().sum::<u64>()
            + l.histogram.irrelevant.iter().sum::<u64>();
        assert_eq!(mass as usize, passage_tokens);
    }

    #[test]
    fn hand_built_three_token_trace() {
        // 3 real tokens; every real row puts 0.8 on token 2 and 0.2 on
        // a distinct other column (row 2 uses column 0)
        let n = 4; // one pad position
        let mut data = vec![0.0; n * n];
        for i in 0..3 {
            data[i * n + 2] = 0.8;
            data[i * n + if i == 2 { 0 } else { i }] = 0.2;
        }
        // pad row attends somewhere; excluded by the non-pad row filter
        data[3 * n] = 1.0;
        let attn = TensorData::new(vec![1, n, n], data).unwrap();
        let spec = partition_blocks(n, 2, (0, 1), 3).unwrap();
        let labels = crate::blockskim::block_labels(&spec, (2, 2)).unwrap();
        let item = BatchItem {
            example_index: 0,
            token_ids: vec![5; n],
            pad_mask: vec![true, true, true, false],
            spec,
            labels,
            answer: (2, 2),
            passage_span: (1, 3),
            question_span: (0, 1),
        };
        let d = profile_distribution(&[vec![attn]], &[item]).unwrap();
        let l = &d.layers[0];
        // answer token 2: column sum 0.8*3 over 3 non-pad rows
        assert!((l.answer_mean - 0.8).abs() < 1e-12);
        // irrelevant passage token 1: column sum 0.2 over 3 rows
        assert!((l.irrelevant_mean - 0.2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let attn = TensorData::full(vec![1, 4, 4], 0.25);
        let item = item_for(8, 4, (5, 6));
        assert!(matches!(
            profile_distribution(&[vec![attn]], &[item]),
            Err(Error::Alignment(_))
        ));
    }
}
