//! Skimming inference: per-layer block dropping driven by the relevance
//! predictors, index remapping back to original coordinates, and FLOPs
//! accounting.

mod flops;

pub use flops::{
    analytical_speedup, flops_count, retentions_from_lengths, FlopsConfig, FlopsReport,
    LayerFlops,
};

use serde::Serialize;

use crate::blockskim::{cnn_predict_blocks, diagonal_slices, BlockKind, PredictorMode};
use crate::data::BatchItem;
use crate::error::{Error, Result};
use crate::model::{
    attention_mask_tensor, embed_tokens, encoder_forward, encoder_layer_forward, qa_head,
    BlockSkimModel, Trainability,
};
use crate::{Graph, TensorData};

/// How an active layer turns predictor scores into a drop decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SkimRule {
    /// Retain a block iff its positive-class probability >= threshold.
    /// Padding blocks score 0, so any positive threshold sheds them.
    Threshold(f64),
    /// Retain the top `ceil(fraction * skimmable)` skimmable blocks by
    /// score (controlled-retention experiments).
    TopFraction(f64),
}

impl SkimRule {
    /// A rule that can never drop anything lets the engine skip the
    /// predictors entirely, reproducing the vanilla run exactly.
    pub fn is_noop(&self) -> bool {
        match *self {
            SkimRule::Threshold(t) => t <= 0.0,
            SkimRule::TopFraction(f) => f >= 1.0,
        }
    }
}

/// Skim decision policy. Question and mixed blocks are never dropped,
/// and retained sets only shrink across layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SkimPolicy {
    pub rule: SkimRule,
    /// Layers whose predictor output feeds a drop decision. A decision at
    /// the last layer has no following layer to shorten and is a no-op.
    pub active_layers: Vec<usize>,
}

impl SkimPolicy {
    /// Default policy: probability threshold, active at every layer but
    /// layer 0 (early-layer attention is the least informative).
    pub fn threshold(t: f64, num_layers: usize) -> Self {
        Self {
            rule: SkimRule::Threshold(t),
            active_layers: (1..num_layers).collect(),
        }
    }
}

/// Retained structure of one skimmed run.
#[derive(Debug, Clone, Serialize)]
pub struct SkimState {
    /// Original block ids retained entering each layer (ascending).
    pub blocks_per_layer: Vec<Vec<usize>>,
    /// Token count processed by each layer.
    pub lengths: Vec<usize>,
    /// Original positions of the tokens that reached the output.
    pub final_token_indices: Vec<usize>,
    /// True when every passage block was dropped before the last layer.
    pub passage_exhausted: bool,
}

/// Span logits scattered back to original coordinates; skimmed and
/// padding positions hold `-inf`.
#[derive(Debug, Clone)]
pub struct QAOutput {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
}

/// Positive-class probabilities from `[nb, 2]` logits.
fn positive_probs(logits: &TensorData) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|row| {
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            e1 / (e0 + e1)
        })
        .collect()
}

/// Apply a skim rule to the currently retained blocks. `scores` aligns
/// with `blocks`; protected kinds survive regardless of score. Returns
/// retained original block ids in ascending order.
pub fn decide_retained(
    rule: &SkimRule,
    blocks: &[usize],
    kinds: &[BlockKind],
    scores: &[f64],
) -> Vec<usize> {
    match *rule {
        SkimRule::Threshold(t) => blocks
            .iter()
            .zip(scores)
            .filter(|(&bid, &s)| kinds[bid].is_protected() || s >= t)
            .map(|(&bid, _)| bid)
            .collect(),
        SkimRule::TopFraction(f) => {
            let mut skimmable: Vec<(usize, f64)> = blocks
                .iter()
                .zip(scores)
                .filter(|(&bid, _)| !kinds[bid].is_protected())
                .map(|(&bid, &s)| (bid, s))
                .collect();
            let keep = ((f.max(0.0) * skimmable.len() as f64).ceil() as usize).min(skimmable.len());
            skimmable.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut kept: Vec<usize> = skimmable[..keep].iter().map(|(bid, _)| *bid).collect();
            kept.extend(
                blocks
                    .iter()
                    .filter(|&&bid| kinds[bid].is_protected())
                    .copied(),
            );
            kept.sort_unstable();
            kept
        }
    }
}

/// Full-stack forward through the skimming engine.
///
/// After each active layer's attention is captured, the layer's
/// predictor scores the currently retained blocks; dropped blocks'
/// hidden states are gathered out before the next layer and the padding
/// mask is rebuilt. Final logits are scattered back to original
/// positions with `-inf` at skimmed ones.
pub fn skim_forward(
    model: &BlockSkimModel,
    item: &BatchItem,
    policy: &SkimPolicy,
) -> Result<(QAOutput, SkimState, FlopsReport)> {
    let cfg = &model.config;
    let k = model.block_size;
    let n0 = item.token_ids.len();
    if n0 % k != 0 {
        return Err(Error::Internal(format!(
            "skim_forward: length {n0} violates block padding contract"
        )));
    }
    let run_predictors = !policy.rule.is_noop() && !policy.active_layers.is_empty();

    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainability::Frozen)?;

    let mut cur_orig: Vec<usize> = (0..n0).collect();
    let mut cur_pad = item.pad_mask.clone();
    let mut cur_blocks: Vec<usize> = (0..n0 / k).collect();

    let mut hidden = embed_tokens(&mut g, &b, &item.token_ids, &cur_orig)?;
    let mut state = SkimState {
        blocks_per_layer: Vec::with_capacity(cfg.num_layers),
        lengths: Vec::with_capacity(cfg.num_layers),
        final_token_indices: Vec::new(),
        passage_exhausted: false,
    };

    for l in 0..cfg.num_layers {
        state.blocks_per_layer.push(cur_blocks.clone());
        state.lengths.push(cur_orig.len());
        let mask = attention_mask_tensor(&mut g, &cur_pad)?;
        let (h, attn) = encoder_layer_forward(&mut g, &b.layers[l], cfg.num_heads, hidden, mask)?;
        hidden = h;

        if run_predictors && policy.active_layers.contains(&l) {
            let slices = diagonal_slices(&mut g, attn, k)?;
            let out = cnn_predict_blocks(
                &mut g,
                &b.predictors[l],
                slices,
                PredictorMode::Eval(&b.bn_stats[l]),
            )?;
            let mut scores = positive_probs(g.value(out.logits));
            for (i, &bid) in cur_blocks.iter().enumerate() {
                if matches!(item.spec.kinds[bid], BlockKind::Pad) {
                    scores[i] = 0.0;
                }
            }
            let retained = decide_retained(&policy.rule, &cur_blocks, &item.spec.kinds, &scores);
            if retained.len() < cur_blocks.len() && l + 1 < cfg.num_layers {
                let mut keep_pos = Vec::with_capacity(retained.len() * k);
                for &bid in &retained {
                    let bi = cur_blocks.binary_search(&bid).expect("retained subset");
                    keep_pos.extend(bi * k..(bi + 1) * k);
                }
                hidden = g.index_select_rows(hidden, &keep_pos)?;
                cur_orig = keep_pos.iter().map(|&p| cur_orig[p]).collect();
                cur_pad = keep_pos.iter().map(|&p| cur_pad[p]).collect();
                cur_blocks = retained;
            }
        }
    }
    state.final_token_indices = cur_orig.clone();
    let had_passage = item
        .spec
        .kinds
        .iter()
        .any(|kd| matches!(kd, BlockKind::Passage));
    let has_passage = cur_blocks
        .iter()
        .any(|&bid| matches!(item.spec.kinds[bid], BlockKind::Passage));
    state.passage_exhausted = had_passage && !has_passage;

    let logits = qa_head(&mut g, &b.qa, hidden)?;
    let sv = g.value(logits.start).data().to_vec();
    let ev = g.value(logits.end).data().to_vec();
    let mut start = vec![f64::NEG_INFINITY; n0];
    let mut end = vec![f64::NEG_INFINITY; n0];
    for (i, &o) in cur_orig.iter().enumerate() {
        if item.pad_mask[o] {
            start[o] = sv[i];
            end[o] = ev[i];
        }
    }

    let fcfg = FlopsConfig::from_model(cfg, model.predictor, k);
    let active = if run_predictors {
        policy.active_layers.clone()
    } else {
        Vec::new()
    };
    let report = flops_count(&fcfg, n0, &state.lengths, &active)?;
    Ok((
        QAOutput {
            start_logits: start,
            end_logits: end,
        },
        state,
        report,
    ))
}

/// Plain full-length forward (no skimming). Optionally returns the
/// captured per-layer attention maps as detached tensors.
pub fn vanilla_forward(
    model: &BlockSkimModel,
    item: &BatchItem,
    capture: bool,
) -> Result<(QAOutput, Option<Vec<TensorData>>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainability::Frozen)?;
    let (hidden, trace) = encoder_forward(
        &mut g,
        &b,
        &model.config,
        &item.token_ids,
        &item.pad_mask,
        capture,
    )?;
    let logits = qa_head(&mut g, &b.qa, hidden)?;
    let n = item.token_ids.len();
    let sv = g.value(logits.start).data();
    let ev = g.value(logits.end).data();
    let mut start = vec![f64::NEG_INFINITY; n];
    let mut end = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        if item.pad_mask[i] {
            start[i] = sv[i];
            end[i] = ev[i];
        }
    }
    let trace = trace.map(|ts| ts.iter().map(|&t| g.value(t).clone()).collect());
    Ok((
        QAOutput {
            start_logits: start,
            end_logits: end,
        },
        trace,
    ))
}

/// Per-layer positive-class block probabilities over a full-length run
/// (predictor quality reporting; no skimming).
pub fn relevance_probs(model: &BlockSkimModel, item: &BatchItem) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainability::Frozen)?;
    let (_, trace) = encoder_forward(
        &mut g,
        &b,
        &model.config,
        &item.token_ids,
        &item.pad_mask,
        true,
    )?;
    let trace = trace.expect("capture requested");
    let mut out = Vec::with_capacity(trace.len());
    for (l, attn) in trace.into_iter().enumerate() {
        let slices = diagonal_slices(&mut g, attn, model.block_size)?;
        let p = cnn_predict_blocks(
            &mut g,
            &b.predictors[l],
            slices,
            PredictorMode::Eval(&b.bn_stats[l]),
        )?;
        out.push(positive_probs(g.value(p.logits)));
    }
    Ok(out)
}

/// Map an inclusive span in skimmed coordinates back to original token
/// coordinates.
pub fn remap_span(span: (usize, usize), state: &SkimState) -> Result<(usize, usize)> {
    let (s, e) = span;
    let idx = &state.final_token_indices;
    if s > e || e >= idx.len() {
        return Err(Error::Index(format!(
            "span ({s}, {e}) outside retained length {}",
            idx.len()
        )));
    }
    Ok((idx[s], idx[e]))
}

/// Best-scoring valid span: `s <= e`, both inside the passage, length
/// capped, finite logits. Falls back to the best finite pair anywhere
/// when the passage was fully skimmed, then to `(0, 0)`.
pub fn decode_span(
    out: &QAOutput,
    passage_span: (usize, usize),
    max_answer_len: usize,
) -> (usize, usize) {
    let n = out.start_logits.len();
    let (ps, pe) = (passage_span.0.min(n), passage_span.1.min(n));
    let search = |lo: usize, hi: usize| -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for s in lo..hi {
            let ls = out.start_logits[s];
            if !ls.is_finite() {
                continue;
            }
            for e in s..hi.min(s + max_answer_len) {
                let le = out.end_logits[e];
                if !le.is_finite() {
                    continue;
                }
                let score = ls + le;
                if best.map_or(true, |(_, b)| score > b) {
                    best = Some(((s, e), score));
                }
            }
        }
        best.map(|(span, _)| span)
    };
    search(ps, pe)
        .or_else(|| search(0, n))
        .unwrap_or((0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockskim::PredictorConfig;
    use crate::data::{gen_synthetic, make_batch, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny_setup() -> (BlockSkimModel, Vec<BatchItem>) {
        let cfg = ModelConfig {
            num_layers: 3,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 64,
            max_seq_len: 32,
            dropout_rate: 0.0,
        };
        let model = BlockSkimModel::new(
            cfg,
            PredictorConfig {
                c1: 3,
                c2: 3,
                c3: 2,
            },
            4,
            11,
        )
        .unwrap();
        let exs = gen_synthetic(
            &SynthConfig {
                vocab_size: 64,
                seq_len: 32,
                question_len: 4,
                answer_len: 2,
                num_distractors: 1,
                evidence_mode: false,
                seed: 5,
            },
            8,
        )
        .unwrap();
        let idx: Vec<usize> = (0..exs.len()).collect();
        let batch = make_batch(&exs, &idx, 4, false, 32).unwrap();
        (model, batch)
    }

    #[test]
    fn threshold_zero_matches_vanilla_with_ratio_one() {
        let (model, batch) = tiny_setup();
        for item in &batch {
            let (vo, _) = vanilla_forward(&model, item, false).unwrap();
            let policy = SkimPolicy::threshold(0.0, model.config.num_layers);
            let (so, state, report) = skim_forward(&model, item, &policy).unwrap();
            assert_eq!(report.ratio, 1.0);
            assert_eq!(state.final_token_indices.len(), item.token_ids.len());
            for i in 0..item.token_ids.len() {
                let (a, b) = (vo.start_logits[i], so.start_logits[i]);
                if a.is_finite() || b.is_finite() {
                    assert!((a - b).abs() <= 1e-9, "start logit {i}: {a} vs {b}");
                }
                let (a, b) = (vo.end_logits[i], so.end_logits[i]);
                if a.is_finite() || b.is_finite() {
                    assert!((a - b).abs() <= 1e-9, "end logit {i}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn empty_active_layers_is_vanilla_too() {
        let (model, batch) = tiny_setup();
        let policy = SkimPolicy {
            rule: SkimRule::Threshold(1.0),
            active_layers: vec![],
        };
        let item = &batch[0];
        let (vo, _) = vanilla_forward(&model, item, false).unwrap();
        let (so, _, report) = skim_forward(&model, item, &policy).unwrap();
        assert_eq!(report.ratio, 1.0);
        for i in 0..item.token_ids.len() {
            let (a, b) = (vo.start_logits[i], so.start_logits[i]);
            if a.is_finite() || b.is_finite() {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn aggressive_threshold_shrinks_layers_and_keeps_question() {
        let (model, batch) = tiny_setup();
        // threshold 1.0 retains only protected blocks after layer 1
        let policy = SkimPolicy::threshold(1.0, model.config.num_layers);
        let item = &batch[0];
        let (_, state, report) = skim_forward(&model, item, &policy).unwrap();
        assert!(state.lengths[2] < state.lengths[1]);
        assert!(report.ratio > 1.0);
        assert!(state.passage_exhausted);
        // question blocks survive to the end
        for (bid, kind) in item.spec.kinds.iter().enumerate() {
            if kind.is_protected() {
                assert!(state.blocks_per_layer.last().unwrap().contains(&bid));
            }
        }
        // monotone retained sets
        for w in state.blocks_per_layer.windows(2) {
            assert!(w[1].iter().all(|b| w[0].contains(b)));
        }
    }

    #[test]
    fn remap_identity_and_hand_map() {
        let state = SkimState {
            blocks_per_layer: vec![],
            lengths: vec![],
            final_token_indices: (0..10).collect(),
            passage_exhausted: false,
        };
        assert_eq!(remap_span((2, 5), &state).unwrap(), (2, 5));

        // first block of k=4 dropped: skimmed 0 -> original 4
        let state = SkimState {
            blocks_per_layer: vec![],
            lengths: vec![],
            final_token_indices: (4..12).collect(),
            passage_exhausted: false,
        };
        assert_eq!(remap_span((0, 0), &state).unwrap(), (4, 4));
        assert!(matches!(
            remap_span((0, 99), &state),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn decode_prefers_passage_and_caps_length() {
        let mut out = QAOutput {
            start_logits: vec![f64::NEG_INFINITY; 12],
            end_logits: vec![f64::NEG_INFINITY; 12],
        };
        // best raw pair sits in the question region and must be ignored
        out.start_logits[1] = 100.0;
        out.end_logits[2] = 100.0;
        out.start_logits[6] = 1.0;
        out.end_logits[7] = 2.0;
        out.start_logits[8] = 0.5;
        out.end_logits[8] = 0.5;
        let span = decode_span(&out, (5, 11), 30);
        assert_eq!(span, (6, 7));
    }

    #[test]
    fn rigged_positive_predictor_sheds_only_pad_blocks() {
        let (mut model, batch) = tiny_setup();
        let item = &batch[0];
        // rig every predictor toward "relevant" so threshold 0.5 keeps all
        // passage blocks; pad blocks are force-scored 0 and must go
        for l in 0..model.config.num_layers {
            let name = format!("skim.{l}.fc.b");
            let b = model.params.get_mut(&name).unwrap();
            b.data_mut().copy_from_slice(&[-5.0, 5.0]);
            let name = format!("skim.{l}.fc.w");
            let w = model.params.get_mut(&name).unwrap();
            for v in w.data_mut() {
                *v = 0.0;
            }
        }
        let policy = SkimPolicy::threshold(0.5, model.config.num_layers);
        let (_, state, _) = skim_forward(&model, item, &policy).unwrap();
        let last = state.blocks_per_layer.last().unwrap();
        for (bid, kind) in item.spec.kinds.iter().enumerate() {
            match kind {
                BlockKind::Pad => assert!(!last.contains(&bid), "pad block {bid} kept"),
                _ => assert!(last.contains(&bid), "real block {bid} dropped"),
            }
        }
        // lengths shrink by whole blocks
        let dropped = state.blocks_per_layer[1].len() - state.blocks_per_layer[2].len();
        assert_eq!(
            state.lengths[1] - state.lengths[2],
            dropped * model.block_size
        );
    }
}
