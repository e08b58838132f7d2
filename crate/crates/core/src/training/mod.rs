//! Joint multi-objective training, ablation modes, evaluation.

mod report;

pub use report::{EpochRecord, StepRecord, TrainReport};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockskim::{
    blockskim_loss, cnn_predict_blocks, compute_beta, diagonal_slices, total_loss, BlockKind,
    BlockLabels, BnStats, PredictorMode,
};
use crate::data::{make_batch, BatchItem, QAExample};
use crate::error::{Error, Result};
use crate::inference::{decide_retained, decode_span, vanilla_forward, SkimRule};
use crate::model::{
    attention_mask_tensor, embed_tokens, encoder_forward, encoder_layer_forward, qa_head, qa_loss,
    save_checkpoint, BlockSkimModel, BoundModel, Trainability, BN_MOMENTUM,
};
use crate::numerics::Tensor;
use crate::{AdamConfig, AdamState, Graph, TensorData};

/// Longest span considered at decode time (standard SQuAD practice).
pub const MAX_ANSWER_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// QA loss plus per-layer relevance losses; nothing is dropped.
    Joint,
    /// Pure QA training (alpha = 0); predictors stay at initialization.
    Vanilla,
    /// Two-step: QA fine-tune, then predictor-only training with the
    /// encoder frozen.
    FreezeTransformer,
    /// Joint training that really drops blocks mid-stack (ablation).
    SkimTraining,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Harmony coefficient weighting the relevance objective.
    pub alpha: f64,
    /// Balance factor; `None` derives it from the training set's
    /// negative/positive block ratio.
    pub beta: Option<f64>,
    pub block_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Fold evidence blocks into the positive labels (multi-hop ablation).
    pub evidence_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 16,
            epochs: 2,
            alpha: 0.1,
            beta: None,
            block_size: 16,
            seed: 42,
            mode: TrainMode::Joint,
            evidence_labels: false,
        }
    }
}

impl TrainConfig {
    /// Mode/alpha consistency. Callers that deliberately explore the
    /// joint path with alpha = 0 (the vanilla-equivalence check) skip
    /// this.
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TrainMode::Joint | TrainMode::SkimTraining if self.alpha <= 0.0 => Err(Error::Config(
                "joint modes need alpha > 0".into(),
            )),
            TrainMode::Vanilla if self.alpha != 0.0 => Err(Error::Config(
                "vanilla mode means alpha = 0".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Optional training artifacts.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    /// Checkpoint written after every epoch (overwritten in place).
    pub ckpt_path: Option<&'a Path>,
}

/// Linear decay from `base_lr` to zero, no warmup.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps);
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

/// Pick the candidate with the best score; ties go to the smaller alpha.
pub fn grid_search_alpha(
    candidates: &[f64],
    mut eval_fn: impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Config("grid_search_alpha: no candidates".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best_alpha = sorted[0];
    let mut best_score = f64::NEG_INFINITY;
    for &alpha in &sorted {
        let score = eval_fn(alpha)?;
        if score > best_score {
            best_score = score;
            best_alpha = alpha;
        }
    }
    Ok(best_alpha)
}

/// Exact-match and token-overlap F1 for one example, in [0, 1].
pub fn em_f1(pred: (usize, usize), gold: (usize, usize)) -> (f64, f64) {
    let em = if pred == gold { 1.0 } else { 0.0 };
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo {
        return (em, 0.0);
    }
    let overlap = (hi - lo + 1) as f64;
    let p = overlap / (pred.1 - pred.0 + 1) as f64;
    let r = overlap / (gold.1 - gold.0 + 1) as f64;
    (em, 2.0 * p * r / (p + r))
}

/// EM / F1 (percent) of full-length greedy span prediction.
pub fn evaluate(model: &BlockSkimModel, data: &[QAExample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let items = make_batch(data, &idx, model.block_size, false, model.config.max_seq_len)?;
    let scores: Result<Vec<(f64, f64)>> = items
        .par_iter()
        .map(|item| {
            let (out, _) = vanilla_forward(model, item, false)?;
            let pred = decode_span(&out, item.passage_span, MAX_ANSWER_LEN);
            Ok(em_f1(pred, item.answer))
        })
        .collect();
    let scores = scores?;
    let n = scores.len() as f64;
    let em: f64 = scores.iter().map(|s| s.0).sum::<f64>() / n * 100.0;
    let f1: f64 = scores.iter().map(|s| s.1).sum::<f64>() / n * 100.0;
    Ok((em, f1))
}

/// Per-layer block-classifier accuracy and F1 over loss-masked blocks.
pub fn predictor_metrics(
    model: &BlockSkimModel,
    data: &[QAExample],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let items = make_batch(data, &idx, model.block_size, false, model.config.max_seq_len)?;
    let layers = model.config.num_layers;
    // [tp, fp, fn, tn] per layer
    let counts: Result<Vec<Vec<[u64; 4]>>> = items
        .par_iter()
        .map(|item| {
            let probs = crate::inference::relevance_probs(model, item)?;
            let mut per_layer = vec![[0u64; 4]; layers];
            for (l, layer_probs) in probs.iter().enumerate() {
                for (j, &p) in layer_probs.iter().enumerate() {
                    if !item.labels.loss_mask[j] {
                        continue;
                    }
                    let slot = match (p >= 0.5, item.labels.y[j] == 1) {
                        (true, true) => 0,
                        (true, false) => 1,
                        (false, true) => 2,
                        (false, false) => 3,
                    };
                    per_layer[l][slot] += 1;
                }
            }
            Ok(per_layer)
        })
        .collect();
    let counts = counts?;
    let mut acc = vec![0.0; layers];
    let mut f1 = vec![0.0; layers];
    for l in 0..layers {
        let mut c = [0u64; 4];
        for item in &counts {
            for s in 0..4 {
                c[s] += item[l][s];
            }
        }
        let total = c.iter().sum::<u64>() as f64;
        if total > 0.0 {
            acc[l] = (c[0] + c[3]) as f64 / total;
        }
        let denom = (2 * c[0] + c[1] + c[2]) as f64;
        if denom > 0.0 {
            f1[l] = 2.0 * c[0] as f64 / denom;
        }
    }
    Ok((acc, f1))
}

/// What one example contributes to a step.
struct ExamplePass {
    grads: Vec<Option<Vec<f64>>>,
    bn: Vec<Option<BnStats>>,
    total: f64,
    qa: f64,
    skim: Vec<f64>,
    qa_skipped: bool,
}

#[derive(Clone, Copy)]
enum PassKind {
    QaOnly,
    Joint { alpha: f64, beta: f64 },
    SkimOnly { beta: f64 },
    SkimTraining { alpha: f64, beta: f64 },
}

fn labels_subset(labels: &BlockLabels, blocks: &[usize]) -> BlockLabels {
    BlockLabels {
        y: blocks.iter().map(|&b| labels.y[b]).collect(),
        loss_mask: blocks.iter().map(|&b| labels.loss_mask[b]).collect(),
    }
}

fn positive_probs(logits: &TensorData) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|row| {
            let m = row[0].max(row[1]);
            let e1 = (row[1] - m).exp();
            e1 / ((row[0] - m).exp() + e1)
        })
        .collect()
}

fn example_pass(
    model: &BlockSkimModel,
    item: &BatchItem,
    kind: PassKind,
    trainability: Trainability,
) -> Result<ExamplePass> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainability)?;
    let cfg = &model.config;
    let layers = cfg.num_layers;

    let (total_t, qa_v, skim_v, bn, qa_skipped) = match kind {
        PassKind::QaOnly => {
            let (hidden, _) =
                encoder_forward(&mut g, &b, cfg, &item.token_ids, &item.pad_mask, false)?;
            let logits = qa_head(&mut g, &b.qa, hidden)?;
            let loss = qa_loss(&mut g, &logits, &item.pad_mask, item.answer)?;
            let qa_v = g.value(loss).item();
            (loss, qa_v, vec![0.0; layers], vec![None; layers], false)
        }
        PassKind::Joint { .. } | PassKind::SkimOnly { .. } => {
            let (skim_only, alpha, beta) = match kind {
                PassKind::Joint { alpha, beta } => (false, alpha, beta),
                PassKind::SkimOnly { beta } => (true, 1.0, beta),
                _ => unreachable!(),
            };
            let (hidden, trace) =
                encoder_forward(&mut g, &b, cfg, &item.token_ids, &item.pad_mask, true)?;
            let trace = trace.expect("capture requested");
            let mut per_layer = Vec::with_capacity(layers);
            let mut bn = Vec::with_capacity(layers);
            for (l, attn) in trace.into_iter().enumerate() {
                let slices = diagonal_slices(&mut g, attn, model.block_size)?;
                let out =
                    cnn_predict_blocks(&mut g, &b.predictors[l], slices, PredictorMode::Train)?;
                bn.push(out.batch_stats);
                per_layer.push(blockskim_loss(&mut g, out.logits, &item.labels)?);
            }
            let (qa, alpha_eff) = if skim_only {
                (g.constant(TensorData::scalar(0.0))?, 1.0)
            } else {
                let logits = qa_head(&mut g, &b.qa, hidden)?;
                (qa_loss(&mut g, &logits, &item.pad_mask, item.answer)?, alpha)
            };
            let total = total_loss(&mut g, qa, &per_layer, alpha_eff, beta)?;
            let skim_v: Vec<f64> = per_layer
                .iter()
                .map(|&(p, n)| beta * g.value(p).item() + g.value(n).item())
                .collect();
            (total, g.value(qa).item(), skim_v, bn, false)
        }
        PassKind::SkimTraining { alpha, beta } => {
            skim_training_pass(model, item, &mut g, &b, alpha, beta)?
        }
    };

    let total = g.value(total_t).item();
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "total loss" });
    }
    g.backward(total_t)?;
    let grads = b
        .leaves
        .iter()
        .map(|leaf| leaf.and_then(|t| g.grad(t).map(|s| s.to_vec())))
        .collect();
    Ok(ExamplePass {
        grads,
        bn,
        total,
        qa: qa_v,
        skim: skim_v,
        qa_skipped,
    })
}

/// Joint pass that really drops blocks between layers (skim-training
/// ablation). Decisions use each layer's own train-mode predictor at
/// threshold 0.5, layers 1.. active. When the answer block is dropped,
/// the example trains on the relevance objective alone.
#[allow(clippy::type_complexity)]
fn skim_training_pass(
    model: &BlockSkimModel,
    item: &BatchItem,
    g: &mut Graph,
    b: &BoundModel,
    alpha: f64,
    beta: f64,
) -> Result<(Tensor, f64, Vec<f64>, Vec<Option<BnStats>>, bool)> {
    let cfg = &model.config;
    let k = model.block_size;
    let n0 = item.token_ids.len();
    let rule = SkimRule::Threshold(0.5);

    let mut cur_orig: Vec<usize> = (0..n0).collect();
    let mut cur_pad = item.pad_mask.clone();
    let mut cur_blocks: Vec<usize> = (0..n0 / k).collect();
    let mut hidden = embed_tokens(g, b, &item.token_ids, &cur_orig)?;

    let mut per_layer = Vec::with_capacity(cfg.num_layers);
    let mut bn = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let mask = attention_mask_tensor(g, &cur_pad)?;
        let (h, attn) = encoder_layer_forward(g, &b.layers[l], cfg.num_heads, hidden, mask)?;
        hidden = h;
        let slices = diagonal_slices(g, attn, k)?;
        let out = cnn_predict_blocks(g, &b.predictors[l], slices, PredictorMode::Train)?;
        bn.push(out.batch_stats);
        let labels = labels_subset(&item.labels, &cur_blocks);
        per_layer.push(blockskim_loss(g, out.logits, &labels)?);

        if l >= 1 && l + 1 < cfg.num_layers {
            let mut scores = positive_probs(g.value(out.logits));
            for (i, &bid) in cur_blocks.iter().enumerate() {
                if matches!(item.spec.kinds[bid], BlockKind::Pad) {
                    scores[i] = 0.0;
                }
            }
            let retained = decide_retained(&rule, &cur_blocks, &item.spec.kinds, &scores);
            if retained.len() < cur_blocks.len() {
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

    let (s, e) = item.answer;
    let s_new = cur_orig.iter().position(|&o| o == s);
    let e_new = cur_orig.iter().position(|&o| o == e);
    let (qa, qa_skipped) = match (s_new, e_new) {
        (Some(s2), Some(e2)) => {
            let logits = qa_head(g, &b.qa, hidden)?;
            (qa_loss(g, &logits, &cur_pad, (s2, e2))?, false)
        }
        _ => (g.constant(TensorData::scalar(0.0))?, true),
    };
    let total = total_loss(g, qa, &per_layer, alpha, beta)?;
    let skim_v: Vec<f64> = per_layer
        .iter()
        .map(|&(p, n)| beta * g.value(p).item() + g.value(n).item())
        .collect();
    Ok((total, g.value(qa).item(), skim_v, bn, qa_skipped))
}

/// Train `model` in place.
///
/// Joint mode runs the full multi-objective loss with attention capture
/// and drops nothing. Freeze-transformer mode runs two phases of
/// `cfg.epochs` each: a pure QA phase, then predictor-only training on
/// the frozen encoder. Bit-reproducible for a fixed seed regardless of
/// thread count.
pub fn train(
    model: &mut BlockSkimModel,
    train_data: &[QAExample],
    dev_data: Option<&[QAExample]>,
    cfg: &TrainConfig,
    outputs: &TrainOutputs<'_>,
) -> Result<TrainReport> {
    if train_data.is_empty() {
        return Err(Error::Data("train: empty dataset".into()));
    }
    if cfg.block_size != model.block_size {
        return Err(Error::Config(format!(
            "block size {} differs from the model's {}",
            cfg.block_size, model.block_size
        )));
    }

    // balance factor from the training distribution unless pinned
    let all_idx: Vec<usize> = (0..train_data.len()).collect();
    let all_items = make_batch(
        train_data,
        &all_idx,
        cfg.block_size,
        cfg.evidence_labels,
        model.config.max_seq_len,
    )?;
    let beta = match cfg.beta {
        Some(b) if b > 0.0 => b,
        Some(b) => return Err(Error::Config(format!("beta must be > 0, got {b}"))),
        None => compute_beta(all_items.iter().map(|i| &i.labels))?,
    };
    drop(all_items);

    let phases: Vec<(PassKind, Trainability, bool)> = match cfg.mode {
        TrainMode::Joint => vec![(
            PassKind::Joint {
                alpha: cfg.alpha,
                beta,
            },
            Trainability::All,
            true,
        )],
        TrainMode::Vanilla => vec![(PassKind::QaOnly, Trainability::All, false)],
        TrainMode::FreezeTransformer => vec![
            (PassKind::QaOnly, Trainability::All, false),
            (PassKind::SkimOnly { beta }, Trainability::SkimOnly, true),
        ],
        TrainMode::SkimTraining => vec![(
            PassKind::SkimTraining {
                alpha: cfg.alpha,
                beta,
            },
            Trainability::All,
            true,
        )],
    };

    let mut report = TrainReport {
        beta,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam_cfg = AdamConfig::default();
    let mut global_epoch = 0usize;
    let mut global_step = 0usize;

    for (kind, trainability, updates_bn) in &phases {
        let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
        let total_steps = steps_per_epoch * cfg.epochs;
        let mut adam: Vec<AdamState> = model
            .params
            .iter()
            .map(|e| AdamState::new(if e.trainable { e.data.numel() } else { 0 }))
            .collect();
        let mut phase_step = 0usize;

        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train_data.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let lr = lr_schedule(phase_step, total_steps, cfg.lr);
                let items = make_batch(
                    train_data,
                    chunk,
                    cfg.block_size,
                    cfg.evidence_labels,
                    model.config.max_seq_len,
                )?;
                let passes: Result<Vec<ExamplePass>> = items
                    .par_iter()
                    .map(|item| example_pass(model, item, *kind, *trainability))
                    .collect();
                let passes = passes.map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged {
                        step: global_step,
                        detail: format!("non-finite value in {op}"),
                    },
                    other => other,
                })?;

                apply_step(model, &passes, &mut adam, lr, &adam_cfg, *updates_bn)?;

                let bsz = passes.len() as f64;
                let layers = model.config.num_layers;
                let mut skim_mean = vec![0.0; layers];
                for p in &passes {
                    for (l, v) in p.skim.iter().enumerate() {
                        skim_mean[l] += v / bsz;
                    }
                    report.qa_skipped_examples += usize::from(p.qa_skipped);
                }
                report.steps.push(StepRecord {
                    step: global_step,
                    lr,
                    total: passes.iter().map(|p| p.total).sum::<f64>() / bsz,
                    qa: passes.iter().map(|p| p.qa).sum::<f64>() / bsz,
                    skim: skim_mean,
                });
                phase_step += 1;
                global_step += 1;
            }

            let (em, f1) = match dev_data {
                Some(dev) if !dev.is_empty() => {
                    let (em, f1) = evaluate(model, dev)?;
                    (Some(em), Some(f1))
                }
                _ => (None, None),
            };
            let (pacc, pf1) = match dev_data {
                Some(dev) if !dev.is_empty() && !matches!(cfg.mode, TrainMode::Vanilla) => {
                    predictor_metrics(model, dev)?
                }
                _ => (vec![], vec![]),
            };
            report.epochs.push(EpochRecord {
                epoch: global_epoch,
                em,
                f1,
                predictor_acc: pacc,
                predictor_f1: pf1,
            });
            if let Some(path) = outputs.ckpt_path {
                save_checkpoint(model, path)?;
            }
            global_epoch += 1;
        }
    }
    Ok(report)
}

/// Average per-example gradients, apply one Adam update, fold averaged
/// batch-norm statistics into the running estimates (one momentum update
/// per optimizer step, thread-count independent).
fn apply_step(
    model: &mut BlockSkimModel,
    passes: &[ExamplePass],
    adam: &mut [AdamState],
    lr: f64,
    adam_cfg: &AdamConfig,
    updates_bn: bool,
) -> Result<()> {
    let bsz = passes.len();
    if bsz == 0 {
        return Ok(());
    }
    let inv = 1.0 / bsz as f64;
    for i in 0..model.params.len() {
        let mut acc: Option<Vec<f64>> = None;
        for p in passes {
            if let Some(g) = &p.grads[i] {
                match &mut acc {
                    Some(a) => {
                        for (av, gv) in a.iter_mut().zip(g) {
                            *av += *gv;
                        }
                    }
                    None => acc = Some(g.clone()),
                }
            }
        }
        if let Some(mut mean) = acc {
            for v in &mut mean {
                *v *= inv;
            }
            let entry = model.params.entry_mut(i);
            adam[i].step(entry.data.data_mut(), &mean, lr, adam_cfg);
        }
    }
    if updates_bn {
        for l in 0..model.config.num_layers {
            let observed: Vec<&BnStats> = passes.iter().filter_map(|p| p.bn[l].as_ref()).collect();
            if observed.is_empty() {
                continue;
            }
            let scale = 1.0 / observed.len() as f64;
            let mut avg = BnStats {
                bn1_mean: vec![0.0; observed[0].bn1_mean.len()],
                bn1_var: vec![0.0; observed[0].bn1_var.len()],
                bn2_mean: vec![0.0; observed[0].bn2_mean.len()],
                bn2_var: vec![0.0; observed[0].bn2_var.len()],
            };
            for st in &observed {
                for (d, s) in avg.bn1_mean.iter_mut().zip(&st.bn1_mean) {
                    *d += s * scale;
                }
                for (d, s) in avg.bn1_var.iter_mut().zip(&st.bn1_var) {
                    *d += s * scale;
                }
                for (d, s) in avg.bn2_mean.iter_mut().zip(&st.bn2_mean) {
                    *d += s * scale;
                }
                for (d, s) in avg.bn2_var.iter_mut().zip(&st.bn2_var) {
                    *d += s * scale;
                }
            }
            let mut running = model.bn_stats(l)?;
            running.update(&avg, BN_MOMENTUM);
            model.set_bn_stats(l, &running)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockskim::PredictorConfig;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> BlockSkimModel {
        BlockSkimModel::new(
            ModelConfig {
                num_layers: 2,
                num_heads: 2,
                hidden_dim: 8,
                ffn_dim: 16,
                vocab_size: 64,
                max_seq_len: 32,
                dropout_rate: 0.0,
            },
            PredictorConfig {
                c1: 3,
                c2: 3,
                c3: 2,
            },
            4,
            seed,
        )
        .unwrap()
    }

    fn tiny_data(n: usize) -> Vec<QAExample> {
        gen_synthetic(
            &SynthConfig {
                vocab_size: 64,
                seq_len: 32,
                question_len: 4,
                answer_len: 2,
                num_distractors: 1,
                evidence_mode: false,
                seed: 3,
            },
            n,
        )
        .unwrap()
    }

    fn tiny_cfg(mode: TrainMode, alpha: f64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 1,
            alpha,
            beta: Some(3.0),
            block_size: 4,
            seed: 42,
            mode,
            evidence_labels: false,
        }
    }

    fn weight_bits(model: &BlockSkimModel) -> Vec<(String, Vec<u64>)> {
        model
            .params
            .iter()
            .filter(|e| e.trainable)
            .map(|e| {
                (
                    e.name.clone(),
                    e.data.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 100, 3e-4), 3e-4);
        assert_eq!(lr_schedule(100, 100, 3e-4), 0.0);
        assert_eq!(lr_schedule(50, 100, 3e-4), 1.5e-4);
    }

    #[test]
    fn grid_search_single_and_ties() {
        let single = grid_search_alpha(&[0.1], |_| Ok(1.0)).unwrap();
        assert_eq!(single, 0.1);
        let tied = grid_search_alpha(&[1.0, 0.001, 0.1], |_| Ok(5.0)).unwrap();
        assert_eq!(tied, 0.001);
        let best =
            grid_search_alpha(&[0.001, 0.01, 0.1], |a| Ok(if a == 0.01 { 2.0 } else { 1.0 }))
                .unwrap();
        assert_eq!(best, 0.01);
    }

    #[test]
    fn em_f1_hand_cases() {
        assert_eq!(em_f1((3, 5), (3, 5)), (1.0, 1.0));
        // half-overlapping equal-length spans -> F1 = 0.5
        let (em, f1) = em_f1((2, 5), (4, 7));
        assert_eq!(em, 0.0);
        assert!((f1 - 0.5).abs() < 1e-12);
        assert_eq!(em_f1((0, 1), (5, 6)).1, 0.0);
    }

    #[test]
    fn vanilla_equals_joint_with_alpha_zero() {
        let data = tiny_data(16);
        let mut vanilla = tiny_model(1);
        let mut joint = vanilla.clone();
        train(
            &mut vanilla,
            &data,
            None,
            &tiny_cfg(TrainMode::Vanilla, 0.0),
            &TrainOutputs::default(),
        )
        .unwrap();
        train(
            &mut joint,
            &data,
            None,
            &tiny_cfg(TrainMode::Joint, 0.0),
            &TrainOutputs::default(),
        )
        .unwrap();
        assert_eq!(weight_bits(&vanilla), weight_bits(&joint));
    }

    #[test]
    fn freeze_mode_leaves_encoder_untouched_in_phase_two() {
        let data = tiny_data(16);
        let mut frozen = tiny_model(2);
        let mut vanilla = frozen.clone();
        train(
            &mut vanilla,
            &data,
            None,
            &tiny_cfg(TrainMode::Vanilla, 0.0),
            &TrainOutputs::default(),
        )
        .unwrap();
        train(
            &mut frozen,
            &data,
            None,
            &tiny_cfg(TrainMode::FreezeTransformer, 0.0),
            &TrainOutputs::default(),
        )
        .unwrap();
        // phase 1 matches vanilla exactly; phase 2 must not move encoder
        // or QA parameters
        for (a, b) in weight_bits(&vanilla).iter().zip(weight_bits(&frozen).iter()) {
            assert_eq!(a.0, b.0);
            if !a.0.starts_with("skim.") {
                assert_eq!(a.1, b.1, "encoder param {} changed", a.0);
            }
        }
        // predictors did move in phase 2
        let moved = weight_bits(&vanilla)
            .iter()
            .zip(weight_bits(&frozen).iter())
            .filter(|(a, b)| a.0.starts_with("skim.") && a.1 != b.1)
            .count();
        assert!(moved > 0, "no predictor parameter trained");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = tiny_data(16);
        let mut a = tiny_model(3);
        let mut b = a.clone();
        let cfg = tiny_cfg(TrainMode::Joint, 0.1);
        train(&mut a, &data, None, &cfg, &TrainOutputs::default()).unwrap();
        train(&mut b, &data, None, &cfg, &TrainOutputs::default()).unwrap();
        assert_eq!(weight_bits(&a), weight_bits(&b));
    }

    #[test]
    fn skim_training_mode_runs_and_reports() {
        let data = tiny_data(16);
        let mut m = tiny_model(4);
        let report = train(
            &mut m,
            &data,
            Some(&data[..8]),
            &tiny_cfg(TrainMode::SkimTraining, 0.1),
            &TrainOutputs::default(),
        )
        .unwrap();
        assert!(!report.steps.is_empty());
        assert!(report.steps.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg(TrainMode::Joint, 0.0);
        assert!(c.validate().is_err());
        c.alpha = 0.1;
        assert!(c.validate().is_ok());
        let mut v = tiny_cfg(TrainMode::Vanilla, 0.5);
        assert!(v.validate().is_err());
        v.alpha = 0.0;
        assert!(v.validate().is_ok());
    }
}
