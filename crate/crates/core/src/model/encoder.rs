//! BERT-style encoder with attention capture, plus the per-layer skim
//! predictors that share its parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blockskim::{BnStats, BoundPredictor, PredictorConfig};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ParamStore;
use crate::numerics::Tensor;
use crate::{Graph, TensorData};

pub const LN_EPS: f64 = 1e-5;
/// Additive pre-softmax penalty for masked (padding) key positions.
pub const MASK_PENALTY: f64 = -1e9;
/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// The full trainable artifact: encoder, QA head, and one relevance
/// predictor per layer, all in one named parameter store.
#[derive(Debug, Clone)]
pub struct BlockSkimModel {
    pub config: ModelConfig,
    pub predictor: PredictorConfig,
    pub block_size: usize,
    pub params: ParamStore,
}

/// Which parameters collect gradients when binding a model into a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainability {
    /// Everything trains (joint / vanilla modes).
    All,
    /// Only `skim.*` parameters train (freeze-transformer mode).
    SkimOnly,
    /// Inference: nothing collects gradients.
    Frozen,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEmbedding {
    pub token: Tensor,
    pub pos: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundQa {
    pub w: Tensor,
    pub b: Tensor,
}

/// Graph handles for every parameter of one model, in one graph.
pub struct BoundModel {
    /// Aligned with the store's entry order; `None` for entries that do
    /// not enter the graph (batch-norm running stats).
    pub leaves: Vec<Option<Tensor>>,
    pub embed: BoundEmbedding,
    pub layers: Vec<BoundLayer>,
    pub qa: BoundQa,
    pub predictors: Vec<BoundPredictor>,
    /// Snapshot of running batch-norm statistics per layer.
    pub bn_stats: Vec<BnStats>,
}

impl BlockSkimModel {
    /// Random initialization: encoder weights N(0, 0.02) in the BERT
    /// convention, conv/linear predictor weights He-scaled, biases zero.
    pub fn new(
        config: ModelConfig,
        predictor: PredictorConfig,
        block_size: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if block_size == 0 || config.max_seq_len % block_size != 0 {
            return Err(Error::Config(format!(
                "block size {} must divide max_seq_len {}",
                block_size, config.max_seq_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.hidden_dim;
        let (v, n, f) = (config.vocab_size, config.max_seq_len, config.ffn_dim);

        let mut normal = |params: &mut ParamStore, name: &str, shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| dist.sample(&mut rng)).collect();
            params.insert(name, TensorData::new(shape, data).unwrap(), true);
        };
        let zeros = |params: &mut ParamStore, name: &str, shape: Vec<usize>| {
            params.insert(name, TensorData::zeros(shape), true);
        };
        let ones = |params: &mut ParamStore, name: &str, shape: Vec<usize>| {
            params.insert(name, TensorData::full(shape, 1.0), true);
        };

        normal(&mut params, "embed.token", vec![v, d], 0.02);
        normal(&mut params, "embed.pos", vec![n, d], 0.02);
        ones(&mut params, "embed.ln.gamma", vec![d]);
        zeros(&mut params, "embed.ln.beta", vec![d]);

        for i in 0..config.num_layers {
            let p = |s: &str| format!("enc.{i}.{s}");
            for m in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                normal(&mut params, &p(m), vec![d, d], 0.02);
                zeros(&mut params, &p(&m.replace('w', "b")), vec![d]);
            }
            ones(&mut params, &p("ln1.gamma"), vec![d]);
            zeros(&mut params, &p("ln1.beta"), vec![d]);
            normal(&mut params, &p("ffn.w1"), vec![d, f], 0.02);
            zeros(&mut params, &p("ffn.b1"), vec![f]);
            normal(&mut params, &p("ffn.w2"), vec![f, d], 0.02);
            zeros(&mut params, &p("ffn.b2"), vec![d]);
            ones(&mut params, &p("ln2.gamma"), vec![d]);
            zeros(&mut params, &p("ln2.beta"), vec![d]);
        }

        normal(&mut params, "qa.w", vec![d, 2], 0.02);
        zeros(&mut params, "qa.b", vec![2]);

        let (c1, c2, c3) = (predictor.c1, predictor.c2, predictor.c3);
        let heads = config.num_heads;
        let fc_in = crate::blockskim::fc_input_len(&predictor, block_size);
        for i in 0..config.num_layers {
            let p = |s: &str| format!("skim.{i}.{s}");
            let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
            normal(&mut params, &p("conv1.w"), vec![c1, heads, 3, 3], he(heads * 9));
            zeros(&mut params, &p("conv1.b"), vec![c1]);
            ones(&mut params, &p("bn1.gamma"), vec![c1]);
            zeros(&mut params, &p("bn1.beta"), vec![c1]);
            params.insert(p("bn1.mean"), TensorData::zeros(vec![c1]), false);
            params.insert(p("bn1.var"), TensorData::full(vec![c1], 1.0), false);
            normal(&mut params, &p("conv2.w"), vec![c2, c1, 3, 3], he(c1 * 9));
            zeros(&mut params, &p("conv2.b"), vec![c2]);
            ones(&mut params, &p("bn2.gamma"), vec![c2]);
            zeros(&mut params, &p("bn2.beta"), vec![c2]);
            params.insert(p("bn2.mean"), TensorData::zeros(vec![c2]), false);
            params.insert(p("bn2.var"), TensorData::full(vec![c2], 1.0), false);
            normal(&mut params, &p("conv3.w"), vec![c3, c2, 1, 1], he(c2));
            zeros(&mut params, &p("conv3.b"), vec![c3]);
            normal(&mut params, &p("fc.w"), vec![fc_in, 2], he(fc_in));
            zeros(&mut params, &p("fc.b"), vec![2]);
        }

        Ok(Self {
            config,
            predictor,
            block_size,
            params,
        })
    }

    /// Copy every parameter into `g` as leaves and return typed handles.
    pub fn bind(&self, g: &mut Graph, trainability: Trainability) -> Result<BoundModel> {
        let mut leaves = Vec::with_capacity(self.params.len());
        for e in self.params.iter() {
            if !e.trainable {
                leaves.push(None);
                continue;
            }
            let requires = match trainability {
                Trainability::All => true,
                Trainability::SkimOnly => e.name.starts_with("skim."),
                Trainability::Frozen => false,
            };
            leaves.push(Some(g.leaf(e.data.clone(), requires)?));
        }
        let at = |name: &str| -> Result<Tensor> {
            let i = self.params.index_of(name)?;
            leaves[i].ok_or_else(|| Error::Internal(format!("{name} not bound")))
        };

        let embed = BoundEmbedding {
            token: at("embed.token")?,
            pos: at("embed.pos")?,
            ln_gamma: at("embed.ln.gamma")?,
            ln_beta: at("embed.ln.beta")?,
        };
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for i in 0..self.config.num_layers {
            let p = |s: &str| format!("enc.{i}.{s}");
            layers.push(BoundLayer {
                wq: at(&p("attn.wq"))?,
                bq: at(&p("attn.bq"))?,
                wk: at(&p("attn.wk"))?,
                bk: at(&p("attn.bk"))?,
                wv: at(&p("attn.wv"))?,
                bv: at(&p("attn.bv"))?,
                wo: at(&p("attn.wo"))?,
                bo: at(&p("attn.bo"))?,
                ln1_gamma: at(&p("ln1.gamma"))?,
                ln1_beta: at(&p("ln1.beta"))?,
                ffn_w1: at(&p("ffn.w1"))?,
                ffn_b1: at(&p("ffn.b1"))?,
                ffn_w2: at(&p("ffn.w2"))?,
                ffn_b2: at(&p("ffn.b2"))?,
                ln2_gamma: at(&p("ln2.gamma"))?,
                ln2_beta: at(&p("ln2.beta"))?,
            });
        }
        let qa = BoundQa {
            w: at("qa.w")?,
            b: at("qa.b")?,
        };
        let mut predictors = Vec::with_capacity(self.config.num_layers);
        let mut bn_stats = Vec::with_capacity(self.config.num_layers);
        for i in 0..self.config.num_layers {
            let p = |s: &str| format!("skim.{i}.{s}");
            predictors.push(BoundPredictor {
                conv1_w: at(&p("conv1.w"))?,
                conv1_b: at(&p("conv1.b"))?,
                bn1_gamma: at(&p("bn1.gamma"))?,
                bn1_beta: at(&p("bn1.beta"))?,
                conv2_w: at(&p("conv2.w"))?,
                conv2_b: at(&p("conv2.b"))?,
                bn2_gamma: at(&p("bn2.gamma"))?,
                bn2_beta: at(&p("bn2.beta"))?,
                conv3_w: at(&p("conv3.w"))?,
                conv3_b: at(&p("conv3.b"))?,
                fc_w: at(&p("fc.w"))?,
                fc_b: at(&p("fc.b"))?,
            });
            bn_stats.push(self.bn_stats(i)?);
        }
        Ok(BoundModel {
            leaves,
            embed,
            layers,
            qa,
            predictors,
            bn_stats,
        })
    }

    pub fn bn_stats(&self, layer: usize) -> Result<BnStats> {
        let p = |s: &str| format!("skim.{layer}.{s}");
        Ok(BnStats {
            bn1_mean: self.params.get(&p("bn1.mean"))?.data().to_vec(),
            bn1_var: self.params.get(&p("bn1.var"))?.data().to_vec(),
            bn2_mean: self.params.get(&p("bn2.mean"))?.data().to_vec(),
            bn2_var: self.params.get(&p("bn2.var"))?.data().to_vec(),
        })
    }

    pub fn set_bn_stats(&mut self, layer: usize, stats: &BnStats) -> Result<()> {
        let p = |s: &str| format!("skim.{layer}.{s}");
        self.params
            .get_mut(&p("bn1.mean"))?
            .data_mut()
            .copy_from_slice(&stats.bn1_mean);
        self.params
            .get_mut(&p("bn1.var"))?
            .data_mut()
            .copy_from_slice(&stats.bn1_var);
        self.params
            .get_mut(&p("bn2.mean"))?
            .data_mut()
            .copy_from_slice(&stats.bn2_mean);
        self.params
            .get_mut(&p("bn2.var"))?
            .data_mut()
            .copy_from_slice(&stats.bn2_var);
        Ok(())
    }
}

/// Token + positional embedding followed by the embedding layernorm.
/// `positions` carries each token's original position so skimmed runs
/// keep their layer-0 positional identity.
pub fn embed_tokens(
    g: &mut Graph,
    b: &BoundModel,
    ids: &[usize],
    positions: &[usize],
) -> Result<Tensor> {
    if ids.len() != positions.len() {
        return Err(Error::Dimension(
            "embed: ids and positions must align".into(),
        ));
    }
    let tok = g.embedding(b.embed.token, ids)?;
    let pos = g.index_select_rows(b.embed.pos, positions)?;
    let x = g.add(tok, pos)?;
    g.layernorm(x, b.embed.ln_gamma, b.embed.ln_beta, LN_EPS)
}

/// Additive `[n,n]` attention mask: column `j` is `MASK_PENALTY` for
/// padding positions, 0 elsewhere.
pub fn attention_mask_tensor(g: &mut Graph, pad_mask: &[bool]) -> Result<Tensor> {
    let n = pad_mask.len();
    let mut row = vec![0.0; n];
    for (j, &real) in pad_mask.iter().enumerate() {
        if !real {
            row[j] = MASK_PENALTY;
        }
    }
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        data.extend_from_slice(&row);
    }
    g.constant(TensorData::new(vec![n, n], data)?)
}

/// Multi-head self-attention. Returns the contextualized hidden states
/// `[n,d]` and the post-softmax attention weights `[H,n,n]`.
pub fn multi_head_attention(
    g: &mut Graph,
    layer: &BoundLayer,
    num_heads: usize,
    hidden: Tensor,
    mask: Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = g.shape(hidden)[1];
    let dk = d / num_heads;
    let q = g.matmul(hidden, layer.wq)?;
    let q = g.add_bias(q, layer.bq)?;
    let k = g.matmul(hidden, layer.wk)?;
    let k = g.add_bias(k, layer.bk)?;
    let v = g.matmul(hidden, layer.wv)?;
    let v = g.add_bias(v, layer.bv)?;

    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_ctx = Vec::with_capacity(num_heads);
    let mut head_attn = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.slice_last(q, h * dk, dk)?;
        let kh = g.slice_last(k, h * dk, dk)?;
        let vh = g.slice_last(v, h * dk, dk)?;
        let kht = g.transpose(kh)?;
        let scores = g.matmul(qh, kht)?;
        let scores = g.scale(scores, scale)?;
        let scores = g.add(scores, mask)?;
        let attn = g.softmax(scores, 1)?;
        head_attn.push(attn);
        head_ctx.push(g.matmul(attn, vh)?);
    }
    let attn_all = g.stack0(&head_attn)?;
    let ctx = g.concat_last(&head_ctx)?;
    let out = g.matmul(ctx, layer.wo)?;
    let out = g.add_bias(out, layer.bo)?;
    Ok((out, attn_all))
}

/// One encoder layer: MHA + residual + layernorm, FFN + residual +
/// layernorm. Returns the new hidden states and the attention weights.
pub fn encoder_layer_forward(
    g: &mut Graph,
    layer: &BoundLayer,
    num_heads: usize,
    hidden: Tensor,
    mask: Tensor,
) -> Result<(Tensor, Tensor)> {
    let (attn_out, attn) = multi_head_attention(g, layer, num_heads, hidden, mask)?;
    let res = g.add(hidden, attn_out)?;
    let h1 = g.layernorm(res, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    let f = g.matmul(h1, layer.ffn_w1)?;
    let f = g.add_bias(f, layer.ffn_b1)?;
    let f = g.relu(f)?;
    let f = g.matmul(f, layer.ffn_w2)?;
    let f = g.add_bias(f, layer.ffn_b2)?;
    let res2 = g.add(h1, f)?;
    let h2 = g.layernorm(res2, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
    Ok((h2, attn))
}

/// Full-stack forward without skimming. With `capture` the per-layer
/// post-softmax attention tensors are returned as well; capture is
/// read-only and never changes the hidden states.
pub fn encoder_forward(
    g: &mut Graph,
    b: &BoundModel,
    cfg: &ModelConfig,
    ids: &[usize],
    pad_mask: &[bool],
    capture: bool,
) -> Result<(Tensor, Option<Vec<Tensor>>)> {
    if ids.len() > cfg.max_seq_len {
        return Err(Error::Dimension(format!(
            "sequence length {} exceeds max {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let mut hidden = embed_tokens(g, b, ids, &positions)?;
    let mask = attention_mask_tensor(g, pad_mask)?;
    let mut trace = if capture { Some(Vec::new()) } else { None };
    for layer in &b.layers {
        let (h, attn) = encoder_layer_forward(g, layer, cfg.num_heads, hidden, mask)?;
        hidden = h;
        if let Some(t) = trace.as_mut() {
            t.push(attn);
        }
    }
    Ok((hidden, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> BlockSkimModel {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 16,
            dropout_rate: 0.0,
        };
        let pred = PredictorConfig {
            c1: 3,
            c2: 3,
            c3: 2,
        };
        BlockSkimModel::new(cfg, pred, 4, 7).unwrap()
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = tiny_model();
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainability::Frozen).unwrap();
        let hidden = embed_tokens(&mut g, &b, &[3], &[0]).unwrap();
        let mask = attention_mask_tensor(&mut g, &[true]).unwrap();
        let (_, attn) = multi_head_attention(&mut g, &b.layers[0], 2, hidden, mask).unwrap();
        assert_eq!(g.shape(attn), &[2, 1, 1]);
        for v in g.value(attn).data() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn identical_embeddings_give_uniform_attention() {
        let m = tiny_model();
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainability::Frozen).unwrap();
        // same token at every position, same positional row: force equality
        let ids = [5usize; 4];
        let positions = [0usize; 4];
        let hidden = embed_tokens(&mut g, &b, &ids, &positions).unwrap();
        let mask = attention_mask_tensor(&mut g, &[true; 4]).unwrap();
        let (_, attn) = multi_head_attention(&mut g, &b.layers[0], 2, hidden, mask).unwrap();
        for v in g.value(attn).data() {
            assert!((v - 0.25).abs() <= 1e-9);
        }
    }

    #[test]
    fn direct_formula_oracle_matches_mha() {
        // independent evaluation of softmax(QK^T/sqrt(dk)) V from raw params
        let m = tiny_model();
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainability::Frozen).unwrap();
        let ids = [1usize, 7, 3, 9];
        let positions: Vec<usize> = (0..4).collect();
        let hidden = embed_tokens(&mut g, &b, &ids, &positions).unwrap();
        let mask = attention_mask_tensor(&mut g, &[true; 4]).unwrap();
        let (out, attn) = multi_head_attention(&mut g, &b.layers[0], 2, hidden, mask).unwrap();

        let hv = g.value(hidden).data().to_vec();
        let d = 8usize;
        let dk = 4usize;
        let n = 4usize;
        let lin = |w: &[f64], bia: &[f64]| {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    let mut s = bia[j];
                    for p in 0..d {
                        s += hv[i * d + p] * w[p * d + j];
                    }
                    out[i * d + j] = s;
                }
            }
            out
        };
        let q = lin(
            m.params.get("enc.0.attn.wq").unwrap().data(),
            m.params.get("enc.0.attn.bq").unwrap().data(),
        );
        let k = lin(
            m.params.get("enc.0.attn.wk").unwrap().data(),
            m.params.get("enc.0.attn.bk").unwrap().data(),
        );
        let v = lin(
            m.params.get("enc.0.attn.wv").unwrap().data(),
            m.params.get("enc.0.attn.bv").unwrap().data(),
        );
        let mut ctx = vec![0.0; n * d];
        let attn_v = g.value(attn).data();
        for h in 0..2 {
            for i in 0..n {
                // scores row, softmax, context
                let mut row = vec![0.0; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..dk {
                        s += q[i * d + h * dk + p] * k[j * d + h * dk + p];
                    }
                    row[j] = s / (dk as f64).sqrt();
                }
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..n {
                    let a = exps[j] / sum;
                    assert!(
                        (a - attn_v[h * n * n + i * n + j]).abs() < 1e-12,
                        "attention mismatch"
                    );
                    for p in 0..dk {
                        ctx[i * d + h * dk + p] += a * v[j * d + h * dk + p];
                    }
                }
            }
        }
        // apply output projection to the oracle context
        let wo = m.params.get("enc.0.attn.wo").unwrap().data();
        let bo = m.params.get("enc.0.attn.bo").unwrap().data();
        let ov = g.value(out).data();
        for i in 0..n {
            for j in 0..d {
                let mut s = bo[j];
                for p in 0..d {
                    s += ctx[i * d + p] * wo[p * d + j];
                }
                assert!((s - ov[i * d + j]).abs() < 1e-12, "output mismatch");
            }
        }
    }

    #[test]
    fn capture_does_not_change_hidden_states() {
        let m = tiny_model();
        let ids = [2usize, 4, 6, 8, 10];
        let pad = [true; 5];
        let run = |capture: bool| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, Trainability::Frozen).unwrap();
            let (h, _) = encoder_forward(&mut g, &b, &m.config, &ids, &pad, capture).unwrap();
            g.value(h).data().to_vec()
        };
        let h0 = run(false);
        let h1 = run(true);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&h0), bits(&h1));
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let m = tiny_model();
        let ids = [1usize, 2, 3];
        let pad = [true; 3];
        let run = || {
            let mut g = Graph::new();
            let b = m.bind(&mut g, Trainability::Frozen).unwrap();
            let (h, _) = encoder_forward(&mut g, &b, &m.config, &ids, &pad, false).unwrap();
            g.value(h)
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn token_id_out_of_vocab_is_index_error() {
        let m = tiny_model();
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainability::Frozen).unwrap();
        let r = encoder_forward(&mut g, &b, &m.config, &[99], &[true], false);
        assert!(matches!(r, Err(Error::Index(_))));
    }

    #[test]
    fn pad_suffix_does_not_change_real_logits() {
        // length covariance: permuting the pad-only suffix (here: varying
        // its token ids) leaves real positions untouched
        let m = tiny_model();
        let run = |pad_ids: [usize; 2]| {
            let ids = [1usize, 2, 3, pad_ids[0], pad_ids[1]];
            let pad = [true, true, true, false, false];
            let mut g = Graph::new();
            let b = m.bind(&mut g, Trainability::Frozen).unwrap();
            let (h, _) = encoder_forward(&mut g, &b, &m.config, &ids, &pad, false).unwrap();
            g.value(h).data()[..3 * 8].to_vec()
        };
        let a = run([0, 0]);
        let bv = run([5, 11]);
        for (x, y) in a.iter().zip(&bv) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}
