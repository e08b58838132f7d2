//! CNN block-relevance predictor operating on diagonal attention slices.
//!
//! Pipeline per block (attention heads as input channels):
//! conv3x3(pad 1) -> BN -> relu -> avgpool2x2 -> conv3x3(pad 1) -> BN ->
//! relu -> avgpool2x2 -> conv1x1 -> relu -> flatten -> linear -> 2 logits.
//! A pooling stage is skipped whenever the spatial extent is below 2, so
//! the same predictor runs at any block size down to k=1.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, TensorData};

/// Channel widths of the three convolutions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictorConfig {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            c1: 16,
            c2: 16,
            c3: 8,
        }
    }
}

fn pool_step(s: usize) -> usize {
    if s >= 2 {
        s / 2
    } else {
        s
    }
}

/// Spatial extent after the (up to) two pooling stages for block size `k`.
pub fn spatial_after_pools(k: usize) -> usize {
    pool_step(pool_step(k))
}

/// Flattened feature length entering the linear head.
pub fn fc_input_len(cfg: &PredictorConfig, k: usize) -> usize {
    let s = spatial_after_pools(k);
    cfg.c3 * s * s
}

/// Graph handles for one layer's predictor parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundPredictor {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub bn1_gamma: Tensor,
    pub bn1_beta: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub bn2_gamma: Tensor,
    pub bn2_beta: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

/// Running batch-norm statistics for one layer's predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub bn1_mean: Vec<f64>,
    pub bn1_var: Vec<f64>,
    pub bn2_mean: Vec<f64>,
    pub bn2_var: Vec<f64>,
}

impl BnStats {
    pub fn fresh(cfg: &PredictorConfig) -> Self {
        Self {
            bn1_mean: vec![0.0; cfg.c1],
            bn1_var: vec![1.0; cfg.c1],
            bn2_mean: vec![0.0; cfg.c2],
            bn2_var: vec![1.0; cfg.c2],
        }
    }

    /// Fold freshly observed batch statistics in with the given momentum.
    pub fn update(&mut self, batch: &BnStats, momentum: f64) {
        let fold = |run: &mut Vec<f64>, new: &[f64]| {
            for (r, n) in run.iter_mut().zip(new) {
                *r = (1.0 - momentum) * *r + momentum * *n;
            }
        };
        fold(&mut self.bn1_mean, &batch.bn1_mean);
        fold(&mut self.bn1_var, &batch.bn1_var);
        fold(&mut self.bn2_mean, &batch.bn2_mean);
        fold(&mut self.bn2_var, &batch.bn2_var);
    }
}

/// Batch-norm mode for a predictor forward pass.
pub enum PredictorMode<'a> {
    /// Normalize by batch statistics and report them to the caller.
    Train,
    /// Normalize by the supplied running statistics.
    Eval(&'a BnStats),
}

pub struct PredictorOutput {
    /// `[num_blocks, 2]` relevance logits.
    pub logits: Tensor,
    /// Batch statistics observed in train mode.
    pub batch_stats: Option<BnStats>,
}

const BN_EPS: f64 = 1e-5;

/// Extract the per-block diagonal attention squares.
///
/// `attn` is `[H, n, n]` with `n` a multiple of `k`; the result stacks
/// slice `j = attn[:, j*k..(j+1)*k, j*k..(j+1)*k]` into `[n/k, H, k, k]`
/// so heads become CNN input channels.
pub fn diagonal_slices(g: &mut Graph<f64>, attn: Tensor, k: usize) -> Result<Tensor> {
    let sh = g.shape(attn).to_vec();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(Error::Dimension(format!(
            "diagonal_slices: expected [H,n,n], got {:?}",
            sh
        )));
    }
    let (h, n) = (sh[0], sh[1]);
    if k == 0 || n % k != 0 {
        return Err(Error::Internal(format!(
            "diagonal_slices: length {} violates block padding contract for k={}",
            n, k
        )));
    }
    let nb = n / k;
    let av = g.value(attn).data();
    let mut out = Vec::with_capacity(nb * h * k * k);
    for j in 0..nb {
        for hd in 0..h {
            for y in 0..k {
                let row = hd * n * n + (j * k + y) * n + j * k;
                out.extend_from_slice(&av[row..row + k]);
            }
        }
    }
    let value = TensorData::new(vec![nb, h, k, k], out)?;
    let ai = attn.id();
    g.emit_external("diagonal_slices", value, &[attn], move |vals, gr| {
        let mut da = vec![0.0; vals[ai].numel()];
        let mut src = 0;
        for j in 0..nb {
            for hd in 0..h {
                for y in 0..k {
                    let row = hd * n * n + (j * k + y) * n + j * k;
                    da[row..row + k].copy_from_slice(&gr[src..src + k]);
                    src += k;
                }
            }
        }
        vec![(ai, da)]
    })
}

/// Run the predictor over a stack of block slices `[nb, H, k, k]`.
pub fn cnn_predict_blocks(
    g: &mut Graph<f64>,
    p: &BoundPredictor,
    slices: Tensor,
    mode: PredictorMode<'_>,
) -> Result<PredictorOutput> {
    let sh = g.shape(slices).to_vec();
    if sh.len() != 4 {
        return Err(Error::Dimension(format!(
            "cnn_predict: expected [nb,H,k,k], got {:?}",
            sh
        )));
    }
    let nb = sh[0];
    let k = sh[2];

    let mut batch_stats: Option<BnStats> = None;

    let x = g.conv2d(slices, p.conv1_w, 1)?;
    let x = g.add_channel_bias(x, p.conv1_b)?;
    let x = match &mode {
        PredictorMode::Train => {
            let (y, mean, var) = g.batchnorm_train(x, p.bn1_gamma, p.bn1_beta, BN_EPS)?;
            batch_stats = Some(BnStats {
                bn1_mean: mean,
                bn1_var: var,
                bn2_mean: Vec::new(),
                bn2_var: Vec::new(),
            });
            y
        }
        PredictorMode::Eval(stats) => {
            g.batchnorm_eval(x, p.bn1_gamma, p.bn1_beta, &stats.bn1_mean, &stats.bn1_var, BN_EPS)?
        }
    };
    let x = g.relu(x)?;
    let mut s = k;
    let x = if s >= 2 {
        s /= 2;
        g.avg_pool_2x2(x)?
    } else {
        x
    };

    let x = g.conv2d(x, p.conv2_w, 1)?;
    let x = g.add_channel_bias(x, p.conv2_b)?;
    let x = match &mode {
        PredictorMode::Train => {
            let (y, mean, var) = g.batchnorm_train(x, p.bn2_gamma, p.bn2_beta, BN_EPS)?;
            let st = batch_stats.as_mut().unwrap();
            st.bn2_mean = mean;
            st.bn2_var = var;
            y
        }
        PredictorMode::Eval(stats) => {
            g.batchnorm_eval(x, p.bn2_gamma, p.bn2_beta, &stats.bn2_mean, &stats.bn2_var, BN_EPS)?
        }
    };
    let x = g.relu(x)?;
    let x = if s >= 2 {
        s /= 2;
        g.avg_pool_2x2(x)?
    } else {
        x
    };

    let x = g.conv2d(x, p.conv3_w, 0)?;
    let x = g.add_channel_bias(x, p.conv3_b)?;
    let x = g.relu(x)?;

    let c3 = g.shape(x)[1];
    let flat = g.reshape(x, vec![nb, c3 * s * s])?;
    let logits = g.matmul(flat, p.fc_w)?;
    let logits = g.add_bias(logits, p.fc_b)?;
    Ok(PredictorOutput {
        logits,
        batch_stats,
    })
}

/// Single-slice convenience wrapper: `[H,k,k]` -> 2 logits, eval mode.
pub fn cnn_predict(
    g: &mut Graph<f64>,
    p: &BoundPredictor,
    slice: Tensor,
    stats: &BnStats,
) -> Result<Tensor> {
    let sh = g.shape(slice).to_vec();
    if sh.len() != 3 {
        return Err(Error::Dimension(format!(
            "cnn_predict: expected [H,k,k], got {:?}",
            sh
        )));
    }
    let batched = g.reshape(slice, vec![1, sh[0], sh[1], sh[2]])?;
    let out = cnn_predict_blocks(g, p, batched, PredictorMode::Eval(stats))?;
    g.reshape(out.logits, vec![2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn bind_zero(g: &mut Graph<f64>, cfg: &PredictorConfig, heads: usize, k: usize) -> BoundPredictor {
        bind_with(g, cfg, heads, k, |_| 0.0, (0.1, -0.2))
    }

    fn mk(g: &mut Graph<f64>, shape: Vec<usize>, w: &mut impl FnMut(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(w).collect();
        g.leaf(TensorData::new(shape, data).unwrap(), true).unwrap()
    }

    fn bind_with(
        g: &mut Graph<f64>,
        cfg: &PredictorConfig,
        heads: usize,
        k: usize,
        mut w: impl FnMut(usize) -> f64,
        fc_bias: (f64, f64),
    ) -> BoundPredictor {
        let conv1_w = mk(g, vec![cfg.c1, heads, 3, 3], &mut w);
        let conv1_b = mk(g, vec![cfg.c1], &mut w);
        let bn1_gamma = g.leaf(TensorData::full(vec![cfg.c1], 1.0), true).unwrap();
        let bn1_beta = mk(g, vec![cfg.c1], &mut w);
        let conv2_w = mk(g, vec![cfg.c2, cfg.c1, 3, 3], &mut w);
        let conv2_b = mk(g, vec![cfg.c2], &mut w);
        let bn2_gamma = g.leaf(TensorData::full(vec![cfg.c2], 1.0), true).unwrap();
        let bn2_beta = mk(g, vec![cfg.c2], &mut w);
        let conv3_w = mk(g, vec![cfg.c3, cfg.c2, 1, 1], &mut w);
        let conv3_b = mk(g, vec![cfg.c3], &mut w);
        let fc_w = mk(g, vec![fc_input_len(cfg, k), 2], &mut w);
        let fc_b = g
            .leaf(TensorData::from_slice(&[fc_bias.0, fc_bias.1]), true)
            .unwrap();
        BoundPredictor {
            conv1_w,
            conv1_b,
            bn1_gamma,
            bn1_beta,
            conv2_w,
            conv2_b,
            bn2_gamma,
            bn2_beta,
            conv3_w,
            conv3_b,
            fc_w,
            fc_b,
        }
    }

    #[test]
    fn spatial_trace_k32() {
        assert_eq!(spatial_after_pools(32), 8);
        let cfg = PredictorConfig::default();
        assert_eq!(fc_input_len(&cfg, 32), cfg.c3 * 64);
    }

    #[test]
    fn spatial_trace_small_k() {
        assert_eq!(spatial_after_pools(1), 1);
        assert_eq!(spatial_after_pools(2), 1);
        assert_eq!(spatial_after_pools(4), 1);
        assert_eq!(spatial_after_pools(16), 4);
    }

    #[test]
    fn diagonal_slices_shapes_and_values() {
        // N'=64, k=32, H=12 -> 2 slices of 12x32x32
        let mut g = Graph::<f64>::new();
        let n = 64;
        let h = 12;
        let data: Vec<f64> = (0..h * n * n).map(|i| (i % 97) as f64 * 0.01).collect();
        let attn = g
            .constant(TensorData::new(vec![h, n, n], data.clone()).unwrap())
            .unwrap();
        let slices = diagonal_slices(&mut g, attn, 32).unwrap();
        assert_eq!(g.shape(slices), &[2, 12, 32, 32]);
        // brute-force elementwise copy comparison, exact
        let sv = g.value(slices).data();
        for j in 0..2 {
            for hd in 0..h {
                for y in 0..32 {
                    for x in 0..32 {
                        let expect = data[hd * n * n + (j * 32 + y) * n + (j * 32 + x)];
                        let got = sv[((j * h + hd) * 32 + y) * 32 + x];
                        assert_eq!(got, expect);
                    }
                }
            }
        }
    }

    #[test]
    fn diagonal_slice_full_map_when_k_equals_n() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64).collect();
        let attn = g
            .constant(TensorData::new(vec![2, 4, 4], data.clone()).unwrap())
            .unwrap();
        let s = diagonal_slices(&mut g, attn, 4).unwrap();
        assert_eq!(g.shape(s), &[1, 2, 4, 4]);
        assert_eq!(g.value(s).data(), &data[..]);
    }

    #[test]
    fn uniform_attention_gives_constant_slices() {
        let mut g = Graph::<f64>::new();
        let n = 8;
        let attn = g
            .constant(TensorData::full(vec![2, n, n], 1.0 / n as f64))
            .unwrap();
        let s = diagonal_slices(&mut g, attn, 4).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 1.0 / n as f64));
    }

    #[test]
    fn non_multiple_length_is_internal_error() {
        let mut g = Graph::<f64>::new();
        let attn = g.constant(TensorData::zeros(vec![2, 6, 6])).unwrap();
        assert!(matches!(
            diagonal_slices(&mut g, attn, 4),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let cfg = PredictorConfig {
            c1: 4,
            c2: 4,
            c3: 2,
        };
        let mut g = Graph::<f64>::new();
        let p = bind_zero(&mut g, &cfg, 2, 4);
        let slice = g
            .constant(TensorData::full(vec![2, 4, 4], 0.3))
            .unwrap();
        let stats = BnStats::fresh(&cfg);
        let logits = cnn_predict(&mut g, &p, slice, &stats).unwrap();
        assert_eq!(g.value(logits).data(), &[0.1, -0.2]);
    }

    #[test]
    fn k1_keeps_spatial_1x1() {
        let cfg = PredictorConfig {
            c1: 3,
            c2: 3,
            c3: 2,
        };
        let mut g = Graph::<f64>::new();
        let p = bind_with(&mut g, &cfg, 2, 1, |i| ((i * 13 % 7) as f64 - 3.0) * 0.11, (0.0, 0.0));
        let slices = g
            .constant(TensorData::full(vec![5, 2, 1, 1], 0.8))
            .unwrap();
        let out = cnn_predict_blocks(&mut g, &p, slices, PredictorMode::Train).unwrap();
        assert_eq!(g.shape(out.logits), &[5, 2]);
    }

    #[test]
    fn predictor_gradient_wrt_slice_and_params() {
        let cfg = PredictorConfig {
            c1: 3,
            c2: 3,
            c3: 2,
        };
        let x0 = TensorData::new(
            vec![2, 2, 4, 4],
            (0..64).map(|i| ((i * 7 % 13) as f64) * 0.07 + 0.01).collect(),
        )
        .unwrap();
        // gradient w.r.t. the input slices
        let err = grad_check(
            |g, x| {
                let p = bind_with(g, &cfg, 2, 4, |i| ((i * 11 % 17) as f64 - 8.0) * 0.09, (0.05, -0.03));
                let out = cnn_predict_blocks(g, &p, x, PredictorMode::Train)?;
                let l = g.cross_entropy(out.logits, &[1, 0])?;
                g.sum(l)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-3, "slice grad err {}", err);

        // gradient w.r.t. the first conv weight
        let w0 = TensorData::new(
            vec![3, 2, 3, 3],
            (0..54).map(|i| ((i * 5 % 11) as f64 - 5.0) * 0.08).collect(),
        )
        .unwrap();
        let x0c = x0.clone();
        let err = grad_check(
            |g, w| {
                let mut p = bind_with(g, &cfg, 2, 4, |i| ((i * 11 % 17) as f64 - 8.0) * 0.09, (0.05, -0.03));
                p.conv1_w = w;
                let x = g.leaf(x0c.clone(), false)?;
                let out = cnn_predict_blocks(g, &p, x, PredictorMode::Train)?;
                let l = g.cross_entropy(out.logits, &[1, 0])?;
                g.sum(l)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-3, "conv1 weight grad err {}", err);
    }
}
