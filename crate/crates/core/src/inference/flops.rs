//! Analytical FLOPs accounting (1 MAC = 2 FLOPs).

use crate::blockskim::{spatial_after_pools, PredictorConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use serde::Serialize;

/// Everything needed to price a run.
#[derive(Debug, Clone, Copy)]
pub struct FlopsConfig {
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub block_size: usize,
    pub predictor: PredictorConfig,
}

impl FlopsConfig {
    pub fn from_model(cfg: &ModelConfig, predictor: PredictorConfig, block_size: usize) -> Self {
        Self {
            hidden_dim: cfg.hidden_dim,
            ffn_dim: cfg.ffn_dim,
            num_heads: cfg.num_heads,
            head_dim: cfg.head_dim(),
            block_size,
            predictor,
        }
    }

    /// One encoder layer at sequence length `n`:
    /// attention `2*(4*n*d^2 + 2*H*n^2*d_k)` plus FFN `2*(2*n*d*ffn)`.
    pub fn layer_flops(&self, n: usize) -> u64 {
        let (n, d, h, dk, f) = (
            n as u64,
            self.hidden_dim as u64,
            self.num_heads as u64,
            self.head_dim as u64,
            self.ffn_dim as u64,
        );
        2 * (4 * n * d * d + 2 * h * n * n * dk) + 2 * (2 * n * d * f)
    }

    /// Relevance predictor cost for `nblocks` blocks (conv and linear
    /// multiply-accumulates; normalization and pooling are negligible).
    pub fn predictor_flops(&self, nblocks: usize) -> u64 {
        let k = self.block_size;
        let p = &self.predictor;
        let s1 = k; // conv1 output spatial (padding 1)
        let s2 = if s1 >= 2 { s1 / 2 } else { s1 };
        let s3 = if s2 >= 2 { s2 / 2 } else { s2 };
        let conv1 = (p.c1 * self.num_heads * 9 * s1 * s1) as u64;
        let conv2 = (p.c2 * p.c1 * 9 * s2 * s2) as u64;
        let conv3 = (p.c3 * p.c2 * s3 * s3) as u64;
        let fc = (spatial_after_pools(k) * spatial_after_pools(k) * p.c3 * 2) as u64;
        2 * (conv1 + conv2 + conv3 + fc) * nblocks as u64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub length: usize,
    pub encoder: u64,
    pub predictor: u64,
}

/// Per-layer and total floating-point-operation counts for a skimmed run
/// against its vanilla counterpart.
#[derive(Debug, Clone, Serialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub vanilla_total: u64,
    pub skimmed_total: u64,
    /// vanilla / skimmed; >= 1 when skimming saves work.
    pub ratio: f64,
}

/// Price a run whose layer `i` processed `lengths[i]` tokens, with the
/// predictor executing on `lengths[i]/k` blocks at each active layer.
/// The vanilla reference runs every layer at `vanilla_len` with no
/// predictor.
pub fn flops_count(
    cfg: &FlopsConfig,
    vanilla_len: usize,
    lengths: &[usize],
    active_layers: &[usize],
) -> Result<FlopsReport> {
    if lengths.is_empty() {
        return Err(Error::Dimension("flops_count: no layer lengths".into()));
    }
    let mut per_layer = Vec::with_capacity(lengths.len());
    let mut skimmed_total = 0u64;
    for (i, &n) in lengths.iter().enumerate() {
        let encoder = cfg.layer_flops(n);
        let predictor = if active_layers.contains(&i) {
            cfg.predictor_flops(n / cfg.block_size)
        } else {
            0
        };
        skimmed_total += encoder + predictor;
        per_layer.push(LayerFlops {
            layer: i,
            length: n,
            encoder,
            predictor,
        });
    }
    let vanilla_total = cfg.layer_flops(vanilla_len) * lengths.len() as u64;
    let ratio = vanilla_total as f64 / skimmed_total as f64;
    Ok(FlopsReport {
        per_layer,
        vanilla_total,
        skimmed_total,
        ratio,
    })
}

/// Speedup under the linear-complexity approximation:
/// `L / sum_{i=1..L} prod_{j<=i} r_j` for per-layer retention fractions.
pub fn analytical_speedup(retentions: &[f64]) -> Result<f64> {
    if retentions.is_empty() {
        return Err(Error::Domain("analytical_speedup: empty retention list".into()));
    }
    let mut cum = 1.0;
    let mut denom = 0.0;
    for &r in retentions {
        if r <= 0.0 || r > 1.0 {
            return Err(Error::Domain(format!(
                "retention {} outside (0, 1]",
                r
            )));
        }
        cum *= r;
        denom += cum;
    }
    Ok(retentions.len() as f64 / denom)
}

/// Per-layer retention fractions implied by processed lengths, such that
/// `prod_{j<=i} r_j = lengths[i] / vanilla_len`.
pub fn retentions_from_lengths(vanilla_len: usize, lengths: &[usize]) -> Result<Vec<f64>> {
    if vanilla_len == 0 {
        return Err(Error::Domain("vanilla length must be positive".into()));
    }
    let mut prev = vanilla_len as f64;
    let mut out = Vec::with_capacity(lengths.len());
    for &n in lengths {
        if n == 0 {
            return Err(Error::Domain("layer length must be positive".into()));
        }
        out.push(n as f64 / prev);
        prev = n as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, h: usize, ffn: usize, k: usize) -> FlopsConfig {
        FlopsConfig {
            hidden_dim: d,
            ffn_dim: ffn,
            num_heads: h,
            head_dim: d / h,
            block_size: k,
            predictor: PredictorConfig::default(),
        }
    }

    #[test]
    fn degenerate_config_hand_count() {
        // n=1, d=1, H=1, dk=1, ffn=1:
        // attention 2*(4 + 2) = 12, ffn 2*2 = 4 -> 16 per layer
        let c = cfg(1, 1, 1, 1);
        assert_eq!(c.layer_flops(1), 16);
    }

    #[test]
    fn halving_length_halves_total_when_linear_dominates() {
        // huge d relative to n keeps the quadratic term negligible
        let c = cfg(512, 4, 1024, 4);
        let full = flops_count(&c, 8, &[8, 8, 8, 8], &[]).unwrap();
        let half = flops_count(&c, 8, &[4, 4, 4, 4], &[]).unwrap();
        let measured = full.skimmed_total as f64 / half.skimmed_total as f64;
        assert!((measured - 2.0).abs() / 2.0 < 0.01, "ratio {}", measured);
    }

    #[test]
    fn predictor_below_one_percent_of_layer_at_reference_scale() {
        // the "100x smaller than a layer" claim is about BERT-base
        // dimensions (d=768, H=12, ffn=3072, N=384, k=32)
        let c = cfg(768, 12, 3072, 32);
        let layer = c.layer_flops(384);
        let pred = c.predictor_flops(384 / 32);
        assert!(
            (pred as f64) < 0.01 * layer as f64,
            "predictor {} vs layer {}",
            pred,
            layer
        );
        // at desk scale the fixed-width predictor is relatively heavier
        // but still well under one encoder layer
        let desk = cfg(64, 4, 128, 16);
        assert!(desk.predictor_flops(128 / 16) < desk.layer_flops(128));
    }

    #[test]
    fn retain_all_is_exactly_one() {
        assert_eq!(analytical_speedup(&[1.0; 12]).unwrap(), 1.0);
    }

    #[test]
    fn paper_worked_example() {
        let s = analytical_speedup(&[0.9; 12]).unwrap();
        assert!((s - 1.86).abs() <= 0.01, "speedup {}", s);
    }

    #[test]
    fn half_retention_two_layers() {
        let s = analytical_speedup(&[0.5, 0.5]).unwrap();
        let expect = 2.0 / (0.5 + 0.25);
        assert!((s - expect).abs() < 1e-12);
        assert!((s - 2.667).abs() < 1e-3);
    }

    #[test]
    fn out_of_domain_retention_rejected() {
        assert!(matches!(
            analytical_speedup(&[0.9, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            analytical_speedup(&[1.1]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn retentions_invert_lengths() {
        let r = retentions_from_lengths(100, &[100, 50, 50, 25]).unwrap();
        assert_eq!(r, vec![1.0, 0.5, 1.0, 0.5]);
        let mut cum = 1.0;
        for (i, &ri) in r.iter().enumerate() {
            cum *= ri;
            assert!((cum - [100.0, 50.0, 50.0, 25.0][i] / 100.0).abs() < 1e-12);
        }
    }
}
