//! Binary logistic-regression probe over block attention features.

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 10_000;
pub const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ProbeModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        let z: f64 = self.bias
            + self
                .weights
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.score(x) >= 0.5
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub train_f1: f64,
    pub heldout_accuracy: f64,
    pub heldout_f1: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn accuracy_f1(model: &ProbeModel, xs: &[&Vec<f64>], ys: &[u8]) -> (f64, f64) {
    let mut correct = 0usize;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (x, &y) in xs.iter().zip(ys) {
        let pred = model.predict(x);
        let gold = y == 1;
        if pred == gold {
            correct += 1;
        }
        match (pred, gold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let acc = correct as f64 / xs.len().max(1) as f64;
    let denom = (2 * tp + fp + fneg) as f64;
    let f1 = if denom > 0.0 {
        2.0 * tp as f64 / denom
    } else {
        0.0
    };
    (acc, f1)
}

/// Fit a regularized logistic regression by plain gradient descent
/// (constant step from a Lipschitz bound) until the gradient norm drops
/// below `GRAD_TOL` or `MAX_ITERS` iterations. Every 5th sample is held
/// out for the report.
pub fn probe_fit(
    features: &[Vec<f64>],
    labels: &[u8],
    l2: f64,
) -> Result<(ProbeModel, ProbeReport)> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Data("probe_fit: features/labels mismatch".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Data("probe_fit: ragged feature rows".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Data(
            "probe_fit: need both classes present".into(),
        ));
    }

    let mut train_x: Vec<&Vec<f64>> = Vec::new();
    let mut train_y: Vec<u8> = Vec::new();
    let mut held_x: Vec<&Vec<f64>> = Vec::new();
    let mut held_y: Vec<u8> = Vec::new();
    for (i, (x, &y)) in features.iter().zip(labels).enumerate() {
        if i % 5 == 4 {
            held_x.push(x);
            held_y.push(y);
        } else {
            train_x.push(x);
            train_y.push(y);
        }
    }
    // degenerate holdout split (single-class train) falls back to all data
    let train_pos = train_y.iter().filter(|&&y| y == 1).count();
    if train_x.is_empty() || train_pos == 0 || train_pos == train_y.len() {
        train_x = features.iter().collect();
        train_y = labels.to_vec();
        held_x.clear();
        held_y.clear();
    }

    let n = train_x.len() as f64;
    // Lipschitz bound for the mean logistic loss gradient: the bias term
    // contributes 1 to each squared row norm
    let mean_sq: f64 = train_x
        .iter()
        .map(|x| 1.0 + x.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n;
    let lip = mean_sq / 4.0 + l2;
    let step = 1.0 / lip;

    let mut model = ProbeModel {
        weights: vec![0.0; dim],
        bias: 0.0,
    };
    let mut iterations = 0;
    let mut converged = false;
    let mut gw = vec![0.0; dim];
    while iterations < MAX_ITERS {
        for v in &mut gw {
            *v = 0.0;
        }
        let mut gb = 0.0;
        for (x, &y) in train_x.iter().zip(&train_y) {
            let err = model.score(x) - f64::from(y);
            gb += err;
            for (g, v) in gw.iter_mut().zip(x.iter()) {
                *g += err * v;
            }
        }
        gb /= n;
        let mut norm_sq = gb * gb;
        for (g, w) in gw.iter_mut().zip(&model.weights) {
            *g = *g / n + l2 * w;
            norm_sq += *g * *g;
        }
        iterations += 1;
        if norm_sq.sqrt() < GRAD_TOL {
            converged = true;
            break;
        }
        model.bias -= step * gb;
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= step * *g;
        }
    }

    let (train_accuracy, train_f1) = accuracy_f1(&model, &train_x, &train_y);
    let (heldout_accuracy, heldout_f1) = if held_x.is_empty() {
        (train_accuracy, train_f1)
    } else {
        accuracy_f1(&model, &held_x, &held_y)
    };
    Ok((
        model,
        ProbeReport {
            train_accuracy,
            train_f1,
            heldout_accuracy,
            heldout_f1,
            iterations,
            converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_toy_features_reach_full_accuracy() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            xs.push(vec![c as f64 * 2.0 - 1.0, 0.3]);
            ys.push(c as u8);
        }
        let (_, report) = probe_fit(&xs, &ys, 1e-3).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
        assert_eq!(report.heldout_accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_score_chance_on_holdout() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 2000;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let (_, report) = probe_fit(&xs, &ys, 1e-3).unwrap();
        assert!(
            (report.heldout_accuracy - 0.5).abs() <= 0.05,
            "holdout accuracy {}",
            report.heldout_accuracy
        );
    }

    #[test]
    fn single_class_is_data_error() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            probe_fit(&xs, &[1, 1], 1e-3),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn scale_invariant_predictions_without_regularization() {
        // non-separable data keeps the unregularized optimum finite; with
        // l2 = 0 the refit on scaled features must predict identically
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 300;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let z: f64 = rng.gen_range(-2.0..2.0);
            let noise: f64 = rng.gen_range(-1.5..1.5);
            xs.push(vec![z, rng.gen_range(-1.0..1.0)]);
            ys.push(u8::from(z + noise > 0.0));
        }
        let (m1, _) = probe_fit(&xs, &ys, 0.0).unwrap();
        let scaled: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| x.iter().map(|v| v * 2.0).collect())
            .collect();
        let (m2, _) = probe_fit(&scaled, &ys, 0.0).unwrap();
        for (x, xs2) in xs.iter().zip(&scaled) {
            assert_eq!(m1.predict(x), m2.predict(xs2));
        }
    }
}
