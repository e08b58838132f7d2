//! Training reports: step log (CSV) and run summary (JSON).

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub qa: f64,
    /// Per-layer `beta*pos + neg` relevance loss.
    pub skim: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    /// Per-layer block classifier accuracy on the dev set.
    pub predictor_acc: Vec<f64>,
    /// Per-layer block classifier F1 on the dev set.
    pub predictor_f1: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub beta: f64,
    /// Examples whose QA loss was skipped because skim-training dropped
    /// the answer block mid-stack.
    pub qa_skipped_examples: usize,
}

impl TrainReport {
    /// Step log as CSV: `step,total,qa,skim_0..skim_{L-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let layers = self.steps.first().map_or(0, |s| s.skim.len());
        let mut header = String::from("step,total,qa");
        for l in 0..layers {
            header.push_str(&format!(",skim_{l}"));
        }
        writeln!(w, "{header}")?;
        for s in &self.steps {
            let mut line = format!("{},{},{}", s.step, s.total, s.qa);
            for v in &s.skim {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn final_f1(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.f1)
    }

    pub fn final_em(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.em)
    }
}
