//! Block partitioning, relevance labels, the CNN skim predictor, and the
//! joint-objective losses.

mod blocks;
mod loss;
mod predictor;

pub use blocks::{
    add_evidence_labels, block_labels, partition_blocks, BlockKind, BlockLabels, BlockSpec,
};
pub use loss::{blockskim_loss, compute_beta, total_loss};
pub use predictor::{
    cnn_predict, cnn_predict_blocks, diagonal_slices, fc_input_len, spatial_after_pools, BnStats,
    BoundPredictor, PredictorConfig, PredictorMode, PredictorOutput,
};
