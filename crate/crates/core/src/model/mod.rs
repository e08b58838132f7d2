//! Miniature BERT-style encoder with attention capture, QA span head,
//! and the checkpoint container.

mod checkpoint;
mod config;
mod encoder;
mod params;
mod qa;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use encoder::{
    attention_mask_tensor, embed_tokens, encoder_forward, encoder_layer_forward,
    multi_head_attention, BlockSkimModel, BoundEmbedding, BoundLayer, BoundModel, BoundQa,
    Trainability, BN_MOMENTUM, LN_EPS, MASK_PENALTY,
};
pub use params::{ParamEntry, ParamStore};
pub use qa::{qa_head, qa_loss, QaLogits};
