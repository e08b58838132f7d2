//! Synthetic QA generation, SQuAD ingestion, tokenization and batching.

mod batch;
mod example;
mod squad;
mod synth;
mod tokenizer;

pub use batch::{make_batch, make_batch_padded, BatchItem};
pub use example::{ldjson_vocab, read_ldjson, write_ldjson, QAExample};
pub use squad::{build_squad_vocab, load_squad_json, SquadSkips};
pub use synth::{gen_synthetic, synth_vocab, SynthConfig};
pub use tokenizer::{
    detokenize, tokenize, tokenize_with_offsets, Vocab, CLS_ID, CLS_TOKEN, PAD_ID, PAD_TOKEN,
    SEP_ID, SEP_TOKEN, UNK_ID, UNK_TOKEN,
};
