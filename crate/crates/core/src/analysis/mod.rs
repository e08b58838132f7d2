//! Attention-distribution profiling, block-attention probing, and trace
//! files.

mod block_attn;
mod distribution;
mod probe;
mod trace;

pub use block_attn::{block_attention, probe_features, FEATURES_PER_HEAD};
pub use distribution::{
    profile_distribution, AttnDistribution, Histogram, LayerDistribution, HISTOGRAM_BINS,
};
pub use probe::{probe_fit, ProbeModel, ProbeReport, GRAD_TOL, MAX_ITERS};
pub use trace::{read_trace, write_trace, TraceExample, TraceFile, TRACE_MAGIC};
