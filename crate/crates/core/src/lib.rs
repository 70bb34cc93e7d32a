//! Block-sparse attention rectified by pooled (implicit) full attention.
//!
//! The pipeline pools queries and keys per block, estimates the full
//! attention distribution over key blocks from the pooled interactions,
//! selects the key blocks each query block attends to, runs an online-softmax
//! block-sparse kernel, and then corrects the sparse output: retained blocks
//! are rescaled by the share of attention they hold, and excluded blocks are
//! compensated with pooled values where the estimated gain beats the pooling
//! error. Double-precision brute-force oracles back every stage.

pub mod error;
pub mod ipar;
pub mod kernel;
pub mod masks;
pub mod metrics;
pub mod morton;
pub mod oracle;
pub mod problem;
pub mod rectify;
pub mod rsat;
pub mod tensor;

pub use error::{Error, Result};
pub use ipar::{implicit_full_attention, ImplicitAttention};
pub use kernel::{block_sparse_attention, dense_attention, text_full_attention, AttentionOutput, KernelStats};
pub use masks::{build_sparse_mask, BlockMask, CompensationMask, GainError, SparseMask, SparsityConfig};
pub use metrics::{
    cosine_similarity, normalized_l1, sparsity_and_flops, AlignmentReport, DenominatorReport, FlopReport,
};
pub use oracle::{full_attention_oracle, masked_attention_oracle};
pub use problem::{block_pool, partition, AttentionProblem, BlockGrid, PooledSet};
pub use rectify::{rectified_attention_pipeline, run_pipeline, PipelineResult, RectificationFactors, RectifyMode};
pub use tensor::{Matrix, Precision};
