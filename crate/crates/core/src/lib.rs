//! Word-level timestamps from the cross-attention maps of sequence-to-sequence
//! speech recognizers.
//!
//! The pipeline scores every decoder cross-attention head, keeps the most
//! alignment-like ones, averages them, and runs a column-norm-sharpened DTW
//! from token rows to encoder frames. Token spans are then grouped into word
//! segments. The crate also ships a strict boundary-F1 evaluator, oracle-head
//! analysis, and a synthetic data generator.
//!
//! With the default `parallel` feature, per-head and per-utterance work runs
//! on rayon; disable it for a purely sequential build.

pub mod attn_io;
pub mod dtw_align;
pub mod error;
pub mod eval;
pub mod head_filter;
pub mod map;
pub mod par;
pub mod synth;
pub mod tokenization;

pub use attn_io::{AttentionDump, TokenRecord, WordSegment};
pub use dtw_align::{align_utterance, align_with_heads, AlignmentPath, CostMatrix};
pub use error::{Error, Result};
pub use eval::{boundary_f1, EvalReport};
pub use head_filter::{Criterion, HeadId, SelectionStrategy};
pub use map::AttentionMap;
