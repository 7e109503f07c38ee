//! LLM-assisted inductive coding over large text corpora.
//!
//! The pipeline segments documents, generates per-segment labels through a
//! chat model, hierarchically clusters the labels into themes with full
//! lineage, reassigns final themes back to segments, and scores outputs
//! against gold annotations with theme-level and segment-level
//! precision/recall.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`corpus`] — document loading and deterministic segmentation
//! - [`gateway`] — chat/embedding access with retries, rate limiting, caching
//! - [`labeling`] — prompt assembly and the `LABEL: [...]` output grammar
//! - [`hierarchy`] — iterative label clustering with lineage traceback
//! - [`incremental`] — sample/merge/drop codebook baseline
//! - [`assignment`] — theme reassignment pass over all segments
//! - [`metrics`] — embedding-matched precision/recall evaluation

#![forbid(unsafe_code)]

pub mod assignment;
pub mod checkpoint;
pub mod corpus;
pub mod gateway;
pub mod hierarchy;
pub mod incremental;
pub mod json_relaxed;
pub mod jsonl;
pub mod labeling;
pub mod metrics;

pub use corpus::{Document, Segment, SegmentationMode, SegmentationPolicy};
pub use gateway::{ChatOptions, ChatRequest, ChatResponse, Gateway, GatewayConfig};
pub use labeling::TaskSpec;
