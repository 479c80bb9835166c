//! Offline preference-data construction for diversity-recovering DPO
//! training: candidate sampling from base and instruct models, instruct-style
//! rewriting of base drafts, safety/quality/min-samples filtering, marginal
//! diversity scoring over response embeddings, and quality-matched pair
//! construction, together with baseline pairing strategies, a numeric lab
//! for the training objective, checkpoint-selection gating, and a bootstrap
//! evaluation kit. Every external model role has a deterministic in-process
//! mock, so the full pipeline runs end to end without any serving stack.

pub mod config;
pub mod diversity;
pub mod dpolab;
pub mod evalkit;
pub mod filters;
pub mod genclient;
pub mod jsonl;
pub mod manifest;
pub mod pairing;
pub mod pipeline;
pub mod types;

pub use config::{ConfigOverrides, PipelineConfig};
pub use manifest::RunManifest;
pub use types::{PreferencePair, PromptEntry, PromptPool, ResponseRecord};
