//! Claim verification against a single evidence document: claims are
//! split into atomic facts, each fact is scored against its best local
//! snippet, facts the verifier is unsure about are corroborated with
//! allowlisted web sources, and a judge aggregates the result.
//!
//! Every model dependency sits behind a provider trait with a
//! deterministic offline implementation, so the full pipeline runs
//! without network access.

pub mod aggregate;
pub mod config;
pub mod corroborate;
pub mod datasets;
pub mod decompose;
pub mod evidence;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod providers;
pub mod types;
pub mod verify;
