//! The configurator's memory layers.
//!
//! * declarative: [`KnowledgeStore`] facts and the [`UserProfile`]
//! * procedural: the [`ToolRepository`] with dense retrieval
//! * working: [`ConfigurationContext`] assembled per subtask

pub mod embed;
mod knowledge;
mod repository;
mod seed;
mod working;

use thiserror::Error;

pub use crate::env::{snapshot_environment, EnvSnapshot};
pub use embed::{cosine, EmbedError, Embedder, HashEmbedder, HttpEmbedder};
pub use knowledge::{KnowledgeEntry, KnowledgeError, KnowledgeSource, KnowledgeStore, UserProfile};
pub use repository::{
    format_timestamp, is_valid_tool_name, rank, sanitize_tool_name, RepositoryError, ScoredTool, ToolBody, ToolKind,
    ToolRecord, ToolRepository, TOOLS_DIR,
};
pub use seed::{seed_api_tools, seed_script_tools, SEED_SCRIPT_TOOLS};
pub use working::{
    assemble, AssembleError, ConfigurationContext, ConfiguratorSettings, Environment, Memory, PlanningContext,
    DEFAULT_THRESHOLD, DEFAULT_TOP_K, KEY_SYSTEM_LANGUAGE, KEY_SYSTEM_VERSION,
};

/// Score a tool must beat to be kept.
pub const PERSISTENCE_CUTOFF: i64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("score {0} is outside 0..=10")]
pub struct OutOfRange(pub i64);

/// Whether a freshly generated tool with this critic score is kept.
/// Strictly greater than 8: a score of exactly 8 is discarded.
pub fn gate_persistence(score: i64) -> Result<bool, OutOfRange> {
    if !(0..=10).contains(&score) {
        return Err(OutOfRange(score));
    }
    Ok(score > PERSISTENCE_CUTOFF)
}
