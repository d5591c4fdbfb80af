//! Task automation agent: plans a request as a dependency graph of
//! subtasks, configures each from layered memory, runs it in a sandboxed
//! runtime, critiques the outcome and refines until it passes. Tools that
//! pass the critic are kept for reuse.

pub mod actor;
pub mod agent;
pub mod env;
pub mod http;
pub mod learning;
pub mod llm;
pub mod manifest;
pub mod memory;
pub mod planner;
pub mod runtime;
pub mod taskgraph;
pub mod template;

pub use agent::{Agent, AgentConfig, AgentError, AgentEvent, RunReport};
pub use taskgraph::{Subtask, SubtaskKind, SubtaskStatus, TaskGraph};
