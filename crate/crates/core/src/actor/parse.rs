//! Output contracts of the generator, executor and critic prompts.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ActorError;
use crate::llm::{extract_code_block, extract_json, extract_tagged, ExtractError};

pub const INVOKE_TAG: &str = "invoke";
pub const FAKE_PARAMS_TAG: &str = "fake-params";

/// A tool produced by the generator or refiner, plus the call to run it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedTool {
    pub source: String,
    pub invocation: String,
    /// Parameters the model admitted to inventing. Empty for a literal "None".
    pub fake_params: Vec<String>,
}

/// Invocation statement and fake-parameter list without a code block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub invocation: String,
    pub fake_params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueVerdict {
    pub reasoning: String,
    pub judge: bool,
    pub score: u8,
    /// Correction hints for the refiner; the reasoning when judge is false.
    pub advice: Option<String>,
    /// Set only when judge is false and the critic asked for a new plan.
    pub wants_replan: bool,
}

impl CritiqueVerdict {
    /// A failing verdict that did not come from the critic.
    pub fn synthesized(reasoning: impl Into<String>, wants_replan: bool) -> Self {
        let reasoning = reasoning.into();
        Self { advice: Some(reasoning.clone()), reasoning, judge: false, score: 0, wants_replan }
    }
}

/// Comma-separated names; "None" (any case) or blank means no fake params.
pub fn parse_fake_params(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty() && !p.eq_ignore_ascii_case("none"))
        .map(str::to_string)
        .collect()
}

fn tag_error(tag: &str, e: ExtractError) -> ActorError {
    match e {
        ExtractError::TagUnclosed(_) => ActorError::UnclosedTag(tag.to_string()),
        _ if tag == INVOKE_TAG => ActorError::MissingInvokeTag,
        other => ActorError::GenerationFailed(other.to_string()),
    }
}

/// Reads the invoke tag (required, non-empty) and the fake-params tag
/// (optional; absent means none).
pub fn parse_invocation(text: &str) -> Result<Invocation, ActorError> {
    let invocation = extract_tagged(text, INVOKE_TAG).map_err(|e| tag_error(INVOKE_TAG, e))?;
    if invocation.is_empty() {
        return Err(ActorError::MissingInvokeTag);
    }
    let fake_params = match extract_tagged(text, FAKE_PARAMS_TAG) {
        Ok(raw) => parse_fake_params(&raw),
        Err(ExtractError::TagMissing(_)) => Vec::new(),
        Err(e) => return Err(tag_error(FAKE_PARAMS_TAG, e)),
    };
    Ok(Invocation { invocation, fake_params })
}

/// A generator or refiner reply: one code block plus the tags.
pub fn parse_generated_tool(text: &str) -> Result<GeneratedTool, ActorError> {
    let source = extract_code_block(text).map_err(|_| ActorError::MissingCodeBlock)?;
    if source.trim().is_empty() {
        return Err(ActorError::MissingCodeBlock);
    }
    // Tags may sit after the fence; search the text outside it first so a
    // tag mentioned inside the code does not win.
    let outside = strip_fenced(text);
    let inv = parse_invocation(&outside).or_else(|_| parse_invocation(text))?;
    Ok(GeneratedTool { source, invocation: inv.invocation, fake_params: inv.fake_params })
}

fn strip_fenced(text: &str) -> String {
    let mut out = String::new();
    let mut inside = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
            continue;
        }
        if !inside {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Strict critic reply: a JSON object with string `reasoning`, boolean
/// `judge` and integer `score` in 0..=10, plus an optional boolean `replan`.
pub fn parse_verdict(text: &str) -> Result<CritiqueVerdict, ActorError> {
    let v = extract_json(text).map_err(|e| ActorError::SchemaViolation(format!("critic reply: {e}")))?;
    let field = |k: &str| v.get(k).ok_or_else(|| ActorError::SchemaViolation(format!("missing key `{k}`")));
    let reasoning = field("reasoning")?
        .as_str()
        .ok_or_else(|| ActorError::SchemaViolation("`reasoning` must be a string".into()))?
        .to_string();
    let judge = field("judge")?.as_bool().ok_or_else(|| ActorError::SchemaViolation("`judge` must be a boolean".into()))?;
    let score = field("score")?
        .as_i64()
        .filter(|s| (0..=10).contains(s))
        .ok_or_else(|| ActorError::SchemaViolation("`score` must be an integer in 0..=10".into()))?;
    let replan = match v.get("replan") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(ActorError::SchemaViolation("`replan` must be a boolean".into())),
    };
    Ok(CritiqueVerdict {
        advice: (!judge).then(|| reasoning.clone()),
        reasoning,
        judge,
        score: score as u8,
        wants_replan: replan && !judge,
    })
}

/// The `self._description = "..."` literal of a generated tool, if any.
pub fn tool_description(source: &str) -> Option<String> {
    let at = source.find("self._description")?;
    let rest = source[at + "self._description".len()..].trim_start().strip_prefix('=')?.trim_start();
    let quote = rest.chars().next().filter(|c| *c == '"' || *c == '\'')?;
    let body = &rest[1..];
    let end = body.find(quote)?;
    let text = body[..end].trim();
    (!text.is_empty()).then(|| text.to_string())
}
