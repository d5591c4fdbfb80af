//! Pulling structured pieces out of free-form model replies.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no <{0}> tag in response")]
    TagMissing(String),
    #[error("<{0}> tag is never closed")]
    TagUnclosed(String),
    #[error("no JSON object in response")]
    NoJsonFound,
    #[error("malformed JSON: {0}")]
    ParseError(String),
    #[error("no fenced code block in response")]
    NoCodeBlock,
}

/// Content of the first `<tag>...</tag>` pair, whitespace-trimmed.
pub fn extract_tagged(text: &str, tag: &str) -> Result<String, ExtractError> {
    assert!(!tag.is_empty(), "tag name must be non-empty");
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open).ok_or_else(|| ExtractError::TagMissing(tag.to_string()))? + open.len();
    let len = text[start..].find(&close).ok_or_else(|| ExtractError::TagUnclosed(tag.to_string()))?;
    Ok(text[start..start + len].trim().to_string())
}

/// Wraps `inner` in a tag pair; inverse of [`extract_tagged`] for trimmed text.
pub fn wrap_tagged(tag: &str, inner: &str) -> String {
    format!("<{tag}>{inner}</{tag}>")
}

/// Finds a JSON object in `text`.
///
/// Fenced code blocks are searched first, in order. Outside fences the
/// first balanced `{...}` region that parses wins. When balanced regions
/// exist but none parse, the parse error of the first one is returned.
pub fn extract_json(text: &str) -> Result<Value, ExtractError> {
    let mut first_error = None;
    for block in fenced_blocks(text) {
        match first_object(block.body) {
            Ok(v) => return Ok(v),
            Err(ExtractError::ParseError(e)) => {
                first_error.get_or_insert(ExtractError::ParseError(e));
            }
            Err(_) => {}
        }
    }
    match first_object(text) {
        Ok(v) => Ok(v),
        Err(ExtractError::NoJsonFound) => Err(first_error.unwrap_or(ExtractError::NoJsonFound)),
        Err(e) => Err(first_error.unwrap_or(e)),
    }
}

fn first_object(text: &str) -> Result<Value, ExtractError> {
    let mut first_error = None;
    let mut offset = 0;
    while let Some(rel) = text[offset..].find('{') {
        let start = offset + rel;
        match balanced_end(&text[start..]) {
            Some(len) => {
                let candidate = &text[start..start + len];
                match serde_json::from_str::<Value>(candidate) {
                    Ok(v @ Value::Object(_)) => return Ok(v),
                    Ok(_) => {}
                    Err(e) => {
                        first_error.get_or_insert_with(|| ExtractError::ParseError(e.to_string()));
                    }
                }
                offset = start + 1;
            }
            None => {
                first_error.get_or_insert_with(|| ExtractError::ParseError("unbalanced braces".into()));
                offset = start + 1;
            }
        }
    }
    Err(first_error.unwrap_or(ExtractError::NoJsonFound))
}

/// Byte length of the balanced `{...}` region starting at `text[0]`,
/// treating braces inside JSON strings as literal.
fn balanced_end(text: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FencedBlock<'a> {
    pub lang: &'a str,
    pub body: &'a str,
}

/// Triple-backtick blocks in document order. An unterminated final fence
/// is ignored.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let header_end = after.find('\n').unwrap_or(after.len());
        let lang = after[..header_end].trim();
        let body_start = (header_end + 1).min(after.len());
        let Some(close) = after[body_start..].find("```") else { break };
        out.push(FencedBlock { lang, body: &after[body_start..body_start + close] });
        rest = &after[body_start + close + 3..];
    }
    out
}

/// Source code from a reply: the first ```python block, else the first
/// fenced block of any language.
pub fn extract_code_block(text: &str) -> Result<String, ExtractError> {
    let blocks = fenced_blocks(text);
    blocks
        .iter()
        .find(|b| b.lang.eq_ignore_ascii_case("python") || b.lang.eq_ignore_ascii_case("py"))
        .or_else(|| blocks.first())
        .map(|b| b.body.trim_end().to_string())
        .filter(|s| !s.trim().is_empty())
        .ok_or(ExtractError::NoCodeBlock)
}
