//! `{placeholder}` prompt templates.
//!
//! Only `{identifier}` sequences (ASCII letter or underscore first, then
//! letters, digits, underscores) are placeholders, so JSON examples inside a
//! template pass through untouched. Substituted values are never rescanned.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("no value for placeholder `{{{0}}}`")]
    MissingPlaceholder(String),
    #[error("reading template {path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Byte span and name of each placeholder in `template`, in order.
fn scan(template: &str) -> Vec<(usize, usize, &str)> {
    let bytes = template.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            let ident_ok = j > start && !bytes[start].is_ascii_digit();
            if ident_ok && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, j + 1, &template[start..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Placeholder names in order of appearance (duplicates kept).
pub fn placeholders(template: &str) -> Vec<String> {
    scan(template).into_iter().map(|(_, _, n)| n.to_string()).collect()
}

/// Fills every placeholder; any name without a value is an error.
pub fn render(template: &str, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for (start, end, name) in scan(template) {
        let value = values.get(name).ok_or_else(|| TemplateError::MissingPlaceholder(name.to_string()))?;
        out.push_str(&template[last..start]);
        out.push_str(value);
        last = end;
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// Every prompt the agent renders. Defaults are compiled in; a directory
/// of `<name>.txt` files overrides any subset of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub planner: String,
    pub tool_generator: String,
    pub executor: String,
    pub critic: String,
    pub refiner: String,
    pub qa: String,
    pub final_answer: String,
    pub replan: String,
    pub curriculum: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            planner: include_str!("../templates/planner.txt").to_string(),
            tool_generator: include_str!("../templates/tool_generator.txt").to_string(),
            executor: include_str!("../templates/executor.txt").to_string(),
            critic: include_str!("../templates/critic.txt").to_string(),
            refiner: include_str!("../templates/refiner.txt").to_string(),
            qa: include_str!("../templates/qa.txt").to_string(),
            final_answer: include_str!("../templates/final_answer.txt").to_string(),
            replan: include_str!("../templates/replan.txt").to_string(),
            curriculum: include_str!("../templates/curriculum.txt").to_string(),
        }
    }
}

impl TemplateSet {
    pub const NAMES: [&'static str; 9] = [
        "planner",
        "tool_generator",
        "executor",
        "critic",
        "refiner",
        "qa",
        "final_answer",
        "replan",
        "curriculum",
    ];

    /// Defaults overridden by whichever `<name>.txt` files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        for name in Self::NAMES {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })?;
            *set.slot_mut(name) = text;
        }
        Ok(set)
    }

    fn slot_mut(&mut self, name: &str) -> &mut String {
        match name {
            "planner" => &mut self.planner,
            "tool_generator" => &mut self.tool_generator,
            "executor" => &mut self.executor,
            "critic" => &mut self.critic,
            "refiner" => &mut self.refiner,
            "qa" => &mut self.qa,
            "final_answer" => &mut self.final_answer,
            "replan" => &mut self.replan,
            "curriculum" => &mut self.curriculum,
            other => unreachable!("unknown template {other}"),
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        Some(match name {
            "planner" => &self.planner,
            "tool_generator" => &self.tool_generator,
            "executor" => &self.executor,
            "critic" => &self.critic,
            "refiner" => &self.refiner,
            "qa" => &self.qa,
            "final_answer" => &self.final_answer,
            "replan" => &self.replan,
            "curriculum" => &self.curriculum,
            _ => return None,
        })
    }
}
