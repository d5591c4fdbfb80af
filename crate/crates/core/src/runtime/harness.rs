//! Result-marker protocol spoken by the script-tool driver.
//!
//! The driver may print anything, then a line consisting solely of
//! [`RESULT_MARKER`], then exactly one line holding a JSON object
//! `{"result": <value>, "error": <null|string>}`. Nothing but blank lines
//! may follow.

use serde_json::Value;

pub const RESULT_MARKER: &str = "##FRIDAY_RESULT##";

/// Python driver written into the sandbox next to each tool.
pub const DRIVER_SOURCE: &str = include_str!("../../assets/harness_driver.py");

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessOutput {
    /// Everything printed before the marker line.
    pub free_text: String,
    pub payload: Value,
}

pub fn parse_harness_output(stdout: &str) -> Result<HarnessOutput, String> {
    let lines: Vec<&str> = stdout.split('\n').collect();
    let marker_at = lines
        .iter()
        .rposition(|l| l.strip_suffix('\r').unwrap_or(l) == RESULT_MARKER)
        .ok_or_else(|| "result marker not found".to_string())?;
    let json_line = lines.get(marker_at + 1).ok_or_else(|| "no result line after marker".to_string())?;
    if let Some(extra) = lines[marker_at + 2..].iter().find(|l| !l.trim().is_empty()) {
        return Err(format!("unexpected output after result line: {extra:?}"));
    }
    let payload: Value =
        serde_json::from_str(json_line.trim_end_matches('\r')).map_err(|e| format!("result line is not JSON: {e}"))?;
    let obj = payload.as_object().ok_or_else(|| "result line is not a JSON object".to_string())?;
    if obj.len() != 2 || !obj.contains_key("result") || !obj.contains_key("error") {
        return Err("result object must have exactly the keys `result` and `error`".into());
    }
    if !(obj["error"].is_null() || obj["error"].is_string()) {
        return Err("`error` must be null or a string".into());
    }
    let free_text = lines[..marker_at].join("\n");
    Ok(HarnessOutput { free_text, payload })
}
