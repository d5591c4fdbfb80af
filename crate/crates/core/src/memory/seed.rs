//! Built-in tools a fresh repository can be seeded with.

use crate::runtime::ApiEndpoint;

use super::repository::{RepositoryError, ToolRecord, ToolRepository};

/// Seed score: hand-written tools are treated as fully general.
const SEED_SCORE: u8 = 10;

/// `(name, description, source)` of the bundled script tools.
pub const SEED_SCRIPT_TOOLS: [(&str, &str, &str); 4] = [
    (
        "create_folder",
        "Create a folder under the given working directory.",
        include_str!("../../assets/seed_tools/create_folder.py"),
    ),
    (
        "read_text_file",
        "Read the text content of a file.",
        include_str!("../../assets/seed_tools/read_text_file.py"),
    ),
    (
        "read_json_file",
        "Read and parse the content of a JSON file.",
        include_str!("../../assets/seed_tools/read_json_file.py"),
    ),
    (
        "read_csv_file",
        "Read the rows of a CSV file as a list of records.",
        include_str!("../../assets/seed_tools/read_csv_file.py"),
    ),
];

/// Stores the bundled script tools, skipping names already present.
/// Returns the names actually added.
pub fn seed_script_tools(repo: &ToolRepository) -> Result<Vec<String>, RepositoryError> {
    let mut added = Vec::new();
    for (name, description, source) in SEED_SCRIPT_TOOLS {
        if repo.get(name).is_some() {
            continue;
        }
        repo.store(ToolRecord::script(name, description, source, SEED_SCORE, repo.embedder())?)?;
        added.push(name.to_string());
    }
    Ok(added)
}

/// Registers tool services rooted at `base_url`: web search, page loading,
/// speech transcription and image captioning.
pub fn seed_api_tools(repo: &ToolRepository, base_url: &str) -> Result<Vec<String>, RepositoryError> {
    let base = base_url.trim_end_matches('/');
    let services = [
        ("bing_search", "Search the web and return the top result snippets.", "/tools/bing/searchv2", r#"{"query": str, "top_k": int}"#),
        ("bing_load_page", "Load a web page and return its text content.", "/tools/bing/load_pagev2", r#"{"url": str, "query": str}"#),
        ("audio2text", "Transcribe speech in an audio file to text.", "/tools/audio2text", r#"{"file_path": str}"#),
        ("image_caption", "Describe the content of an image.", "/tools/image_caption", r#"{"file_path": str}"#),
    ];
    let mut added = Vec::new();
    for (name, description, path, schema) in services {
        if repo.get(name).is_some() {
            continue;
        }
        let endpoint = ApiEndpoint::post(format!("{base}{path}"), schema);
        repo.store(ToolRecord::api(name, description, endpoint, SEED_SCORE, repo.embedder())?)?;
        added.push(name.to_string());
    }
    Ok(added)
}
