//! Raw-text corpus loading.
//!
//! * a directory: one document per regular file, in file-name order;
//! * a `.jsonl` file: one document per line, either `{"text": ...}` or a
//!   question/answer pair joined as `question\nanswer`;
//! * any other file: one document per non-empty line.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::datamodel::Document;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    BadLine { path: PathBuf, line: usize, message: String },
    #[error("corpus {0} contains no documents")]
    Empty(PathBuf),
}

#[derive(Deserialize)]
struct JsonDoc {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    answer: Option<String>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "doc".into())
}

fn doc(id: String, text: String, path: &Path) -> Document {
    Document { id, text, source: path.display().to_string(), seed: None }
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let docs = if path.is_dir() {
        load_dir(path)?
    } else if path.extension().is_some_and(|e| e == "jsonl") {
        load_jsonl(path)?
    } else {
        load_lines(path)?
    };
    if docs.is_empty() {
        return Err(CorpusError::Empty(path.to_path_buf()));
    }
    Ok(docs)
}

fn load_dir(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(io(&f))?;
        let text = text.trim();
        if !text.is_empty() {
            out.push(doc(stem(&f), text.to_string(), &f));
        }
    }
    Ok(out)
}

fn load_lines(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let prefix = stem(path);
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| doc(format!("{prefix}-{i:05}"), l.to_string(), path))
        .collect())
}

fn load_jsonl(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let prefix = stem(path);
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| CorpusError::BadLine { path: path.to_path_buf(), line: lineno + 1, message };
        let j: JsonDoc = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let body = match (j.text, j.question, j.answer) {
            (Some(t), _, _) => t,
            (None, Some(q), Some(a)) => format!("{}\n{}", q.trim(), a.trim()),
            _ => return Err(bad("expected `text` or both `question` and `answer`".into())),
        };
        let id = j.id.unwrap_or_else(|| format!("{prefix}-{:05}", out.len()));
        out.push(doc(id, body, path));
    }
    Ok(out)
}
