//! Role prompt templates and the tag protocol each role's output follows.
//!
//! Templates use `{{NAME}}` placeholders. Outputs are parsed by pulling the
//! content of `<Tag>...</Tag>` sections; matching is exact and case-sensitive.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Constructor,
    Solver,
    Reviewer,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Constructor, Role::Solver, Role::Reviewer];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Constructor => "constructor",
            Role::Solver => "solver",
            Role::Reviewer => "reviewer",
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            Role::Constructor => &["RAW_DOCUMENT"],
            Role::Solver => &["CONSTRUCTED_TASK"],
            Role::Reviewer => &["CONSTRUCTED_TASK", "SOLVER_OUTPUT", "HIDDEN_TRUTH"],
        }
    }

    pub fn required_tags(self) -> &'static [Tag] {
        match self {
            Role::Constructor => &[Tag::Thought, Tag::Task, Tag::HiddenTruth],
            Role::Solver => &[Tag::Reasoning, Tag::Answer],
            Role::Reviewer => &[Tag::Analysis, Tag::Critique, Tag::Score],
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            Role::Constructor => include_str!("../templates/constructor.txt"),
            Role::Solver => include_str!("../templates/solver.txt"),
            Role::Reviewer => include_str!("../templates/reviewer.txt"),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Thought,
    Task,
    HiddenTruth,
    Reasoning,
    Answer,
    Analysis,
    Critique,
    Score,
}

impl Tag {
    pub fn name(self) -> &'static str {
        match self {
            Tag::Thought => "Thought",
            Tag::Task => "Task",
            Tag::HiddenTruth => "Hidden_Truth",
            Tag::Reasoning => "Reasoning",
            Tag::Answer => "Answer",
            Tag::Analysis => "Analysis",
            Tag::Critique => "Critique",
            Tag::Score => "Score",
        }
    }

    pub fn open(self) -> String {
        format!("<{}>", self.name())
    }

    pub fn close(self) -> String {
        format!("</{}>", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("{0} missing")]
    MissingBinding(String),
    #[error("unknown placeholder {{{{{0}}}}} in {1} template")]
    UnknownPlaceholder(String, Role),
    #[error("{1} template lacks required placeholder {{{{{0}}}}}")]
    MissingPlaceholder(String, Role),
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role: Role,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(role: Role, body: impl Into<String>) -> Result<Self, PromptError> {
        let t = Self { role, body: body.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn default_for(role: Role) -> Self {
        Self { role, body: role.default_body().to_string() }
    }

    pub fn from_file(role: Role, path: &Path) -> Result<Self, PromptError> {
        let body = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(role, body)
    }

    /// Every declared placeholder must be present and nothing else may be.
    pub fn validate(&self) -> Result<(), PromptError> {
        let found = scan_placeholders(&self.body);
        for (_, _, name) in &found {
            if !self.role.placeholders().contains(&name.as_str()) {
                return Err(PromptError::UnknownPlaceholder(name.clone(), self.role));
            }
        }
        for p in self.role.placeholders() {
            if !found.iter().any(|(_, _, n)| n == p) {
                return Err(PromptError::MissingPlaceholder(p.to_string(), self.role));
            }
        }
        Ok(())
    }

    /// Substitutes every `{{NAME}}`. Bound text is inserted verbatim and never
    /// rescanned.
    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
        let found = scan_placeholders(&self.body);
        for (_, _, name) in &found {
            if !self.role.placeholders().contains(&name.as_str()) {
                return Err(PromptError::UnknownPlaceholder(name.clone(), self.role));
            }
        }
        for p in self.role.placeholders() {
            if !bindings.contains_key(p) {
                return Err(PromptError::MissingBinding(p.to_string()));
            }
        }
        let mut out = String::with_capacity(self.body.len());
        let mut cursor = 0;
        for (start, end, name) in found {
            out.push_str(&self.body[cursor..start]);
            out.push_str(bindings[name.as_str()]);
            cursor = end;
        }
        out.push_str(&self.body[cursor..]);
        Ok(out)
    }
}

/// `(start, end, name)` of each `{{NAME}}` occurrence, names being
/// `[A-Z0-9_]+`.
fn scan_placeholders(body: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = body[from..].find("{{") {
        let start = from + rel;
        let Some(close_rel) = body[start + 2..].find("}}") else { break };
        let name = &body[start + 2..start + 2 + close_rel];
        if !name.is_empty() && name.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_') {
            let end = start + 2 + close_rel + 2;
            out.push((start, end, name.to_string()));
            from = end;
        } else {
            from = start + 2;
        }
    }
    out
}

/// The three role templates used by a run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub constructor: PromptTemplate,
    pub solver: PromptTemplate,
    pub reviewer: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            constructor: PromptTemplate::default_for(Role::Constructor),
            solver: PromptTemplate::default_for(Role::Solver),
            reviewer: PromptTemplate::default_for(Role::Reviewer),
        }
    }
}

impl TemplateSet {
    /// Loads `constructor.txt`, `solver.txt` and `reviewer.txt` from `dir`,
    /// falling back to the shipped default for any file that is absent.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let load = |role: Role| {
            let path = dir.join(format!("{}.txt", role.as_str()));
            if path.exists() {
                PromptTemplate::from_file(role, &path)
            } else {
                Ok(PromptTemplate::default_for(role))
            }
        };
        Ok(Self {
            constructor: load(Role::Constructor)?,
            solver: load(Role::Solver)?,
            reviewer: load(Role::Reviewer)?,
        })
    }

    pub fn constructor_prompt(&self, raw_document: &str) -> Result<String, PromptError> {
        self.constructor.render(&BTreeMap::from([("RAW_DOCUMENT", raw_document)]))
    }

    pub fn solver_prompt(&self, task: &str) -> Result<String, PromptError> {
        self.solver.render(&BTreeMap::from([("CONSTRUCTED_TASK", task)]))
    }

    pub fn reviewer_prompt(
        &self,
        task: &str,
        solver_output: &str,
        hidden_truth: &str,
    ) -> Result<String, PromptError> {
        self.reviewer.render(&BTreeMap::from([
            ("CONSTRUCTED_TASK", task),
            ("SOLVER_OUTPUT", solver_output),
            ("HIDDEN_TRUTH", hidden_truth),
        ]))
    }
}

// ---------------------------------------------------------------------------
// Output parsing
// ---------------------------------------------------------------------------

/// Content of the first complete `<tag>...</tag>` pair, trimmed. The pair is
/// the first closing delimiter together with the nearest opening delimiter
/// before it, so the result never contains `<tag>` itself.
pub fn extract_section(text: &str, tag: Tag) -> Option<&str> {
    let open = tag.open();
    let close = tag.close();
    let first_open = text.find(&open)?;
    let close_at = first_open + open.len() + text[first_open + open.len()..].find(&close)?;
    let open_at = text[..close_at].rfind(&open)?;
    Some(text[open_at + open.len()..close_at].trim())
}

/// Names the tag that was missing or malformed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ParseFailure {
    pub tag: &'static str,
    pub reason: Option<String>,
}

impl ParseFailure {
    fn missing(tag: Tag) -> Self {
        Self { tag: tag.name(), reason: None }
    }

    fn bad(tag: Tag, reason: &str) -> Self {
        Self { tag: tag.name(), reason: Some(reason.to_string()) }
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.reason {
            None => f.write_str(self.tag),
            Some(r) => write!(f, "{}: {}", self.tag, r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTask {
    pub thought: String,
    pub query: String,
    pub hidden_truth: String,
    pub valid: bool,
    pub invalid_reason: Option<String>,
}

pub fn parse_constructor(text: &str) -> Result<ParsedTask, ParseFailure> {
    let thought = extract_section(text, Tag::Thought).ok_or(ParseFailure::missing(Tag::Thought))?;
    let query = extract_section(text, Tag::Task).ok_or(ParseFailure::missing(Tag::Task))?;
    let truth =
        extract_section(text, Tag::HiddenTruth).ok_or(ParseFailure::missing(Tag::HiddenTruth))?;
    if query.is_empty() {
        return Err(ParseFailure::bad(Tag::Task, "empty"));
    }
    if truth.is_empty() {
        return Err(ParseFailure::bad(Tag::HiddenTruth, "empty"));
    }
    let leaked = query.contains(truth);
    Ok(ParsedTask {
        thought: thought.to_string(),
        query: query.to_string(),
        hidden_truth: truth.to_string(),
        valid: !leaked,
        invalid_reason: leaked.then(|| "hidden truth appears verbatim in task".to_string()),
    })
}

pub fn parse_solver(text: &str) -> Result<(String, String), ParseFailure> {
    let reasoning =
        extract_section(text, Tag::Reasoning).ok_or(ParseFailure::missing(Tag::Reasoning))?;
    let answer = extract_section(text, Tag::Answer).ok_or(ParseFailure::missing(Tag::Answer))?;
    Ok((reasoning.to_string(), answer.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReview {
    pub analysis: String,
    pub critique: String,
    pub soft_score: f64,
    pub clamped: bool,
}

/// Scores in (1, 2] and [-1, 0) are clamped into [0, 1]; anything further out
/// is rejected.
pub fn parse_reviewer(text: &str) -> Result<ParsedReview, ParseFailure> {
    let analysis =
        extract_section(text, Tag::Analysis).ok_or(ParseFailure::missing(Tag::Analysis))?;
    let critique =
        extract_section(text, Tag::Critique).ok_or(ParseFailure::missing(Tag::Critique))?;
    let raw = extract_section(text, Tag::Score).ok_or(ParseFailure::missing(Tag::Score))?;
    if critique.is_empty() {
        return Err(ParseFailure::bad(Tag::Critique, "empty"));
    }
    let score: f64 = match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => return Err(ParseFailure::bad(Tag::Score, "non-numeric")),
    };
    let (soft_score, clamped) = if (0.0..=1.0).contains(&score) {
        (score, false)
    } else if score > 1.0 && score <= 2.0 {
        (1.0, true)
    } else if (-1.0..0.0).contains(&score) {
        (0.0, true)
    } else {
        return Err(ParseFailure::bad(Tag::Score, "out of range"));
    };
    Ok(ParsedReview { analysis: analysis.to_string(), critique: critique.to_string(), soft_score, clamped })
}

/// Lays out sections in the tag format roles are asked to produce.
pub fn format_sections(sections: &[(Tag, &str)]) -> String {
    let mut out = String::new();
    for (tag, body) in sections {
        out.push_str(&format!("{}\n{}\n{}\n", tag.open(), body, tag.close()));
    }
    out
}
