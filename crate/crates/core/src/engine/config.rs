//! Run configuration. Files are flat `key = value` lines in TOML syntax, so
//! dotted keys such as `clip.eps_low = 0.2` read naturally and strings are
//! quoted. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::backend::BackendConfig;
use crate::datamodel::{validate_config, LoopConfig, Violation};
use crate::toypolicy::ToyCorpusSpec;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}` expects {expected}, got `{found}`")]
    BadValue { key: String, expected: &'static str, found: String },
    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewerSource {
    #[default]
    #[serde(rename = "self")]
    SelfReview,
    Oracle,
}

impl ReviewerSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewerSource::SelfReview => "self",
            ReviewerSource::Oracle => "oracle",
        }
    }
}

/// Toy-mode corpus and learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub spec: ToyCorpusSpec,
    pub corpus_size: usize,
    pub lr_constructor: f64,
    pub lr_solver: f64,
    pub lr_fcp: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { spec: ToyCorpusSpec::default(), corpus_size: 16, lr_constructor: 16.0, lr_solver: 16.0, lr_fcp: 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub loop_cfg: LoopConfig,
    pub toy: ToyConfig,
    pub backend: BackendConfig,
    pub reviewer_source: ReviewerSource,
    pub templates_dir: Option<PathBuf>,
}

fn bad(key: &str, expected: &'static str, v: &Value) -> ConfigError {
    ConfigError::BadValue { key: key.to_string(), expected, found: v.to_string() }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number", v)),
    }
}

fn as_i64(key: &str, v: &Value) -> Result<i64, ConfigError> {
    v.as_integer().ok_or_else(|| bad(key, "an integer", v))
}

fn as_u64(key: &str, v: &Value) -> Result<u64, ConfigError> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as u64),
        _ => Err(bad(key, "a non-negative integer", v)),
    }
}

fn as_u32(key: &str, v: &Value) -> Result<u32, ConfigError> {
    u32::try_from(as_u64(key, v)?).map_err(|_| bad(key, "a 32-bit integer", v))
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| bad(key, "true or false", v))
}

fn as_string(key: &str, v: &Value) -> Result<String, ConfigError> {
    v.as_str().map(str::to_string).ok_or_else(|| bad(key, "a quoted string", v))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) -> Result<(), ConfigError> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            Value::Array(_) => return Err(bad(&key, "a scalar", v)),
            _ => {
                out.insert(key, v.clone());
            }
        }
    }
    Ok(())
}

/// Parses config text into dotted keys and scalar values.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, Value>, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut out = BTreeMap::new();
    flatten("", &table, &mut out)?;
    Ok(out)
}

/// Parses a single value as written on the right of `=`. Bare words that are
/// not TOML literals are taken as strings.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()))
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

pub fn set_backend_key(cfg: &mut BackendConfig, key: &str, v: &Value) -> Result<(), ConfigError> {
    match key {
        "base_url" => cfg.base_url = as_string(key, v)?,
        "model_name" => cfg.model_name = as_string(key, v)?,
        "api_key_env" => cfg.api_key_env = as_string(key, v)?,
        "max_in_flight" => cfg.max_in_flight = as_u32(key, v)?,
        "timeout_seconds" => cfg.timeout_seconds = as_f64(key, v)?,
        "retry_max" => cfg.retry_max = as_u32(key, v)?,
        "retry_backoff_base_seconds" => cfg.retry_backoff_base_seconds = as_f64(key, v)?,
        "native_n" => cfg.native_n = as_bool(key, v)?,
        "request_logprobs" => cfg.request_logprobs = as_bool(key, v)?,
        "max_tokens.constructor" => cfg.max_tokens.constructor = as_u32(key, v)?,
        "max_tokens.solver" => cfg.max_tokens.solver = as_u32(key, v)?,
        "max_tokens.reviewer" => cfg.max_tokens.reviewer = as_u32(key, v)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

pub fn backend_entries(cfg: &BackendConfig) -> Vec<(&'static str, Value)> {
    vec![
        ("base_url", cfg.base_url.clone().into()),
        ("model_name", cfg.model_name.clone().into()),
        ("api_key_env", cfg.api_key_env.clone().into()),
        ("max_in_flight", i64::from(cfg.max_in_flight).into()),
        ("timeout_seconds", cfg.timeout_seconds.into()),
        ("retry_max", i64::from(cfg.retry_max).into()),
        ("retry_backoff_base_seconds", cfg.retry_backoff_base_seconds.into()),
        ("native_n", cfg.native_n.into()),
        ("request_logprobs", cfg.request_logprobs.into()),
        ("max_tokens.constructor", i64::from(cfg.max_tokens.constructor).into()),
        ("max_tokens.solver", i64::from(cfg.max_tokens.solver).into()),
        ("max_tokens.reviewer", i64::from(cfg.max_tokens.reviewer).into()),
    ]
}

/// Reads a standalone backend file. Keys may be bare or carry a `backend.`
/// prefix.
pub fn load_backend(path: &Path) -> Result<BackendConfig, ConfigError> {
    let mut cfg = BackendConfig::default();
    for (k, v) in parse_entries(&read(path)?)? {
        let key = k.strip_prefix("backend.").unwrap_or(&k);
        set_backend_key(&mut cfg, key, &v)?;
    }
    let violations = cfg.validate();
    if !violations.is_empty() {
        return Err(ConfigError::Invalid(violations));
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_entries(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg = Self::from_text(&read(path)?)?;
        let violations = cfg.validate();
        if !violations.is_empty() {
            return Err(ConfigError::Invalid(violations));
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        let l = &mut self.loop_cfg;
        let t = &mut self.toy;
        match key {
            "M" => l.m = as_u32(key, v)?,
            "N" => l.n = as_u32(key, v)?,
            "temperature" => l.temperature = as_f64(key, v)?,
            "clip.eps_low" => l.eps_clip_low = as_f64(key, v)?,
            "clip.eps_high" => l.eps_clip_high = as_f64(key, v)?,
            "kl.alpha" => l.alpha_kl = as_f64(key, v)?,
            "kl.beta" => l.beta_kl = as_f64(key, v)?,
            "lambda1.long" => l.lambda1_long = as_f64(key, v)?,
            "lambda1.short" => l.lambda1_short = as_f64(key, v)?,
            "lambda1.threshold_tokens" => l.lambda1_threshold_tokens = as_i64(key, v)?,
            "lambda2" => l.lambda2 = as_f64(key, v)?,
            "warmup_steps" => l.warmup_steps = as_u64(key, v)?,
            "total_steps" => l.total_steps = as_u64(key, v)?,
            "gate_epsilon" => l.gate_epsilon = as_f64(key, v)?,
            "gate.enabled" => l.gate_enabled = as_bool(key, v)?,
            "seed" => l.seed = as_u64(key, v)?,
            "sigma_floor" => l.sigma_floor = as_f64(key, v)?,
            "match.trim_outer" => l.match_policy.trim_outer = as_bool(key, v)?,
            "match.collapse_inner_whitespace" => l.match_policy.collapse_inner_whitespace = as_bool(key, v)?,
            "match.case_sensitive" => l.match_policy.case_sensitive = as_bool(key, v)?,
            "review_samples" => l.review_samples = as_u32(key, v)?,
            "fcp.negative_weight" => l.fcp_negative_weight = as_f64(key, v)?,
            "reviewer_source" => {
                self.reviewer_source = match as_string(key, v)?.as_str() {
                    "self" => ReviewerSource::SelfReview,
                    "oracle" => ReviewerSource::Oracle,
                    _ => return Err(bad(key, "\"self\" or \"oracle\"", v)),
                }
            }
            "templates_dir" => self.templates_dir = Some(PathBuf::from(as_string(key, v)?)),
            "toy.vocab_size" => t.spec.vocab_size = as_u32(key, v)?,
            "toy.chain_length" => t.spec.chain_length = as_u32(key, v)?,
            "toy.modulus" => t.spec.modulus = as_u32(key, v)?,
            "toy.seed" => t.spec.seed = as_u64(key, v)?,
            "toy.corpus_size" => t.corpus_size = as_u64(key, v)? as usize,
            "toy.lr_constructor" => t.lr_constructor = as_f64(key, v)?,
            "toy.lr_solver" => t.lr_solver = as_f64(key, v)?,
            "toy.lr_fcp" => t.lr_fcp = as_f64(key, v)?,
            _ => match key.strip_prefix("backend.") {
                Some(rest) => set_backend_key(&mut self.backend, rest, v)
                    .map_err(|e| match e {
                        ConfigError::UnknownKey(_) => ConfigError::UnknownKey(key.to_string()),
                        other => other,
                    })?,
                None => return Err(ConfigError::UnknownKey(key.to_string())),
            },
        }
        Ok(())
    }

    /// Sets a key from its textual value, as a config line would.
    pub fn set_text(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        self.set(key, &parse_value(raw))
    }

    pub fn entries(&self) -> Vec<(String, Value)> {
        let l = &self.loop_cfg;
        let t = &self.toy;
        let mut out: Vec<(String, Value)> = vec![
            ("M".into(), i64::from(l.m).into()),
            ("N".into(), i64::from(l.n).into()),
            ("temperature".into(), l.temperature.into()),
            ("clip.eps_low".into(), l.eps_clip_low.into()),
            ("clip.eps_high".into(), l.eps_clip_high.into()),
            ("kl.alpha".into(), l.alpha_kl.into()),
            ("kl.beta".into(), l.beta_kl.into()),
            ("lambda1.long".into(), l.lambda1_long.into()),
            ("lambda1.short".into(), l.lambda1_short.into()),
            ("lambda1.threshold_tokens".into(), l.lambda1_threshold_tokens.into()),
            ("lambda2".into(), l.lambda2.into()),
            ("warmup_steps".into(), (l.warmup_steps as i64).into()),
            ("total_steps".into(), (l.total_steps as i64).into()),
            ("gate_epsilon".into(), l.gate_epsilon.into()),
            ("gate.enabled".into(), l.gate_enabled.into()),
            ("seed".into(), (l.seed as i64).into()),
            ("sigma_floor".into(), l.sigma_floor.into()),
            ("match.trim_outer".into(), l.match_policy.trim_outer.into()),
            ("match.collapse_inner_whitespace".into(), l.match_policy.collapse_inner_whitespace.into()),
            ("match.case_sensitive".into(), l.match_policy.case_sensitive.into()),
            ("review_samples".into(), i64::from(l.review_samples).into()),
            ("fcp.negative_weight".into(), l.fcp_negative_weight.into()),
            ("reviewer_source".into(), self.reviewer_source.as_str().into()),
            ("toy.vocab_size".into(), i64::from(t.spec.vocab_size).into()),
            ("toy.chain_length".into(), i64::from(t.spec.chain_length).into()),
            ("toy.modulus".into(), i64::from(t.spec.modulus).into()),
            ("toy.seed".into(), (t.spec.seed as i64).into()),
            ("toy.corpus_size".into(), (t.corpus_size as i64).into()),
            ("toy.lr_constructor".into(), t.lr_constructor.into()),
            ("toy.lr_solver".into(), t.lr_solver.into()),
            ("toy.lr_fcp".into(), t.lr_fcp.into()),
        ];
        if let Some(dir) = &self.templates_dir {
            out.push(("templates_dir".into(), dir.display().to_string().into()));
        }
        out.extend(backend_entries(&self.backend).into_iter().map(|(k, v)| (format!("backend.{k}"), v)));
        out
    }

    /// Renders every key; parsing the result gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = validate_config(&self.loop_cfg);
        for v in self.toy.spec.validate() {
            out.push(Violation::new(format!("toy.{}", v.field), v.message));
        }
        if self.toy.corpus_size < 1 {
            out.push(Violation::new("toy.corpus_size", "toy.corpus_size must be ≥ 1"));
        }
        for (name, lr) in [
            ("toy.lr_constructor", self.toy.lr_constructor),
            ("toy.lr_solver", self.toy.lr_solver),
            ("toy.lr_fcp", self.toy.lr_fcp),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                out.push(Violation::new(name, format!("{name} must be finite and ≥ 0")));
            }
        }
        for v in self.backend.validate() {
            out.push(Violation::new(format!("backend.{}", v.field), v.message));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_key() {
        let mut cfg = RunConfig::default();
        cfg.loop_cfg.m = 3;
        cfg.loop_cfg.gate_epsilon = 0.25;
        cfg.toy.spec.modulus = 7;
        cfg.backend.base_url = "http://example.test:9".into();
        cfg.reviewer_source = ReviewerSource::Oracle;
        cfg.templates_dir = Some("prompts".into());
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flat_file_with_comments() {
        let text = "# loop\nM = 2\nN = 4\nclip.eps_high = 0.3\ngate.enabled = false\n\n[toy]\nmodulus = 5\nvocab_size = 5\n";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!((cfg.loop_cfg.m, cfg.loop_cfg.n), (2, 4));
        assert_eq!(cfg.loop_cfg.eps_clip_high, 0.3);
        assert!(!cfg.loop_cfg.gate_enabled);
        assert_eq!(cfg.toy.spec.modulus, 5);
    }

    #[test]
    fn rejects_unknown_and_mistyped_keys() {
        assert!(matches!(RunConfig::from_text("bogus = 1"), Err(ConfigError::UnknownKey(k)) if k == "bogus"));
        assert!(matches!(
            RunConfig::from_text("backend.nope = 1"),
            Err(ConfigError::UnknownKey(k)) if k == "backend.nope"
        ));
        assert!(matches!(RunConfig::from_text("M = \"eight\""), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_text("M = -1"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_text("M = "), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn validation_names_fields() {
        let cfg = RunConfig::from_text("M = 0\ntoy.modulus = 40").unwrap();
        let msgs: Vec<String> = cfg.validate().iter().map(|v| v.to_string()).collect();
        assert!(msgs.iter().any(|m| m.contains("M must be ≥ 1")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("toy.modulus")), "{msgs:?}");
    }

    #[test]
    fn set_text_values() {
        let mut cfg = RunConfig::default();
        cfg.set_text("temperature", "0.7").unwrap();
        cfg.set_text("backend.model_name", "tiny").unwrap();
        cfg.set_text("backend.base_url", "\"http://h:1\"").unwrap();
        assert_eq!(cfg.loop_cfg.temperature, 0.7);
        assert_eq!(cfg.backend.model_name, "tiny");
        assert_eq!(cfg.backend.base_url, "http://h:1");
    }
}
