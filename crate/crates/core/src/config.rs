//! Pipeline configuration: a TOML file plus dotted command-line overrides.
//!
//! ```toml
//! seed = 7
//! runs = 5
//! in_flight_limit = 4
//!
//! [paths]
//! captions = "captions.jsonl"
//! queries = "queries.jsonl"
//! transcripts = "transcripts.json"
//! output = "out/predictions.jsonl"
//!
//! [llm]
//! kind = "replay"
//!
//! [embedder]
//! kind = "mock"
//! ```
//!
//! Any key can be overridden with `--section.key=value` (or `--key=value` at
//! the top level). Values are read as TOML literals, falling back to a bare
//! string. Relative paths resolve against the working directory.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::digest::{DigestConfig, MergeMode};
use crate::error::ConfigError;
use crate::reasoner::ChatFlavor;
use crate::refine::RefineConfig;
use crate::retry::RetryPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Digest,
    Ask,
    Localize,
    Eval,
    GenRefineData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Digest => "digest",
            Command::Ask => "ask",
            Command::Localize => "localize",
            Command::Eval => "eval",
            Command::GenRefineData => "gen-refine-data",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub captions: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    /// Recorded completions for the replay backend.
    pub transcripts: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Predictions file read by `eval`.
    pub predictions: Option<PathBuf>,
    /// Save every completion made during the run here, in replay format.
    pub record_transcripts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmKind {
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub kind: LlmKind,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    /// `plain` or `chat_completions`.
    pub flavor: String,
    pub model: Option<String>,
    pub timeout_s: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            kind: LlmKind::Replay,
            endpoint: None,
            auth_env: None,
            flavor: "plain".into(),
            model: None,
            timeout_s: 120,
        }
    }
}

impl LlmSection {
    pub fn chat_flavor(&self) -> Result<ChatFlavor, ConfigError> {
        match self.flavor.as_str() {
            "plain" => Ok(ChatFlavor::Plain),
            "chat_completions" => Ok(ChatFlavor::ChatCompletions {
                model: self.model.clone().ok_or(ConfigError::Invalid {
                    key: "llm.model",
                    reason: "required for the chat_completions flavor".into(),
                })?,
            }),
            other => Err(ConfigError::Invalid {
                key: "llm.flavor",
                reason: format!("unknown flavor {other:?}"),
            }),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub endpoint: Option<String>,
    pub auth_env: Option<String>,
    /// Hash seed of the mock embedder.
    pub mock_seed: u64,
    pub timeout_s: u64,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Mock,
            endpoint: None,
            auth_env: None,
            mock_seed: 0,
            timeout_s: 60,
        }
    }
}

impl EmbedderSection {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Heuristic,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub kind: ScorerKind,
    /// JSONL scores for the replay scorer.
    pub scores: Option<PathBuf>,
    /// Caption relevance cut-off of the heuristic scorer.
    pub relevance_threshold: f64,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Heuristic,
            scores: None,
            relevance_threshold: 0.30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Mandatory; every random stream derives from it.
    pub seed: Option<u64>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_in_flight")]
    pub in_flight_limit: usize,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub digest: DigestConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub scorer: ScorerSection,
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default)]
    pub embedder: EmbedderSection,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_runs() -> usize {
    5
}

fn default_in_flight() -> usize {
    4
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            runs: default_runs(),
            in_flight_limit: default_in_flight(),
            paths: Paths::default(),
            digest: DigestConfig::default(),
            refine: RefineConfig::default(),
            scorer: ScorerSection::default(),
            llm: LlmSection::default(),
            embedder: EmbedderSection::default(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Dotted config keys and their raw values, in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Split `--a.b=value` / `--a.b value` pairs out of `args`.
///
/// Only long flags whose name contains a dot, plus `--in_flight_limit`, are
/// taken; everything else is returned untouched for the regular argument
/// parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), ConfigError> {
    const TOP: [&str; 1] = ["in_flight_limit"];
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !(name.contains('.') || TOP.contains(&name.as_str())) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| ConfigError::Override(arg.clone()))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(key.to_string()));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(key.to_string()))?;
    }
    cur.insert(last.to_string(), literal(raw));
    Ok(())
}

impl PipelineConfig {
    /// Parse TOML text, then apply overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        table
            .try_into()
            .map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    /// Read `path` (or start from defaults when `None`) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or(ConfigError::MissingSeed)
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Check everything `cmd` will need before any work starts.
    pub fn validate_for(&self, cmd: Command) -> Result<(), ConfigError> {
        self.seed()?;
        if self.runs == 0 {
            return Err(invalid("runs", "must be positive"));
        }
        if self.in_flight_limit == 0 {
            return Err(invalid("in_flight_limit", "must be positive"));
        }
        self.digest.validate().map_err(|e| invalid("digest", e))?;
        self.refine.validate().map_err(|e| invalid("refine", e))?;
        if !(-1.0..=1.0).contains(&self.scorer.relevance_threshold) {
            return Err(invalid("scorer.relevance_threshold", "must lie in [-1, 1]"));
        }

        let p = &self.paths;
        let (needs_captions, needs_queries) = match cmd {
            Command::Digest => (true, false),
            Command::Ask | Command::Localize => (true, true),
            Command::Eval => (false, true),
            Command::GenRefineData => (true, true),
        };
        if needs_captions {
            existing("paths.captions", p.captions.as_deref())?;
        } else if let Some(c) = &p.captions {
            existing("paths.captions", Some(c))?;
        }
        if needs_queries {
            existing("paths.queries", p.queries.as_deref())?;
        } else if let Some(q) = &p.queries {
            existing("paths.queries", Some(q))?;
        }
        if cmd == Command::Eval {
            existing("paths.predictions", p.predictions.as_deref())?;
        } else if p.output.is_none() {
            return Err(ConfigError::MissingPath("paths.output"));
        }
        if cmd == Command::Localize && self.scorer.kind == ScorerKind::Replay {
            existing("scorer.scores", self.scorer.scores.as_deref())?;
        }
        Ok(())
    }
}

impl PipelineConfig {
    /// Checks for building the configured LLM and embedder backends.
    /// Whether `cmd` issues completion calls under this config.
    pub fn uses_llm(&self, cmd: Command) -> bool {
        match cmd {
            Command::Ask | Command::Localize => true,
            Command::Digest => self.digest.merge_mode == MergeMode::Llm,
            Command::Eval | Command::GenRefineData => false,
        }
    }

    /// Whether `cmd` computes embeddings under this config.
    pub fn uses_embedder(&self, cmd: Command) -> bool {
        !matches!(cmd, Command::Eval | Command::GenRefineData)
    }

    pub fn validate_backends(&self, cmd: Command) -> Result<(), ConfigError> {
        if self.uses_llm(cmd) {
            match self.llm.kind {
                LlmKind::Replay => {
                    existing("paths.transcripts", self.paths.transcripts.as_deref())?
                }
                LlmKind::Http => {
                    if self.llm.endpoint.is_none() {
                        return Err(ConfigError::MissingPath("llm.endpoint"));
                    }
                    self.llm.chat_flavor()?;
                    env_present("llm.auth_env", self.llm.auth_env.as_deref())?;
                }
            }
        }
        if self.uses_embedder(cmd) && self.embedder.kind == EmbedderKind::Http {
            if self.embedder.endpoint.is_none() {
                return Err(ConfigError::MissingPath("embedder.endpoint"));
            }
            env_present("embedder.auth_env", self.embedder.auth_env.as_deref())?;
        }
        Ok(())
    }
}

fn invalid(key: &'static str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.to_string(),
    }
}

fn env_present(key: &'static str, name: Option<&str>) -> Result<(), ConfigError> {
    match name {
        Some(n) if std::env::var_os(n).is_none() => Err(ConfigError::Invalid {
            key,
            reason: format!("environment variable {n} is not set"),
        }),
        _ => Ok(()),
    }
}

fn existing(key: &'static str, path: Option<&Path>) -> Result<(), ConfigError> {
    let path = path.ok_or(ConfigError::MissingPath(key))?;
    if !path.is_file() {
        return Err(ConfigError::FileNotFound {
            key,
            path: path.to_path_buf(),
        });
    }
    Ok(())
}
