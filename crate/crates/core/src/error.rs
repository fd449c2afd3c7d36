//! Error types for each pipeline stage.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvalidInterval {
    #[error("non-finite interval endpoint")]
    NonFinite,
    #[error("inverted interval ({start_s}, {end_s})")]
    Inverted { start_s: f64, end_s: f64 },
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("inverted interval at line {line}")]
    InvertedInterval { line: usize },
    #[error("negative timestamp at line {line}")]
    NegativeTime { line: usize },
    #[error("empty caption text at line {line}")]
    EmptyText { line: usize },
    #[error("conflicting bounds records for video {video_id} at line {line}")]
    ConflictingBounds { video_id: String, line: usize },
    #[error("caption {start_s}-{end_s} of video {video_id} lies outside clip bounds {clip_start_s}-{clip_end_s}")]
    OutOfBounds {
        video_id: String,
        start_s: f64,
        end_s: f64,
        clip_start_s: f64,
        clip_end_s: f64,
    },
    #[error("line {line}: expected 5 choices, found {found}")]
    ChoiceCount { line: usize, found: usize },
    #[error("line {line}: NLQ record must not carry choices")]
    NlqWithChoices { line: usize },
    #[error("line {line}: unknown query kind {kind:?}")]
    UnknownKind { line: usize, kind: String },
    #[error("line {line}: duplicate qid {qid}")]
    DuplicateQid { line: usize, qid: String },
    #[error("query {qid}: ground-truth window {start_s}-{end_s} outside clip bounds of video {video_id}")]
    GroundTruthOutOfBounds {
        qid: String,
        video_id: String,
        start_s: f64,
        end_s: f64,
    },
}

#[derive(Debug, Clone, Error)]
pub enum EmbedError {
    #[error("cannot embed an empty batch")]
    EmptyBatch,
    #[error("text {index} of the batch is empty")]
    EmptyText { index: usize },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("count mismatch: sent {expected} texts, received {got} embeddings")]
    CountMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector returned for text {index}")]
    ZeroVector { index: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
}

#[derive(Debug, Clone, Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no recorded transcript for prompt {prompt_sha256} run {run_index}")]
    MissingTranscript {
        prompt_sha256: String,
        run_index: usize,
    },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

/// The response carried no machine-readable block at all.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("no parsable structured block in response ({reason})")]
pub struct ParseError {
    pub reason: String,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("query {qid} has kind {found}, expected {expected}")]
    WrongKind {
        qid: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("empty query list")]
    NoQueries,
    #[error("mixed video_id: {expected} and {found}")]
    MixedVideo { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error("padded interval is degenerate ({start_s}, {end_s})")]
    Degenerate { start_s: f64, end_s: f64 },
    #[error("invalid refine config: {0}")]
    Config(String),
    #[error("query {qid}: attempt budget exhausted after {attempts} draws ({pos} pos, {neg} neg)")]
    BudgetExhausted {
        qid: String,
        attempts: usize,
        pos: usize,
        neg: usize,
    },
    #[error("query {qid}: ground-truth window outside its bounds")]
    GroundTruthOutOfBounds { qid: String },
    #[error("answer {qid} is not an NLQ answer")]
    NotNlq { qid: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("no score recorded for {qid} at {start_s}-{end_s}")]
    Missing {
        qid: String,
        start_s: f64,
        end_s: f64,
    },
    #[error("scorer failure: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no ground truth for qid(s): {}", .0.join(", "))]
    MissingGroundTruth(Vec<String>),
    #[error("threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("prediction {0} is not a QA answer")]
    NotQa(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("bad override {0:?}: expected --section.key=value")]
    Override(String),
    #[error("seed is mandatory (set `seed` in the config or pass --seed)")]
    MissingSeed,
    #[error("missing required path `{0}`")]
    MissingPath(&'static str),
    #[error("{key} refers to a file that does not exist: {path}")]
    FileNotFound { key: &'static str, path: PathBuf },
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, Error)]
pub enum DigestError {
    #[error("relevance filtering needs at least one query")]
    NoQueries,
    #[error("invalid digest config: {0}")]
    Config(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}
