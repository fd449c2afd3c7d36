//! LLM reasoning: prompt construction, backend calls, and structured parsing.

mod backend;
mod parse;
mod prompt;

pub use backend::{
    prompt_sha256, run, ChatFlavor, CompletionRequest, FnLlm, HttpLlm, LlmBackend, RecordingLlm,
    ReplayLlm, RunFailure, RunResponse, RunResults, Transcripts,
};
pub use parse::{format_reference, parse_response, ParsedResponse};
pub use prompt::{build_nlq_prompt, build_qa_prompt, caption_log, choice_letter, NO_CAPTIONS};

use serde::{Deserialize, Serialize};

use crate::corpus::QueryKind;
use crate::interval::CandidateInterval;

/// A fully rendered prompt and the queries it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system_text: String,
    pub user_text: String,
    pub query_ids: Vec<String>,
}

impl Prompt {
    /// Key used by the replay backend.
    pub fn sha256(&self) -> String {
        prompt_sha256(&self.system_text, &self.user_text)
    }
}

/// Self-rated confidence, 1 (low) to 3 (high).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Confidence(u8);

impl Confidence {
    pub const LOW: Confidence = Confidence(1);
    pub const MEDIUM: Confidence = Confidence(2);
    pub const HIGH: Confidence = Confidence(3);
    pub const LEVELS: [Confidence; 3] = [Self::LOW, Self::MEDIUM, Self::HIGH];

    pub fn new(level: u8) -> Option<Self> {
        (1..=3).contains(&level).then_some(Self(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Confidence {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Confidence::new(v).ok_or_else(|| format!("confidence {v} outside 1..=3"))
    }
}

impl From<Confidence> for u8 {
    fn from(c: Confidence) -> u8 {
        c.0
    }
}

/// One query's parsed answer.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmAnswer {
    pub qid: String,
    pub kind: QueryKind,
    /// 0-based choice for QA; `None` if the model's answer was unusable.
    pub choice_idx: Option<usize>,
    /// NLQ candidates in the model's order; empty means NA.
    pub intervals: Vec<CandidateInterval>,
    pub explanation: String,
    pub confidence: Confidence,
    pub raw_text: String,
}

impl LlmAnswer {
    pub fn is_na(&self) -> bool {
        self.kind == QueryKind::Nlq && self.intervals.is_empty()
    }

    /// The degraded answer used when a query is missing from a response.
    pub fn fallback(qid: &str, kind: QueryKind, raw_text: &str) -> Self {
        Self {
            qid: qid.to_string(),
            kind,
            choice_idx: None,
            intervals: Vec::new(),
            explanation: String::new(),
            confidence: Confidence::LOW,
            raw_text: raw_text.to_string(),
        }
    }
}
