use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use super::Prompt;
use crate::error::LlmError;
use crate::http::{token_from_env, JsonEndpoint};
use crate::retry::RetryPolicy;
use crate::seeding;

/// `sha256(system ‖ 0x00 ‖ user)` as lowercase hex.
pub fn prompt_sha256(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub system: &'a str,
    pub user: &'a str,
    pub seed: Option<u64>,
    pub run_index: usize,
}

/// A text-completion model.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError>;

    fn single_flight(&self) -> bool {
        false
    }

    fn kind(&self) -> &'static str;
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        (**self).complete(req)
    }
    fn single_flight(&self) -> bool {
        (**self).single_flight()
    }
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
}

/// Wraps a closure; handy for rule-based stand-ins.
pub struct FnLlm<F>(pub F);

impl<F> LlmBackend for FnLlm<F>
where
    F: Fn(&CompletionRequest<'_>) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        (self.0)(req)
    }

    fn kind(&self) -> &'static str {
        "scripted"
    }
}

/// Recorded transcripts: prompt digest → `run_<k>` → response text.
pub type Transcripts = BTreeMap<String, BTreeMap<String, String>>;

fn run_key(run_index: usize) -> String {
    format!("run_{run_index}")
}

/// Returns recorded transcripts keyed by `(prompt digest, run index)`.
#[derive(Debug, Clone, Default)]
pub struct ReplayLlm {
    transcripts: Transcripts,
}

impl ReplayLlm {
    pub fn new(transcripts: Transcripts) -> Self {
        Self { transcripts }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("cannot read {}: {e}", path.display())))?;
        let transcripts = serde_json::from_str(&text).map_err(|e| {
            LlmError::Config(format!("bad transcripts file {}: {e}", path.display()))
        })?;
        Ok(Self { transcripts })
    }

    pub fn insert(&mut self, prompt: &Prompt, run_index: usize, text: impl Into<String>) {
        self.transcripts
            .entry(prompt.sha256())
            .or_default()
            .insert(run_key(run_index), text.into());
    }

    pub fn transcripts(&self) -> &Transcripts {
        &self.transcripts
    }
}

impl LlmBackend for ReplayLlm {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let digest = prompt_sha256(req.system, req.user);
        self.transcripts
            .get(&digest)
            .and_then(|runs| runs.get(&run_key(req.run_index)))
            .cloned()
            .ok_or(LlmError::MissingTranscript {
                prompt_sha256: digest,
                run_index: req.run_index,
            })
    }

    fn kind(&self) -> &'static str {
        "replay"
    }
}

/// Records every successful completion so a live run can be replayed.
pub struct RecordingLlm<B> {
    inner: B,
    log: Mutex<Transcripts>,
}

impl<B: LlmBackend> RecordingLlm<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Transcripts::new()),
        }
    }

    pub fn transcripts(&self) -> Transcripts {
        self.log.lock().expect("transcript log poisoned").clone()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(&self.transcripts())?;
        std::fs::write(path, json + "\n")
    }
}

impl<B: LlmBackend> LlmBackend for RecordingLlm<B> {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let text = self.inner.complete(req)?;
        self.log
            .lock()
            .expect("transcript log poisoned")
            .entry(prompt_sha256(req.system, req.user))
            .or_default()
            .insert(run_key(req.run_index), text.clone());
        Ok(text)
    }

    fn single_flight(&self) -> bool {
        self.inner.single_flight()
    }

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }
}

/// Request body shape for [`HttpLlm`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "flavor", rename_all = "snake_case")]
pub enum ChatFlavor {
    /// `{"system", "user", "seed"?}` → `{"text"}`
    Plain,
    /// OpenAI-style `messages` array → `choices[0].message.content`
    ChatCompletions { model: String },
}

#[derive(Serialize)]
struct PlainRequest<'a> {
    system: &'a str,
    user: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct PlainResponse {
    text: String,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    content: Option<String>,
}

/// Remote completion endpoint. Transport errors, 429 and 5xx surface as
/// retryable [`LlmError::Transport`]; callers own the retry loop.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    endpoint: JsonEndpoint,
    flavor: ChatFlavor,
}

impl HttpLlm {
    pub fn new(
        url: &str,
        auth_env: Option<&str>,
        flavor: ChatFlavor,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let token = token_from_env(auth_env).map_err(LlmError::Config)?;
        Ok(Self {
            endpoint: JsonEndpoint::new(url, token, timeout),
            flavor,
        })
    }

    fn once(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let to_err = |f: crate::http::HttpFailure| {
            if f.retryable {
                LlmError::Transport(f.message)
            } else {
                LlmError::Rejected(f.message)
            }
        };
        match &self.flavor {
            ChatFlavor::Plain => self
                .endpoint
                .post::<_, PlainResponse>(&PlainRequest {
                    system: req.system,
                    user: req.user,
                    seed: req.seed,
                })
                .map(|r| r.text)
                .map_err(to_err),
            ChatFlavor::ChatCompletions { model } => {
                let body = ChatRequest {
                    model,
                    messages: [
                        ChatMessage {
                            role: "system",
                            content: req.system,
                        },
                        ChatMessage {
                            role: "user",
                            content: req.user,
                        },
                    ],
                    seed: req.seed,
                };
                let resp: ChatResponse = self.endpoint.post(&body).map_err(to_err)?;
                resp.choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .ok_or_else(|| LlmError::Rejected("response carried no choices".into()))
            }
        }
    }
}

impl LlmBackend for HttpLlm {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        self.once(req)
    }

    fn kind(&self) -> &'static str {
        "http"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResponse {
    pub run_index: usize,
    pub seed: u64,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct RunFailure {
    pub run_index: usize,
    pub error: LlmError,
}

/// Outcome of repeated completions of one prompt, both lists in run order.
#[derive(Debug, Clone, Default)]
pub struct RunResults {
    pub responses: Vec<RunResponse>,
    pub failures: Vec<RunFailure>,
}

/// Issue `runs` independent completions of `prompt`.
///
/// Run `k` is sampled with `seeding::for_index(seed, k)`. Runs execute on the
/// current rayon pool; results are ordered by run index regardless of
/// completion order. Retries happen inside the backend; a run that still
/// fails is reported in `failures`.
pub fn run(
    prompt: &Prompt,
    backend: &dyn LlmBackend,
    runs: usize,
    seed: u64,
    retry: &RetryPolicy,
) -> RunResults {
    assert!(runs >= 1, "runs must be positive");
    let outcomes: Vec<(usize, u64, Result<String, LlmError>)> = (0..runs)
        .into_par_iter()
        .map(|run_index| {
            let run_seed = seeding::for_index(seed, run_index as u64);
            let req = CompletionRequest {
                system: &prompt.system_text,
                user: &prompt.user_text,
                seed: Some(run_seed),
                run_index,
            };
            let res = retry.run(LlmError::is_retryable, |_| backend.complete(&req));
            (run_index, run_seed, res)
        })
        .collect();

    let mut out = RunResults::default();
    for (run_index, seed, res) in outcomes {
        match res {
            Ok(text) => out.responses.push(RunResponse {
                run_index,
                seed,
                text,
            }),
            Err(error) => {
                tracing::warn!(run_index, %error, "completion failed after retries");
                out.failures.push(RunFailure { run_index, error });
            }
        }
    }
    out
}
