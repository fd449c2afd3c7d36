//! End-to-end commands: digest, ask, localize, eval, gen-refine-data.
//!
//! Each command reads its inputs, runs every remote call on one rayon pool
//! of `in_flight_limit` threads, then writes its outputs from the calling
//! thread. Next to the main output `<out>` it writes:
//!
//! * `<out>.manifest.json`: config hash, seed, backend kinds, input hashes, counts
//! * `<out>.failures.json`: per-item failures, only when there are some
//! * `<out>.stats.json`: digest statistics (`digest` only)
//!
//! Output files depend only on inputs, config and backend responses, never on
//! thread scheduling.

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

use crate::config::{Command, EmbedderKind, LlmKind, PipelineConfig, ScorerKind};
use crate::corpus::{
    load_captions, load_queries, write_captions, CaptionTrack, Corpus, Query, QueryKind, QuerySet,
};
use crate::digest::{digest, DigestStats};
use crate::ensemble::{vote_by_confidence, AnswerPool};
use crate::error::{
    ConfigError, CorpusError, EmbedError, LlmError, MetricsError, RefineError, ScoreError,
};
use crate::interval::Interval;
use crate::metrics::{evaluate, EvalInput, EvalReport};
use crate::reasoner::{
    self, build_nlq_prompt, build_qa_prompt, choice_letter, parse_response, CompletionRequest,
    HttpLlm, RecordingLlm, ReplayLlm, Transcripts,
};
use crate::refine::{
    gen_refinement_dataset, select_candidate, write_refinement_dataset, CandidateScorer,
    GroundTruth, HeuristicScorer, Label, ReplayScorer,
};
use crate::seeding;
use crate::similarity::{CachingEmbedder, Embedder, HttpEmbedder, MockEmbedder};
use crate::{Confidence, LlmAnswer, LlmBackend};

/// Which predictions `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Qa,
    Nlq,
}

/// One work item that produced no output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qid: Option<String>,
    pub error: String,
}

impl Failure {
    fn new(stage: &str, video_id: &str, qid: Option<&str>, error: impl ToString) -> Self {
        Self {
            stage: stage.to_string(),
            video_id: Some(video_id.to_string()),
            qid: qid.map(str::to_string),
            error: error.to_string(),
        }
    }
}

fn list_failures(failures: &[Failure]) -> String {
    failures
        .iter()
        .map(|f| format!("{}: {}", f.video_id.as_deref().unwrap_or("-"), f.error))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend setup failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{}:{line}: {reason}", path.display())]
    Predictions {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(
        "qid mismatch; predictions without ground truth: [{}]; ground truth without prediction: [{}]",
        without_gt.join(", "),
        without_prediction.join(", ")
    )]
    QidMismatch {
        without_gt: Vec<String>,
        without_prediction: Vec<String>,
    },
    #[error("{} video(s) failed: {}", failures.len(), list_failures(failures))]
    Aborted { failures: Vec<Failure> },
}

impl PipelineError {
    /// Configuration problems, reported as usage errors by the binary.
    pub fn is_usage(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What a command did.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub counts: BTreeMap<String, usize>,
    pub failures: Vec<Failure>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    pub report: Option<EvalReport>,
}

impl RunSummary {
    /// 0 when every item succeeded, 2 when some were recorded as failures.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }

    fn count(&mut self, key: &str, n: usize) {
        self.counts.insert(key.to_string(), n);
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    config: &'a PipelineConfig,
    seed: u64,
    backends: BTreeMap<&'a str, &'a str>,
    inputs: BTreeMap<&'a str, String>,
    counts: &'a BTreeMap<String, usize>,
    failures: usize,
}

/// QA prediction record, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaPrediction {
    pub qid: String,
    pub video_id: String,
    /// Letter `A`..`E`, or null when no run produced a usable choice.
    pub choice: Option<String>,
    pub choice_idx: Option<usize>,
    pub confidence: Confidence,
    pub explanation: String,
    /// Completions that reached the vote.
    pub responses: usize,
}

impl QaPrediction {
    pub fn to_answer(&self) -> LlmAnswer {
        LlmAnswer {
            qid: self.qid.clone(),
            kind: QueryKind::Qa,
            choice_idx: self.choice_idx,
            intervals: Vec::new(),
            explanation: self.explanation.clone(),
            confidence: self.confidence,
            raw_text: String::new(),
        }
    }
}

/// NLQ prediction record, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlqPrediction {
    pub qid: String,
    pub video_id: String,
    /// Final window after padding and candidate selection.
    pub predicted_window: Interval,
    /// Model candidates, clamped to the clip, before padding.
    pub candidates: Vec<Interval>,
    pub na: bool,
    pub confidence: Confidence,
    pub explanation: String,
}

impl NlqPrediction {
    /// The coarse answer, candidates as intervals.
    pub fn to_answer(&self) -> LlmAnswer {
        LlmAnswer {
            qid: self.qid.clone(),
            kind: QueryKind::Nlq,
            choice_idx: None,
            intervals: self.candidates.clone(),
            explanation: self.explanation.clone(),
            confidence: self.confidence,
            raw_text: String::new(),
        }
    }
}

/// Serializes calls into a backend that declared itself single-flight.
struct Gate<B> {
    inner: B,
    lock: Option<Mutex<()>>,
}

impl<B> Gate<B> {
    fn new(inner: B, single_flight: bool) -> Self {
        Self {
            inner,
            lock: single_flight.then(|| Mutex::new(())),
        }
    }

    fn hold(&self) -> Option<std::sync::MutexGuard<'_, ()>> {
        self.lock
            .as_ref()
            .map(|m| m.lock().unwrap_or_else(|e| e.into_inner()))
    }
}

impl<B: LlmBackend> LlmBackend for Gate<B> {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let _g = self.hold();
        self.inner.complete(req)
    }

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }
}

impl<B: Embedder> Embedder for Gate<B> {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let _g = self.hold();
        self.inner.embed_texts(texts)
    }

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }
}

/// Backends built from the `[llm]` and `[embedder]` sections.
pub struct Backends {
    pub llm: Box<dyn LlmBackend>,
    pub embedder: Box<dyn Embedder>,
}

impl Backends {
    pub fn from_config(cfg: &PipelineConfig, cmd: Command) -> Result<Self, PipelineError> {
        cfg.validate_backends(cmd)?;
        let llm: Box<dyn LlmBackend> = match cfg.llm.kind {
            _ if !cfg.uses_llm(cmd) => Box::new(ReplayLlm::new(Transcripts::new())),
            LlmKind::Replay => match &cfg.paths.transcripts {
                Some(p) => {
                    Box::new(ReplayLlm::load(p).map_err(|e| PipelineError::Backend(e.to_string()))?)
                }
                None => Box::new(ReplayLlm::new(Transcripts::new())),
            },
            LlmKind::Http => Box::new(
                HttpLlm::new(
                    cfg.llm.endpoint.as_deref().unwrap_or_default(),
                    cfg.llm.auth_env.as_deref(),
                    cfg.llm.chat_flavor()?,
                    cfg.llm.timeout(),
                )
                .map_err(|e| PipelineError::Backend(e.to_string()))?,
            ),
        };
        let embedder: Box<dyn Embedder> = match cfg.embedder.kind {
            _ if !cfg.uses_embedder(cmd) => Box::new(MockEmbedder::new(cfg.embedder.mock_seed)),
            EmbedderKind::Mock => Box::new(MockEmbedder::new(cfg.embedder.mock_seed)),
            EmbedderKind::Http => Box::new(CachingEmbedder::new(
                HttpEmbedder::new(
                    cfg.embedder.endpoint.as_deref().unwrap_or_default(),
                    cfg.embedder.auth_env.as_deref(),
                    cfg.retry,
                    cfg.embedder.timeout(),
                )
                .map_err(|e| PipelineError::Backend(e.to_string()))?,
            )),
        };
        Ok(Self { llm, embedder })
    }
}

fn worker_pool(threads: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Backend(e.to_string()))
}

/// `<path><suffix>`, e.g. `out.jsonl.manifest.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("records serialize");
        out.push(b'\n');
    }
    out
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| PipelineError::Predictions {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })
        })
        .collect()
}

fn keyed<T>(
    path: &Path,
    rows: Vec<(usize, T)>,
    qid: impl Fn(&T) -> &str,
) -> Result<BTreeMap<String, T>, PipelineError> {
    let mut out = BTreeMap::new();
    for (line, row) in rows {
        let key = qid(&row).to_string();
        if out.contains_key(&key) {
            return Err(PipelineError::Predictions {
                path: path.to_path_buf(),
                line,
                reason: format!("duplicate qid {key}"),
            });
        }
        out.insert(key, row);
    }
    Ok(out)
}

pub fn read_qa_predictions(path: &Path) -> Result<BTreeMap<String, QaPrediction>, PipelineError> {
    keyed(path, read_jsonl(path)?, |p: &QaPrediction| &p.qid)
}

pub fn read_nlq_predictions(path: &Path) -> Result<BTreeMap<String, NlqPrediction>, PipelineError> {
    keyed(path, read_jsonl(path)?, |p: &NlqPrediction| &p.qid)
}

struct Run<'a> {
    cmd: Command,
    cfg: &'a PipelineConfig,
    seed: u64,
    out: PathBuf,
    summary: RunSummary,
    backends: BTreeMap<&'static str, &'static str>,
}

impl<'a> Run<'a> {
    fn start(cmd: Command, cfg: &'a PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate_for(cmd)?;
        Ok(Self {
            cmd,
            cfg,
            seed: cfg.seed()?,
            out: cfg.paths.output.clone().unwrap_or_default(),
            summary: RunSummary {
                command: cmd.name().to_string(),
                ..Default::default()
            },
            backends: BTreeMap::new(),
        })
    }

    fn output(&mut self, path: PathBuf, bytes: &[u8]) -> Result<(), PipelineError> {
        write_file(&path, bytes)?;
        self.summary.outputs.push(path);
        Ok(())
    }

    fn finish(mut self) -> Result<RunSummary, PipelineError> {
        if !self.summary.failures.is_empty() {
            let body = serde_json::to_vec_pretty(
                &serde_json::json!({ "failures": self.summary.failures }),
            )
            .expect("failures serialize");
            self.output(sidecar(&self.out, ".failures.json"), &body)?;
        }
        let p = &self.cfg.paths;
        let mut inputs = BTreeMap::new();
        for (key, path) in [
            ("captions", &p.captions),
            ("queries", &p.queries),
            ("transcripts", &p.transcripts),
            ("predictions", &p.predictions),
        ] {
            if let Some(path) = path.as_deref().filter(|x| x.is_file()) {
                inputs.insert(key, file_sha256(path)?);
            }
        }
        let manifest = Manifest {
            command: self.cmd.name(),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: self.cfg.sha256(),
            config: self.cfg,
            seed: self.seed,
            backends: self.backends.clone(),
            inputs,
            counts: &self.summary.counts,
            failures: self.summary.failures.len(),
        };
        let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        self.output(sidecar(&self.out, ".manifest.json"), &body)?;
        tracing::info!(
            command = self.cmd.name(),
            failures = self.summary.failures.len(),
            outputs = self.summary.outputs.len(),
            "run finished"
        );
        Ok(self.summary)
    }
}

/// Texts that decide which captions of a video count as relevant: NLQ query
/// texts, and for QA the question plus each of its options.
fn relevance_probes<'q>(
    queries: impl IntoIterator<Item = &'q Query>,
) -> BTreeMap<String, Vec<Query>> {
    let mut out: BTreeMap<String, Vec<Query>> = BTreeMap::new();
    for q in queries {
        let probes = out.entry(q.video_id.clone()).or_default();
        probes.push(Query::nlq(q.qid.clone(), q.video_id.clone(), &q.text, None));
        if let Some(choices) = q.choices() {
            for c in choices {
                probes.push(Query::nlq(q.qid.clone(), q.video_id.clone(), c, None));
            }
        }
    }
    out
}

#[derive(Default)]
struct Digested {
    tracks: BTreeMap<String, CaptionTrack>,
    stats: BTreeMap<String, DigestStats>,
    failures: BTreeMap<String, Failure>,
}

impl Digested {
    fn total(&self) -> DigestStats {
        let mut t = DigestStats::default();
        for s in self.stats.values() {
            t.accumulate(s);
        }
        t
    }
}

fn digest_videos(
    corpus: &Corpus,
    probes: &BTreeMap<String, Vec<Query>>,
    videos: &[&String],
    embedder: &dyn Embedder,
    llm: &dyn LlmBackend,
    cfg: &PipelineConfig,
) -> Digested {
    let results: Vec<_> = videos
        .par_iter()
        .filter_map(|vid| corpus.get(*vid).map(|t| (*vid, t)))
        .map(|(vid, track)| {
            let t0 = Instant::now();
            let qs: Vec<&Query> = probes
                .get(vid)
                .map(|v| v.iter().collect())
                .unwrap_or_default();
            let res = digest(track, &qs, embedder, llm, &cfg.digest, &cfg.retry);
            tracing::info!(
                stage = "digest",
                video_id = %vid,
                duration_ms = t0.elapsed().as_millis() as u64,
                ok = res.is_ok(),
                "video digested"
            );
            (vid, res)
        })
        .collect();
    let mut d = Digested::default();
    for (vid, res) in results {
        match res {
            Ok((track, stats)) => {
                d.tracks.insert(vid.clone(), track);
                d.stats.insert(vid.clone(), stats);
            }
            Err(e) => {
                tracing::error!(stage = "digest", video_id = %vid, error = %e, "digest failed");
                d.failures
                    .insert(vid.clone(), Failure::new("digest", vid, None, e));
            }
        }
    }
    d
}

fn load_inputs(
    cfg: &PipelineConfig,
    need_queries: bool,
) -> Result<(Corpus, Option<QuerySet>), PipelineError> {
    let corpus = match &cfg.paths.captions {
        Some(p) => load_captions(p)?.tracks,
        None => Corpus::new(),
    };
    let queries = match &cfg.paths.queries {
        Some(p) => {
            let qs = load_queries(p)?;
            qs.validate_against(&corpus)?;
            Some(qs)
        }
        None if need_queries => return Err(ConfigError::MissingPath("paths.queries").into()),
        None => None,
    };
    Ok((corpus, queries))
}

/// Digest every track; any failing video aborts the command.
pub fn cmd_digest(
    cfg: &PipelineConfig,
    llm: &dyn LlmBackend,
    embedder: &dyn Embedder,
) -> Result<RunSummary, PipelineError> {
    let mut run = Run::start(Command::Digest, cfg)?;
    let (corpus, queries) = load_inputs(cfg, false)?;
    let llm = Gate::new(llm, llm.single_flight());
    let embedder = Gate::new(embedder, embedder.single_flight());
    run.backends.insert("llm", llm.kind());
    run.backends.insert("embedder", embedder.kind());
    let probes = queries
        .as_ref()
        .map(|q| relevance_probes(q.iter()))
        .unwrap_or_default();
    let videos: Vec<&String> = corpus.keys().collect();
    let pool = worker_pool(cfg.in_flight_limit)?;
    let d = pool.install(|| digest_videos(&corpus, &probes, &videos, &embedder, &llm, cfg));
    if !d.failures.is_empty() {
        return Err(PipelineError::Aborted {
            failures: d.failures.into_values().collect(),
        });
    }

    let mut body = Vec::new();
    write_captions(&mut body, d.tracks.values()).map_err(io_err(&run.out))?;
    let out = run.out.clone();
    run.output(out.clone(), &body)?;
    let total = d.total();
    let stats = serde_json::json!({ "total": total, "per_video": d.stats });
    run.output(
        sidecar(&out, ".stats.json"),
        &serde_json::to_vec_pretty(&stats).expect("stats serialize"),
    )?;
    run.summary.count("videos", d.tracks.len());
    run.summary.count("captions_in", total.input);
    run.summary.count("captions_out", total.output);
    run.summary
        .count("dropped_uninformative", total.dropped_uninformative);
    run.summary
        .count("dropped_irrelevant", total.dropped_irrelevant);
    run.summary.count("groups_merged", total.groups_merged);
    run.summary.count("merge_fallbacks", total.merge_fallbacks);
    run.finish()
}

fn save_recording<B: LlmBackend>(
    run: &mut Run<'_>,
    rec: Option<&RecordingLlm<B>>,
) -> Result<(), PipelineError> {
    if let (Some(rec), Some(path)) = (rec, run.cfg.paths.record_transcripts.clone()) {
        let body = serde_json::to_vec_pretty(&rec.transcripts()).expect("transcripts serialize");
        run.output(path, &body)?;
    }
    Ok(())
}

struct QaOutcome {
    prediction: QaPrediction,
    failed_runs: usize,
    parse_fallbacks: usize,
}

fn answer_question(
    q: &Query,
    track: &CaptionTrack,
    llm: &dyn LlmBackend,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<QaOutcome, Failure> {
    let t0 = Instant::now();
    let prompt = build_qa_prompt(track, q)
        .map_err(|e| Failure::new("prompt", &q.video_id, Some(&q.qid), e))?;
    let results = reasoner::run(
        &prompt,
        llm,
        cfg.runs,
        seeding::for_key(seed, &q.qid),
        &cfg.retry,
    );
    if results.responses.is_empty() {
        let err = results
            .failures
            .first()
            .map(|f| f.error.to_string())
            .unwrap_or_default();
        return Err(Failure::new("llm", &q.video_id, Some(&q.qid), err));
    }
    let expected = [q.qid.clone()];
    let mut parse_fallbacks = 0;
    let answers: Vec<LlmAnswer> = results
        .responses
        .iter()
        .map(|r| match parse_response(&r.text, QueryKind::Qa, &expected) {
            Ok(p) => p.answers.into_iter().next().expect("one answer per expected qid"),
            Err(e) => {
                tracing::warn!(stage = "parse", qid = %q.qid, error = %e, "unparsable response");
                parse_fallbacks += 1;
                LlmAnswer::fallback(&q.qid, QueryKind::Qa, &r.text)
            }
        })
        .collect();
    let usable: Vec<LlmAnswer> = answers
        .iter()
        .filter(|a| a.choice_idx.is_some())
        .cloned()
        .collect();
    let pool = AnswerPool::new(if usable.is_empty() { answers } else { usable })
        .expect("non-empty QA pool");
    let vote_seed = seeding::for_key(seeding::for_index(seed, seeding::VOTE_STREAM), &q.qid);
    let chosen = vote_by_confidence(&pool, vote_seed);
    tracing::info!(
        stage = "ask",
        video_id = %q.video_id,
        qid = %q.qid,
        duration_ms = t0.elapsed().as_millis() as u64,
        "question answered"
    );
    Ok(QaOutcome {
        prediction: QaPrediction {
            qid: q.qid.clone(),
            video_id: q.video_id.clone(),
            choice: chosen.choice_idx.and_then(choice_letter).map(String::from),
            choice_idx: chosen.choice_idx,
            confidence: chosen.confidence,
            explanation: chosen.explanation.clone(),
            responses: pool.answers().len(),
        },
        failed_runs: results.failures.len(),
        parse_fallbacks,
    })
}

/// Answer every QA question: digest, prompt, `runs` completions, parse,
/// vote by confidence. Failed questions are listed, the rest still written.
pub fn cmd_ask(
    cfg: &PipelineConfig,
    llm: &dyn LlmBackend,
    embedder: &dyn Embedder,
) -> Result<RunSummary, PipelineError> {
    let mut run = Run::start(Command::Ask, cfg)?;
    let (corpus, queries) = load_inputs(cfg, true)?;
    let queries = queries.expect("queries loaded");
    let qa: Vec<&Query> = queries.of_kind(QueryKind::Qa).collect();
    let recorder = cfg
        .paths
        .record_transcripts
        .as_ref()
        .map(|_| RecordingLlm::new(llm));
    let llm: &dyn LlmBackend = match &recorder {
        Some(r) => r,
        None => llm,
    };
    let llm = Gate::new(llm, llm.single_flight());
    let embedder = Gate::new(embedder, embedder.single_flight());
    run.backends.insert("llm", llm.kind());
    run.backends.insert("embedder", embedder.kind());

    let probes = relevance_probes(qa.iter().copied());
    let videos: Vec<&String> = probes.keys().collect();
    let pool = worker_pool(cfg.in_flight_limit)?;
    let seed = run.seed;
    let (d, outcomes) = pool.install(|| {
        let mut d = digest_videos(&corpus, &probes, &videos, &embedder, &llm, cfg);
        for vid in &videos {
            if !corpus.contains_key(*vid) {
                tracing::warn!(video_id = %vid, "no caption track; questions are asked without captions");
                let placeholder = Interval::new(0.0, 1.0).expect("valid interval");
                let empty = CaptionTrack::new((*vid).clone(), placeholder, Vec::new()).expect("empty track");
                d.tracks.insert((*vid).clone(), empty);
            }
        }
        let outcomes: Vec<Result<QaOutcome, Failure>> = qa
            .par_iter()
            .map(|q| {
                if let Some(f) = d.failures.get(&q.video_id) {
                    return Err(Failure::new("digest", &q.video_id, Some(&q.qid), &f.error));
                }
                answer_question(q, &d.tracks[&q.video_id], &llm, cfg, seed)
            })
            .collect();
        (d, outcomes)
    });

    let mut preds = BTreeMap::new();
    let (mut failed_runs, mut parse_fallbacks) = (0, 0);
    for o in outcomes {
        match o {
            Ok(o) => {
                failed_runs += o.failed_runs;
                parse_fallbacks += o.parse_fallbacks;
                preds.insert(o.prediction.qid.clone(), o.prediction);
            }
            Err(f) => run.summary.failures.push(f),
        }
    }
    let out = run.out.clone();
    run.output(out, &jsonl(preds.values()))?;
    save_recording(&mut run, recorder.as_ref())?;
    let total = d.total();
    run.summary.count("questions", qa.len());
    run.summary.count("predictions", preds.len());
    run.summary.count("failed_runs", failed_runs);
    run.summary.count("parse_fallbacks", parse_fallbacks);
    run.summary.count("captions_in", total.input);
    run.summary.count("captions_after_digest", total.output);
    run.finish()
}

/// Clamp candidates to the clip; candidates entirely outside it are dropped.
fn clamp_answer(mut answer: LlmAnswer, bounds: &Interval) -> LlmAnswer {
    let before = answer.intervals.len();
    let mut clamped = Vec::with_capacity(before);
    for c in &answer.intervals {
        match c.clamp_to(bounds) {
            Some(k) => {
                if k != *c {
                    tracing::warn!(stage = "localize", qid = %answer.qid, candidate = %c, "candidate clamped to clip bounds");
                }
                clamped.push(k);
            }
            None => {
                tracing::warn!(stage = "localize", qid = %answer.qid, candidate = %c, "candidate outside clip dropped")
            }
        }
    }
    answer.intervals = clamped;
    answer
}

#[allow(clippy::too_many_arguments)]
fn localize_video(
    vid: &str,
    queries: &[&Query],
    corpus: &Corpus,
    d: &Digested,
    llm: &dyn LlmBackend,
    scorer: &dyn CandidateScorer,
    cfg: &PipelineConfig,
    seed: u64,
) -> (Vec<Result<NlqPrediction, Failure>>, usize) {
    let fail_all = |stage: &str, err: &str| {
        let fs = queries
            .iter()
            .map(|q| Err(Failure::new(stage, vid, Some(&q.qid), err)))
            .collect();
        (fs, 0)
    };
    let t0 = Instant::now();
    let Some(raw) = corpus.get(vid) else {
        return fail_all("corpus", "no caption track for video");
    };
    if let Some(f) = d.failures.get(vid) {
        return fail_all("digest", &f.error);
    }
    let track = &d.tracks[vid];
    let prompt = match build_nlq_prompt(track, queries) {
        Ok(p) => p,
        Err(e) => return fail_all("prompt", &e.to_string()),
    };
    let results = reasoner::run(&prompt, llm, 1, seeding::for_key(seed, vid), &cfg.retry);
    let Some(resp) = results.responses.first() else {
        let err = results
            .failures
            .first()
            .map(|f| f.error.to_string())
            .unwrap_or_default();
        return fail_all("llm", &err);
    };
    let mut fallbacks = 0;
    let answers = match parse_response(&resp.text, QueryKind::Nlq, &prompt.query_ids) {
        Ok(p) => p.answers,
        Err(e) => {
            tracing::warn!(stage = "parse", video_id = vid, error = %e, "unparsable response; all queries NA");
            fallbacks = queries.len();
            prompt
                .query_ids
                .iter()
                .map(|qid| LlmAnswer::fallback(qid, QueryKind::Nlq, &resp.text))
                .collect()
        }
    };
    let preds = queries
        .iter()
        .zip(answers)
        .map(|(q, answer)| {
            let answer = clamp_answer(answer, &raw.bounds());
            let window = select_candidate(&answer, q, raw, scorer, &cfg.refine)
                .map_err(|e| Failure::new("refine", vid, Some(&q.qid), e))?;
            Ok(NlqPrediction {
                qid: q.qid.clone(),
                video_id: vid.to_string(),
                predicted_window: window,
                candidates: answer.intervals.clone(),
                na: answer.is_na(),
                confidence: answer.confidence,
                explanation: answer.explanation.clone(),
            })
        })
        .collect();
    tracing::info!(
        stage = "localize",
        video_id = vid,
        queries = queries.len(),
        duration_ms = t0.elapsed().as_millis() as u64,
        "video localized"
    );
    (preds, fallbacks)
}

/// Localize every NLQ query: per video digest, one batched prompt, parse,
/// clamp, pad and select. NA answers become the full clip.
pub fn cmd_localize(
    cfg: &PipelineConfig,
    llm: &dyn LlmBackend,
    embedder: &dyn Embedder,
) -> Result<RunSummary, PipelineError> {
    let mut run = Run::start(Command::Localize, cfg)?;
    let (corpus, queries) = load_inputs(cfg, true)?;
    let queries = queries.expect("queries loaded");
    let mut by_video: BTreeMap<String, Vec<&Query>> = BTreeMap::new();
    for q in queries.of_kind(QueryKind::Nlq) {
        by_video.entry(q.video_id.clone()).or_default().push(q);
    }
    let recorder = cfg
        .paths
        .record_transcripts
        .as_ref()
        .map(|_| RecordingLlm::new(llm));
    let llm: &dyn LlmBackend = match &recorder {
        Some(r) => r,
        None => llm,
    };
    let llm = Gate::new(llm, llm.single_flight());
    let embedder = Gate::new(embedder, embedder.single_flight());
    let scorer: Box<dyn CandidateScorer + '_> = match cfg.scorer.kind {
        ScorerKind::Heuristic => Box::new(HeuristicScorer::new(
            &embedder,
            cfg.scorer.relevance_threshold,
        )),
        ScorerKind::Replay => Box::new(ReplayScorer::load(
            cfg.scorer
                .scores
                .as_deref()
                .ok_or(ConfigError::MissingPath("scorer.scores"))?,
        )?),
    };
    run.backends.insert("llm", llm.kind());
    run.backends.insert("embedder", embedder.kind());
    run.backends.insert(
        "scorer",
        match cfg.scorer.kind {
            ScorerKind::Heuristic => "heuristic",
            ScorerKind::Replay => "replay",
        },
    );

    let nlq_all: Vec<&Query> = by_video.values().flatten().copied().collect();
    let probes = relevance_probes(nlq_all.iter().copied());
    let videos: Vec<&String> = by_video.keys().collect();
    let pool = worker_pool(cfg.in_flight_limit)?;
    let seed = run.seed;
    let (d, outcomes) = pool.install(|| {
        let d = digest_videos(&corpus, &probes, &videos, &embedder, &llm, cfg);
        let outcomes: Vec<_> = by_video
            .par_iter()
            .map(|(vid, qs)| localize_video(vid, qs, &corpus, &d, &llm, scorer.as_ref(), cfg, seed))
            .collect();
        (d, outcomes)
    });

    let mut preds = BTreeMap::new();
    let mut fallbacks = 0;
    for (video_preds, fb) in outcomes {
        fallbacks += fb;
        for p in video_preds {
            match p {
                Ok(p) => {
                    preds.insert(p.qid.clone(), p);
                }
                Err(f) => run.summary.failures.push(f),
            }
        }
    }
    let out = run.out.clone();
    run.output(out, &jsonl(preds.values()))?;
    save_recording(&mut run, recorder.as_ref())?;
    let total = d.total();
    run.summary.count("videos", by_video.len());
    run.summary.count("queries", nlq_all.len());
    run.summary.count("predictions", preds.len());
    run.summary
        .count("na", preds.values().filter(|p| p.na).count());
    run.summary.count("parse_fallbacks", fallbacks);
    run.summary.count("captions_in", total.input);
    run.summary.count("captions_after_digest", total.output);
    run.finish()
}

fn check_qids<A, B>(
    preds: &BTreeMap<String, A>,
    gts: &BTreeMap<String, B>,
) -> Result<(), PipelineError> {
    let without_gt: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .cloned()
        .collect();
    let without_prediction: Vec<String> = gts
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .cloned()
        .collect();
    if without_gt.is_empty() && without_prediction.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::QidMismatch {
            without_gt,
            without_prediction,
        })
    }
}

/// Score a predictions file against the ground truth in the queries file.
/// Every qid must appear on both sides.
pub fn cmd_eval(cfg: &PipelineConfig, split: Split) -> Result<RunSummary, PipelineError> {
    let mut run = Run::start(Command::Eval, cfg)?;
    let (_, queries) = load_inputs(cfg, true)?;
    let queries = queries.expect("queries loaded");
    let pred_path = cfg.paths.predictions.clone().expect("validated");
    let mut input = EvalInput::default();
    match split {
        Split::Qa => {
            let preds = read_qa_predictions(&pred_path)?;
            input.qa_gts = queries
                .of_kind(QueryKind::Qa)
                .filter_map(|q| q.gt_answer_idx().map(|i| (q.qid.clone(), i)))
                .collect();
            check_qids(&preds, &input.qa_gts)?;
            input.qa = preds
                .iter()
                .map(|(k, p)| (k.clone(), p.to_answer()))
                .collect();
        }
        Split::Nlq => {
            let preds = read_nlq_predictions(&pred_path)?;
            input.nlq_gts = queries
                .of_kind(QueryKind::Nlq)
                .filter_map(|q| q.gt_window().map(|w| (q.qid.clone(), w)))
                .collect();
            check_qids(&preds, &input.nlq_gts)?;
            input.nlq = preds
                .iter()
                .map(|(k, p)| (k.clone(), p.to_answer()))
                .collect();
            input.nlq_final = preds
                .iter()
                .map(|(k, p)| (k.clone(), p.predicted_window))
                .collect();
        }
    }
    let report = evaluate(&input)?;
    run.summary
        .count("predictions", input.qa.len() + input.nlq.len());
    if cfg.paths.output.is_some() {
        let out = run.out.clone();
        run.output(
            out,
            &serde_json::to_vec_pretty(&report).expect("report serializes"),
        )?;
        run.summary.report = Some(report);
        run.finish()
    } else {
        run.summary.report = Some(report);
        Ok(run.summary)
    }
}

/// Balanced labeled windows around every NLQ ground truth. Queries whose
/// video has no caption track are listed as failures.
pub fn cmd_gen_refine_data(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let mut run = Run::start(Command::GenRefineData, cfg)?;
    let (corpus, queries) = load_inputs(cfg, true)?;
    let queries = queries.expect("queries loaded");
    let mut gts = Vec::new();
    for q in queries.of_kind(QueryKind::Nlq) {
        let Some(window) = q.gt_window() else {
            continue;
        };
        match corpus.get(&q.video_id) {
            Some(t) => gts.push(GroundTruth {
                qid: q.qid.clone(),
                window,
                bounds: t.bounds(),
            }),
            None => run.summary.failures.push(Failure::new(
                "corpus",
                &q.video_id,
                Some(&q.qid),
                "no caption track for video",
            )),
        }
    }
    let pool = worker_pool(cfg.in_flight_limit)?;
    let samples = pool.install(|| gen_refinement_dataset(&gts, &cfg.refine, run.seed))?;
    let mut body = Vec::new();
    write_refinement_dataset(&mut body, &samples).map_err(io_err(&run.out))?;
    let out = run.out.clone();
    run.output(out, &body)?;
    run.summary.count("ground_truths", gts.len());
    run.summary.count("samples", samples.len());
    run.summary.count(
        "pos",
        samples.iter().filter(|s| s.label == Label::Pos).count(),
    );
    run.summary.count(
        "neg",
        samples.iter().filter(|s| s.label == Label::Neg).count(),
    );
    run.finish()
}
