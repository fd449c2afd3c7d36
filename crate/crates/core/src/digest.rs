//! Caption digest: condense a raw caption track before it reaches the LLM.
//!
//! 1. [`drop_uninformative`] removes captions containing blocklisted phrases.
//! 2. [`filter_by_relevance`] keeps captions similar enough to some query.
//! 3. [`group_consecutive`] chains neighbouring captions with similar embeddings.
//! 4. [`merge_groups`] replaces each chain by one caption over its hull.
//!
//! Every stage only removes or merges, so the caption count never grows and
//! every output caption is traceable to a contiguous run of input captions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::corpus::{normalize_text, Caption, CaptionTrack, Query};
use crate::error::{DigestError, LlmError};
use crate::reasoner::{CompletionRequest, LlmBackend};
use crate::retry::RetryPolicy;
use crate::similarity::{cosine, embed_batch, Embedder};

/// System prompt for merging a group of similar captions.
pub const MERGE_PROMPT: &str = "In this task, you will merge a list of captions into a single, concise caption. Focus on clarity and brevity while ensuring no critical details are lost in the merging process.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Llm,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DigestConfig {
    /// Lowercase phrases marking uninformative captions.
    pub blocklist: Vec<String>,
    /// Keep a caption iff its best cosine against the queries reaches this.
    /// `-1` keeps everything.
    pub relevance_threshold: f64,
    /// Chain neighbours whose cosine reaches this. Above 1 disables merging.
    pub adjacency_threshold: f64,
    pub max_merge_group: usize,
    pub merge_mode: MergeMode,
}

impl Default for DigestConfig {
    fn default() -> Self {
        Self {
            blocklist: vec!["looks around".into(), "looks at the camera".into()],
            relevance_threshold: 0.30,
            adjacency_threshold: 0.85,
            max_merge_group: 8,
            merge_mode: MergeMode::Llm,
        }
    }
}

impl DigestConfig {
    /// Config under which [`digest`] returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            blocklist: Vec::new(),
            relevance_threshold: -1.0,
            adjacency_threshold: 1.5,
            max_merge_group: 2,
            merge_mode: MergeMode::Concat,
        }
    }

    pub fn validate(&self) -> Result<(), DigestError> {
        if !(-1.0..=1.0).contains(&self.relevance_threshold) {
            return Err(DigestError::Config(format!(
                "relevance_threshold {} outside [-1, 1]",
                self.relevance_threshold
            )));
        }
        if !(self.adjacency_threshold.is_finite() && self.adjacency_threshold >= -1.0) {
            return Err(DigestError::Config(format!(
                "adjacency_threshold {} must be a number >= -1",
                self.adjacency_threshold
            )));
        }
        if self.max_merge_group < 2 {
            return Err(DigestError::Config(
                "max_merge_group must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Removal and merge counts for one track.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestStats {
    pub input: usize,
    pub dropped_uninformative: usize,
    pub dropped_irrelevant: usize,
    pub groups_merged: usize,
    /// Captions absorbed into another by merging (group size minus one, summed).
    pub merged_away: usize,
    pub merge_fallbacks: usize,
    pub output: usize,
}

impl DigestStats {
    /// `input == output + dropped_uninformative + dropped_irrelevant + merged_away`
    pub fn balances(&self) -> bool {
        self.input
            == self.output + self.dropped_uninformative + self.dropped_irrelevant + self.merged_away
    }

    pub fn accumulate(&mut self, other: &DigestStats) {
        self.input += other.input;
        self.dropped_uninformative += other.dropped_uninformative;
        self.dropped_irrelevant += other.dropped_irrelevant;
        self.groups_merged += other.groups_merged;
        self.merged_away += other.merged_away;
        self.merge_fallbacks += other.merge_fallbacks;
        self.output += other.output;
    }
}

/// A run of similar neighbours and its merge product.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeGroup {
    pub members: Range<usize>,
    pub merged_text: String,
    pub merged_interval: crate::interval::Interval,
}

/// Output unit of [`group_consecutive`]: an index into the track, or a
/// contiguous run of at least two indices to be merged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Single(usize),
    Group(Range<usize>),
}

pub fn drop_uninformative(track: &CaptionTrack, cfg: &DigestConfig) -> CaptionTrack {
    if cfg.blocklist.is_empty() {
        return track.clone();
    }
    let phrases: Vec<String> = cfg.blocklist.iter().map(|p| p.to_lowercase()).collect();
    let kept: Vec<Caption> = track
        .captions()
        .iter()
        .filter(|c| {
            let text = c.text().to_lowercase();
            !phrases.iter().any(|p| text.contains(p.as_str()))
        })
        .cloned()
        .collect();
    if kept.is_empty() && !track.is_empty() {
        tracing::warn!(
            video_id = track.video_id(),
            "every caption matched the blocklist"
        );
    }
    track.with_captions(kept)
}

fn texts(track: &CaptionTrack) -> Vec<String> {
    track
        .captions()
        .iter()
        .map(|c| c.text().to_string())
        .collect()
}

/// Keep captions whose best cosine against any query is at least the
/// relevance threshold.
pub fn filter_by_relevance(
    track: &CaptionTrack,
    queries: &[&Query],
    backend: &dyn Embedder,
    cfg: &DigestConfig,
) -> Result<CaptionTrack, DigestError> {
    if queries.is_empty() {
        return Err(DigestError::NoQueries);
    }
    if cfg.relevance_threshold <= -1.0 || track.is_empty() {
        return Ok(track.clone());
    }
    let caps = embed_batch(backend, &texts(track))?;
    let query_texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
    let qs = embed_batch(backend, &query_texts)?;
    let mut kept = Vec::new();
    for (c, e) in track.captions().iter().zip(&caps) {
        let mut best = f64::NEG_INFINITY;
        for q in &qs {
            best = best.max(cosine(e, q).map_err(|err| DigestError::Config(err.to_string()))?);
        }
        if best >= cfg.relevance_threshold {
            kept.push(c.clone());
        }
    }
    Ok(track.with_captions(kept))
}

/// Greedy left-to-right chaining: caption `i` joins the open group iff its
/// cosine with caption `i - 1` reaches the adjacency threshold and the group
/// is below `max_merge_group`.
pub fn group_consecutive(
    track: &CaptionTrack,
    backend: &dyn Embedder,
    cfg: &DigestConfig,
) -> Result<Vec<Segment>, DigestError> {
    let n = track.len();
    if cfg.adjacency_threshold > 1.0 || n < 2 {
        return Ok((0..n).map(Segment::Single).collect());
    }
    let e = embed_batch(backend, &texts(track))?;
    let mut runs: Vec<Range<usize>> = vec![Range { start: 0, end: 1 }];
    for i in 1..n {
        let sim = cosine(&e[i], &e[i - 1]).map_err(|err| DigestError::Config(err.to_string()))?;
        let open = runs.last_mut().expect("at least one run");
        if sim >= cfg.adjacency_threshold && open.len() < cfg.max_merge_group {
            open.end = i + 1;
        } else {
            runs.push(i..i + 1);
        }
    }
    Ok(runs
        .into_iter()
        .map(|r| {
            if r.len() == 1 {
                Segment::Single(r.start)
            } else {
                Segment::Group(r)
            }
        })
        .collect())
}

/// Distinct member texts joined with `"; "`, first occurrence order.
pub fn concat_merge(members: &[Caption]) -> String {
    let mut seen: Vec<&str> = Vec::new();
    for c in members {
        if !seen.contains(&c.text()) {
            seen.push(c.text());
        }
    }
    seen.join("; ")
}

fn merge_user_prompt(members: &[Caption]) -> String {
    let mut s = String::from("Captions:\n");
    for c in members {
        s.push_str("- ");
        s.push_str(c.text());
        s.push('\n');
    }
    s
}

fn llm_merge(
    members: &[Caption],
    llm: &dyn LlmBackend,
    retry: &RetryPolicy,
) -> Result<String, LlmError> {
    let user = merge_user_prompt(members);
    let req = CompletionRequest {
        system: MERGE_PROMPT,
        user: &user,
        seed: None,
        run_index: 0,
    };
    let text = retry.run(LlmError::is_retryable, |_| llm.complete(&req))?;
    let text = normalize_text(&text);
    if text.is_empty() {
        return Err(LlmError::Rejected("empty merge response".into()));
    }
    Ok(text)
}

/// Replace each group by a single caption spanning its hull. LLM failures
/// fall back to [`concat_merge`] for that group. Groups are merged in
/// parallel on the current rayon pool; output order does not depend on
/// completion order.
pub fn merge_groups(
    track: &CaptionTrack,
    segments: &[Segment],
    llm: &dyn LlmBackend,
    cfg: &DigestConfig,
    retry: &RetryPolicy,
) -> (CaptionTrack, Vec<MergeGroup>, usize) {
    let caps = track.captions();
    let merged: Vec<(MergeGroup, bool)> = segments
        .par_iter()
        .filter_map(|s| match s {
            Segment::Group(r) => Some(r.clone()),
            Segment::Single(_) => None,
        })
        .map(|r| {
            let members = &caps[r.clone()];
            let hull = members
                .iter()
                .map(Caption::interval)
                .reduce(|a, b| a.hull(&b))
                .expect("groups are non-empty");
            let (text, fell_back) = match cfg.merge_mode {
                MergeMode::Concat => (concat_merge(members), false),
                MergeMode::Llm => match llm_merge(members, llm, retry) {
                    Ok(t) => (t, false),
                    Err(e) => {
                        tracing::warn!(video_id = track.video_id(), error = %e, "merge fell back to concatenation");
                        (concat_merge(members), true)
                    }
                },
            };
            (
                MergeGroup {
                    members: r,
                    merged_text: text,
                    merged_interval: hull,
                },
                fell_back,
            )
        })
        .collect();

    let fallbacks = merged.iter().filter(|(_, f)| *f).count();
    let groups: Vec<MergeGroup> = merged.into_iter().map(|(g, _)| g).collect();
    let mut out: Vec<Caption> = segments
        .iter()
        .filter_map(|s| match s {
            Segment::Single(i) => Some(caps[*i].clone()),
            Segment::Group(_) => None,
        })
        .collect();
    out.extend(groups.iter().map(|g| {
        Caption::new(track.video_id(), g.merged_interval, &g.merged_text)
            .expect("merged text is non-empty")
    }));
    (track.with_captions(out), groups, fallbacks)
}

/// Run all four stages on one track. The relevance stage is skipped when no
/// queries are given.
pub fn digest(
    track: &CaptionTrack,
    queries: &[&Query],
    backend: &dyn Embedder,
    llm: &dyn LlmBackend,
    cfg: &DigestConfig,
    retry: &RetryPolicy,
) -> Result<(CaptionTrack, DigestStats), DigestError> {
    cfg.validate()?;
    let mut stats = DigestStats {
        input: track.len(),
        ..Default::default()
    };
    let informative = drop_uninformative(track, cfg);
    stats.dropped_uninformative = track.len() - informative.len();

    let relevant = if queries.is_empty() {
        informative
    } else {
        filter_by_relevance(&informative, queries, backend, cfg)?
    };
    stats.dropped_irrelevant = stats.input - stats.dropped_uninformative - relevant.len();

    let segments = group_consecutive(&relevant, backend, cfg)?;
    let (out, groups, fallbacks) = merge_groups(&relevant, &segments, llm, cfg, retry);
    stats.groups_merged = groups.len();
    stats.merged_away = groups.iter().map(|g| g.members.len() - 1).sum();
    stats.merge_fallbacks = fallbacks;
    stats.output = out.len();
    debug_assert!(stats.balances());
    tracing::info!(
        stage = "digest",
        video_id = track.video_id(),
        input = stats.input,
        output = stats.output,
        "track digested"
    );
    Ok((out, stats))
}
