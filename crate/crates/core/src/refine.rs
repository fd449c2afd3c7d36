//! NLQ interval refinement.
//!
//! Candidate windows from the LLM are widened by `pad_alpha` seconds on each
//! side and clamped to the clip, one candidate is chosen by a pluggable
//! [`CandidateScorer`], and NA answers fall back to the whole clip. The
//! module also generates labeled windows for training an external
//! candidate-selection classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use crate::corpus::{CaptionTrack, Query, QueryKind};
use crate::error::{RefineError, ScoreError};
use crate::interval::{round_ms, Interval};
use crate::metrics::iou;
use crate::reasoner::LlmAnswer;
use crate::seeding;
use crate::similarity::{cosine, embed_batch, Embedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Seconds added on each side of a candidate.
    pub pad_alpha: f64,
    /// Jittered windows shift their centre uniformly within ± this many seconds.
    pub jitter_shift_max: f64,
    /// Jittered windows scale the ground-truth duration by a factor drawn from this range.
    pub jitter_scale_range: (f64, f64),
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Positive (and negative) samples drawn per ground-truth window.
    pub samples_per_gt: usize,
    /// Jitter draws allowed per ground-truth window before giving up.
    pub max_attempts: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            pad_alpha: 10.0,
            jitter_shift_max: 30.0,
            jitter_scale_range: (0.5, 2.0),
            pos_iou: 0.5,
            neg_iou: 0.1,
            samples_per_gt: 4,
            max_attempts: 10_000,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: &str| Err(RefineError::Config(m.to_string()));
        let (lo, hi) = self.jitter_scale_range;
        if !(self.pad_alpha >= 0.0 && self.pad_alpha.is_finite()) {
            return bad("pad_alpha must be a non-negative number");
        }
        if !(self.jitter_shift_max >= 0.0 && self.jitter_shift_max.is_finite()) {
            return bad("jitter_shift_max must be a non-negative number");
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("jitter_scale_range must satisfy 0 < low <= high");
        }
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return bad("thresholds must satisfy 0 <= neg_iou < pos_iou <= 1");
        }
        if self.samples_per_gt == 0 || self.max_attempts == 0 {
            return bad("samples_per_gt and max_attempts must be positive");
        }
        Ok(())
    }
}

/// `(max(s_i - α, s), min(e_i + α, e))`, rounded to milliseconds.
pub fn pad_interval(
    c: &Interval,
    cfg: &RefineConfig,
    bounds: &Interval,
) -> Result<Interval, RefineError> {
    let start = round_ms((c.start_s() - cfg.pad_alpha).max(bounds.start_s()));
    let end = round_ms((c.end_s() + cfg.pad_alpha).min(bounds.end_s()));
    Interval::new(start, end).map_err(|_| RefineError::Degenerate {
        start_s: start,
        end_s: end,
    })
}

/// Scores a padded candidate window for a query; higher is better.
pub trait CandidateScorer: Send + Sync {
    fn score(
        &self,
        query: &Query,
        window: &Interval,
        track: &CaptionTrack,
    ) -> Result<f64, ScoreError>;
}

/// Deterministic stand-in for a learned classifier: the number of seconds
/// of query-relevant captions that fall inside the window.
pub struct HeuristicScorer<'a> {
    embedder: &'a dyn Embedder,
    relevance_threshold: f64,
    relevant: Mutex<HashMap<(String, String), Vec<bool>>>,
}

impl<'a> HeuristicScorer<'a> {
    pub fn new(embedder: &'a dyn Embedder, relevance_threshold: f64) -> Self {
        Self {
            embedder,
            relevance_threshold,
            relevant: Mutex::new(HashMap::new()),
        }
    }

    fn relevance_mask(&self, query: &Query, track: &CaptionTrack) -> Result<Vec<bool>, ScoreError> {
        let key = (track.video_id().to_string(), query.qid.clone());
        if let Some(m) = self
            .relevant
            .lock()
            .expect("scorer cache poisoned")
            .get(&key)
        {
            return Ok(m.clone());
        }
        let mut texts: Vec<String> = vec![query.text.clone()];
        texts.extend(track.captions().iter().map(|c| c.text().to_string()));
        let e =
            embed_batch(self.embedder, &texts).map_err(|e| ScoreError::Backend(e.to_string()))?;
        let mask = e[1..]
            .iter()
            .map(|c| {
                cosine(c, &e[0])
                    .map(|s| s >= self.relevance_threshold)
                    .map_err(|e| ScoreError::Backend(e.to_string()))
            })
            .collect::<Result<Vec<bool>, _>>()?;
        self.relevant
            .lock()
            .expect("scorer cache poisoned")
            .insert(key, mask.clone());
        Ok(mask)
    }
}

impl CandidateScorer for HeuristicScorer<'_> {
    fn score(
        &self,
        query: &Query,
        window: &Interval,
        track: &CaptionTrack,
    ) -> Result<f64, ScoreError> {
        if track.is_empty() {
            return Ok(0.0);
        }
        let mask = self.relevance_mask(query, track)?;
        Ok(track
            .captions()
            .iter()
            .zip(mask)
            .filter(|(_, keep)| *keep)
            .map(|(c, _)| c.interval().intersection_len(window))
            .sum())
    }
}

fn ms_key(x: f64) -> i64 {
    (x * 1000.0).round() as i64
}

/// Replays externally computed scores keyed by `(qid, window)` at
/// millisecond resolution.
#[derive(Debug, Clone, Default)]
pub struct ReplayScorer {
    scores: HashMap<(String, i64, i64), f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRecord {
    qid: String,
    start_s: f64,
    end_s: f64,
    score: f64,
}

impl ReplayScorer {
    pub fn insert(&mut self, qid: &str, window: &Interval, score: f64) {
        self.scores.insert(
            (
                qid.to_string(),
                ms_key(window.start_s()),
                ms_key(window.end_s()),
            ),
            score,
        );
    }

    /// Load `{"qid", "start_s", "end_s", "score"}` records, one per line.
    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let file = std::fs::File::open(path)
            .map_err(|e| ScoreError::Backend(format!("{}: {e}", path.display())))?;
        let mut out = Self::default();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ScoreError::Backend(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ScoreRecord = serde_json::from_str(&line)
                .map_err(|e| ScoreError::Backend(format!("line {}: {e}", i + 1)))?;
            out.scores
                .insert((r.qid, ms_key(r.start_s), ms_key(r.end_s)), r.score);
        }
        Ok(out)
    }
}

impl CandidateScorer for ReplayScorer {
    fn score(
        &self,
        query: &Query,
        window: &Interval,
        _track: &CaptionTrack,
    ) -> Result<f64, ScoreError> {
        self.scores
            .get(&(
                query.qid.clone(),
                ms_key(window.start_s()),
                ms_key(window.end_s()),
            ))
            .copied()
            .ok_or_else(|| ScoreError::Missing {
                qid: query.qid.clone(),
                start_s: window.start_s(),
                end_s: window.end_s(),
            })
    }
}

fn earliest(windows: &[Interval]) -> Interval {
    *windows
        .iter()
        .min_by(|a, b| {
            a.start_s()
                .total_cmp(&b.start_s())
                .then(a.end_s().total_cmp(&b.end_s()))
        })
        .expect("non-empty candidate list")
}

/// Final window for one NLQ answer.
///
/// NA becomes the full clip, a single candidate is padded, and several
/// padded candidates go to `scorer` (argmax, ties to the earliest start).
/// If the scorer fails the earliest candidate is used.
pub fn select_candidate(
    answer: &LlmAnswer,
    query: &Query,
    track: &CaptionTrack,
    scorer: &dyn CandidateScorer,
    cfg: &RefineConfig,
) -> Result<Interval, RefineError> {
    if answer.kind != QueryKind::Nlq {
        return Err(RefineError::NotNlq {
            qid: answer.qid.clone(),
        });
    }
    let bounds = track.bounds();
    let padded: Vec<Interval> = answer
        .intervals
        .iter()
        .filter_map(|c| match pad_interval(c, cfg, &bounds) {
            Ok(p) => Some(p),
            Err(_) => {
                tracing::warn!(qid = %answer.qid, candidate = %c, "candidate outside clip dropped");
                None
            }
        })
        .collect();
    match padded.len() {
        0 => Ok(bounds),
        1 => Ok(padded[0]),
        _ => {
            let scores: Result<Vec<f64>, ScoreError> = padded
                .iter()
                .map(|w| {
                    scorer.score(query, w, track).and_then(|s| {
                        if s.is_nan() {
                            Err(ScoreError::Backend("NaN score".into()))
                        } else {
                            Ok(s)
                        }
                    })
                })
                .collect();
            match scores {
                Ok(scores) => {
                    let mut best = 0;
                    for i in 1..padded.len() {
                        let better = scores[i] > scores[best]
                            || (scores[i] == scores[best]
                                && padded[i].start_s() < padded[best].start_s());
                        if better {
                            best = i;
                        }
                    }
                    Ok(padded[best])
                }
                Err(e) => {
                    tracing::warn!(qid = %answer.qid, error = %e, "scorer failed, using earliest candidate");
                    Ok(earliest(&padded))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pos,
    Neg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSample {
    pub query_id: String,
    pub interval: Interval,
    pub label: Label,
    pub iou_to_gt: f64,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    qid: String,
    start_s: f64,
    end_s: f64,
    label: Label,
    iou: f64,
}

/// One labeled-window request: query id, ground-truth window, clip bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub qid: String,
    pub window: Interval,
    pub bounds: Interval,
}

/// Label a window by its IoU with the ground truth; `None` in the dead zone
/// `[neg_iou, pos_iou]`.
pub fn label_for(iou_to_gt: f64, cfg: &RefineConfig) -> Option<Label> {
    if iou_to_gt > cfg.pos_iou {
        Some(Label::Pos)
    } else if iou_to_gt < cfg.neg_iou {
        Some(Label::Neg)
    } else {
        None
    }
}

fn jitter_one(
    gt: &GroundTruth,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<Vec<RefinementSample>, RefineError> {
    if !gt.bounds.contains(&gt.window) {
        return Err(RefineError::GroundTruthOutOfBounds {
            qid: gt.qid.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::for_key(
        seeding::for_index(seed, seeding::JITTER_STREAM),
        &gt.qid,
    ));
    let want = cfg.samples_per_gt;
    let (lo, hi) = cfg.jitter_scale_range;
    let centre = (gt.window.start_s() + gt.window.end_s()) / 2.0;
    let mut pos = Vec::with_capacity(want);
    let mut neg = Vec::with_capacity(want);
    let mut attempts = 0;
    while pos.len() < want || neg.len() < want {
        if attempts == cfg.max_attempts {
            return Err(RefineError::BudgetExhausted {
                qid: gt.qid.clone(),
                attempts,
                pos: pos.len(),
                neg: neg.len(),
            });
        }
        attempts += 1;
        let shift = rng.random_range(-cfg.jitter_shift_max..=cfg.jitter_shift_max);
        let scale = rng.random_range(lo..=hi);
        let half = gt.window.duration() * scale / 2.0;
        let start = round_ms((centre + shift - half).max(gt.bounds.start_s()));
        let end = round_ms((centre + shift + half).min(gt.bounds.end_s()));
        let Ok(window) = Interval::new(start, end) else {
            continue;
        };
        let score = iou(&window, &gt.window);
        let sample = |label| RefinementSample {
            query_id: gt.qid.clone(),
            interval: window,
            label,
            iou_to_gt: score,
        };
        match label_for(score, cfg) {
            Some(Label::Pos) if pos.len() < want => pos.push(sample(Label::Pos)),
            Some(Label::Neg) if neg.len() < want => neg.push(sample(Label::Neg)),
            _ => {}
        }
    }
    pos.extend(neg);
    Ok(pos)
}

/// Balanced positive/negative windows around each ground truth.
///
/// Each query draws from its own stream seeded by `seed` and its qid, so
/// output is independent of thread count and of the other queries.
pub fn gen_refinement_dataset(
    gts: &[GroundTruth],
    cfg: &RefineConfig,
    seed: u64,
) -> Result<Vec<RefinementSample>, RefineError> {
    cfg.validate()?;
    let per_gt: Vec<Vec<RefinementSample>> = gts
        .par_iter()
        .map(|gt| jitter_one(gt, cfg, seed))
        .collect::<Result<_, _>>()?;
    Ok(per_gt.into_iter().flatten().collect())
}

/// One JSON record per line: `{"qid","start_s","end_s","label","iou"}`.
pub fn write_refinement_dataset<W: Write>(
    mut out: W,
    samples: &[RefinementSample],
) -> std::io::Result<()> {
    for s in samples {
        let rec = SampleRecord {
            qid: s.query_id.clone(),
            start_s: s.interval.start_s(),
            end_s: s.interval.end_s(),
            label: s.label,
            iou: s.iou_to_gt,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
