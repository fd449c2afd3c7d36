//! Caption tracks and query sets: the data model every stage consumes.
//!
//! Both live on disk as line-delimited JSON. A captions file mixes caption
//! records with optional per-video bounds records:
//!
//! ```text
//! {"video_id": "v1", "clip_start_s": 0, "clip_end_s": 480}
//! {"video_id": "v1", "start_s": 0, "end_s": 2, "text": "C opens the fridge"}
//! ```
//!
//! Timestamps are rounded to milliseconds on ingest and compared exactly.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::CorpusError;
use crate::interval::{round_ms, Interval};

/// Newlines collapse to single spaces; surrounding whitespace is trimmed.
pub fn normalize_text(text: &str) -> String {
    text.split(['\n', '\r'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// One timestamped description of a short clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    video_id: String,
    interval: Interval,
    text: String,
}

impl Caption {
    /// Returns `None` if the normalized text is empty.
    pub fn new(video_id: impl Into<String>, interval: Interval, text: &str) -> Option<Self> {
        let text = normalize_text(text);
        if text.is_empty() {
            return None;
        }
        Some(Self {
            video_id: video_id.into(),
            interval,
            text,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn start_s(&self) -> f64 {
        self.interval.start_s()
    }

    pub fn end_s(&self) -> f64 {
        self.interval.end_s()
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// All captions of one video, sorted by `(start, end, input order)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTrack {
    video_id: String,
    bounds: Interval,
    captions: Vec<Caption>,
}

impl CaptionTrack {
    /// Sorts `captions` and checks each one against `bounds`.
    pub fn new(
        video_id: impl Into<String>,
        bounds: Interval,
        mut captions: Vec<Caption>,
    ) -> Result<Self, CorpusError> {
        let video_id = video_id.into();
        for c in &captions {
            if !bounds.contains(&c.interval) || c.video_id != video_id {
                return Err(CorpusError::OutOfBounds {
                    video_id: c.video_id.clone(),
                    start_s: c.start_s(),
                    end_s: c.end_s(),
                    clip_start_s: bounds.start_s(),
                    clip_end_s: bounds.end_s(),
                });
            }
        }
        sort_captions(&mut captions);
        Ok(Self {
            video_id,
            bounds,
            captions,
        })
    }

    /// Same video and bounds, different captions. Panics if a caption
    /// escapes the bounds, which would be a bug in the calling stage.
    pub fn with_captions(&self, captions: Vec<Caption>) -> Self {
        Self::new(self.video_id.clone(), self.bounds, captions)
            .expect("derived captions stay within the parent track bounds")
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    /// Clip bounds `(s, e)`.
    pub fn bounds(&self) -> Interval {
        self.bounds
    }

    pub fn captions(&self) -> &[Caption] {
        &self.captions
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

fn sort_captions(captions: &mut [Caption]) {
    // stable: equal (start, end) keep input order
    captions.sort_by(|a, b| {
        a.start_s()
            .total_cmp(&b.start_s())
            .then(a.end_s().total_cmp(&b.end_s()))
    });
}

/// Caption tracks keyed by video id.
pub type Corpus = BTreeMap<String, CaptionTrack>;

/// Result of [`load_captions`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCaptions {
    pub tracks: Corpus,
    /// Exact duplicate records dropped during load.
    pub duplicates_removed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionRecord {
    video_id: String,
    start_s: f64,
    end_s: f64,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundsRecord {
    video_id: String,
    clip_start_s: f64,
    clip_end_s: f64,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_object(line: usize, raw: &str) -> Result<Map<String, Value>, CorpusError> {
    match serde_json::from_str::<Value>(raw) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CorpusError::Malformed {
            line,
            reason: "expected a JSON object".into(),
        }),
        Err(e) => Err(CorpusError::Malformed {
            line,
            reason: e.to_string(),
        }),
    }
}

fn timestamp(line: usize, v: f64) -> Result<f64, CorpusError> {
    if !v.is_finite() {
        return Err(CorpusError::Malformed {
            line,
            reason: "non-finite timestamp".into(),
        });
    }
    let v = round_ms(v);
    if v < 0.0 {
        return Err(CorpusError::NegativeTime { line });
    }
    Ok(v)
}

/// Load a captions file, grouping by video.
pub fn load_captions(path: &Path) -> Result<LoadedCaptions, CorpusError> {
    parse_captions(read_lines(path)?)
}

/// Parse captions from in-memory lines (1-based numbering).
pub fn parse_captions_str(text: &str) -> Result<LoadedCaptions, CorpusError> {
    parse_captions(
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.to_string()))
            .collect(),
    )
}

fn parse_captions(lines: Vec<(usize, String)>) -> Result<LoadedCaptions, CorpusError> {
    let mut captions: BTreeMap<String, Vec<Caption>> = BTreeMap::new();
    let mut bounds: HashMap<String, Interval> = HashMap::new();
    let mut seen: HashSet<(String, u64, u64, String)> = HashSet::new();
    let mut duplicates_removed = 0;

    for (line, raw) in lines {
        let obj = parse_object(line, &raw)?;
        let malformed = |e: serde_json::Error| CorpusError::Malformed {
            line,
            reason: e.to_string(),
        };
        if obj.contains_key("clip_start_s") || obj.contains_key("clip_end_s") {
            let rec: BoundsRecord =
                serde_json::from_value(Value::Object(obj)).map_err(malformed)?;
            let s = timestamp(line, rec.clip_start_s)?;
            let e = timestamp(line, rec.clip_end_s)?;
            let b = Interval::new(s, e).map_err(|_| CorpusError::InvertedInterval { line })?;
            if let Some(prev) = bounds.get(&rec.video_id) {
                if *prev != b {
                    return Err(CorpusError::ConflictingBounds {
                        video_id: rec.video_id,
                        line,
                    });
                }
            }
            captions.entry(rec.video_id.clone()).or_default();
            bounds.insert(rec.video_id, b);
        } else {
            let rec: CaptionRecord =
                serde_json::from_value(Value::Object(obj)).map_err(malformed)?;
            let s = timestamp(line, rec.start_s)?;
            let e = timestamp(line, rec.end_s)?;
            let interval =
                Interval::new(s, e).map_err(|_| CorpusError::InvertedInterval { line })?;
            let caption = Caption::new(rec.video_id.clone(), interval, &rec.text)
                .ok_or(CorpusError::EmptyText { line })?;
            let key = (
                rec.video_id.clone(),
                s.to_bits(),
                e.to_bits(),
                caption.text.clone(),
            );
            if !seen.insert(key) {
                duplicates_removed += 1;
                continue;
            }
            captions.entry(rec.video_id).or_default().push(caption);
        }
    }

    if duplicates_removed > 0 {
        tracing::warn!(
            duplicates_removed,
            "dropped exact duplicate caption records"
        );
    }

    let mut tracks = BTreeMap::new();
    for (video_id, caps) in captions {
        let b = match bounds.get(&video_id) {
            Some(b) => *b,
            None => caps
                .iter()
                .map(Caption::interval)
                .reduce(|a, b| a.hull(&b))
                .expect("a video without bounds has at least one caption"),
        };
        let track = CaptionTrack::new(video_id.clone(), b, caps)?;
        tracks.insert(video_id, track);
    }
    Ok(LoadedCaptions {
        tracks,
        duplicates_removed,
    })
}

/// Serialize tracks in the captions file format, bounds record first.
///
/// Loading the output reproduces the tracks exactly.
pub fn write_captions<'a, W: Write>(
    mut out: W,
    tracks: impl IntoIterator<Item = &'a CaptionTrack>,
) -> std::io::Result<()> {
    for track in tracks {
        let b = BoundsRecord {
            video_id: track.video_id.clone(),
            clip_start_s: track.bounds.start_s(),
            clip_end_s: track.bounds.end_s(),
        };
        serde_json::to_writer(&mut out, &b)?;
        out.write_all(b"\n")?;
        for c in &track.captions {
            let rec = CaptionRecord {
                video_id: c.video_id.clone(),
                start_s: c.start_s(),
                end_s: c.end_s(),
                text: c.text.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Qa,
    Nlq,
}

impl QueryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryKind::Qa => "qa",
            QueryKind::Nlq => "nlq",
        }
    }
}

/// Five-way multiple choice or natural-language localization.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryBody {
    Qa {
        choices: [String; 5],
        answer_idx: Option<usize>,
    },
    Nlq {
        gt_window: Option<Interval>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub qid: String,
    pub video_id: String,
    pub text: String,
    pub body: QueryBody,
}

impl Query {
    pub fn qa(
        qid: impl Into<String>,
        video_id: impl Into<String>,
        question: &str,
        choices: [String; 5],
        answer_idx: Option<usize>,
    ) -> Self {
        Self {
            qid: qid.into(),
            video_id: video_id.into(),
            text: normalize_text(question),
            body: QueryBody::Qa {
                choices: choices.map(|c| normalize_text(&c)),
                answer_idx,
            },
        }
    }

    pub fn nlq(
        qid: impl Into<String>,
        video_id: impl Into<String>,
        query: &str,
        gt_window: Option<Interval>,
    ) -> Self {
        Self {
            qid: qid.into(),
            video_id: video_id.into(),
            text: normalize_text(query),
            body: QueryBody::Nlq { gt_window },
        }
    }

    pub fn kind(&self) -> QueryKind {
        match self.body {
            QueryBody::Qa { .. } => QueryKind::Qa,
            QueryBody::Nlq { .. } => QueryKind::Nlq,
        }
    }

    pub fn choices(&self) -> Option<&[String; 5]> {
        match &self.body {
            QueryBody::Qa { choices, .. } => Some(choices),
            QueryBody::Nlq { .. } => None,
        }
    }

    pub fn gt_answer_idx(&self) -> Option<usize> {
        match self.body {
            QueryBody::Qa { answer_idx, .. } => answer_idx,
            QueryBody::Nlq { .. } => None,
        }
    }

    pub fn gt_window(&self) -> Option<Interval> {
        match self.body {
            QueryBody::Nlq { gt_window } => gt_window,
            QueryBody::Qa { .. } => None,
        }
    }

    fn to_record(&self) -> Value {
        let mut m = Map::new();
        m.insert("qid".into(), self.qid.clone().into());
        m.insert("video_id".into(), self.video_id.clone().into());
        m.insert("kind".into(), self.kind().as_str().into());
        match &self.body {
            QueryBody::Qa {
                choices,
                answer_idx,
            } => {
                m.insert("question".into(), self.text.clone().into());
                m.insert("choices".into(), choices.to_vec().into());
                if let Some(i) = answer_idx {
                    m.insert("answer_idx".into(), (*i).into());
                }
            }
            QueryBody::Nlq { gt_window } => {
                m.insert("query".into(), self.text.clone().into());
                if let Some(w) = gt_window {
                    m.insert("gt".into(), vec![w.start_s(), w.end_s()].into());
                }
            }
        }
        Value::Object(m)
    }
}

/// Queries in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    queries: Vec<Query>,
}

impl QuerySet {
    pub fn new(queries: Vec<Query>) -> Self {
        Self { queries }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.queries.iter()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn get(&self, qid: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.qid == qid)
    }

    pub fn of_kind(&self, kind: QueryKind) -> impl Iterator<Item = &Query> {
        self.queries.iter().filter(move |q| q.kind() == kind)
    }

    /// Queries grouped by video, file order kept within each group.
    pub fn by_video(&self) -> BTreeMap<&str, Vec<&Query>> {
        let mut out: BTreeMap<&str, Vec<&Query>> = BTreeMap::new();
        for q in &self.queries {
            out.entry(q.video_id.as_str()).or_default().push(q);
        }
        out
    }

    /// Ground-truth windows must lie inside their track's clip bounds.
    /// Queries whose video has no track are not checked.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<(), CorpusError> {
        for q in &self.queries {
            if let (Some(w), Some(track)) = (q.gt_window(), corpus.get(&q.video_id)) {
                if !track.bounds().contains(&w) {
                    return Err(CorpusError::GroundTruthOutOfBounds {
                        qid: q.qid.clone(),
                        video_id: q.video_id.clone(),
                        start_s: w.start_s(),
                        end_s: w.end_s(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a QuerySet {
    type Item = &'a Query;
    type IntoIter = std::slice::Iter<'a, Query>;
    fn into_iter(self) -> Self::IntoIter {
        self.queries.iter()
    }
}

pub fn load_queries(path: &Path) -> Result<QuerySet, CorpusError> {
    parse_queries(read_lines(path)?)
}

pub fn parse_queries_str(text: &str) -> Result<QuerySet, CorpusError> {
    parse_queries(
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.to_string()))
            .collect(),
    )
}

fn str_field(obj: &Map<String, Value>, key: &str, line: usize) -> Result<String, CorpusError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(CorpusError::Malformed {
            line,
            reason: format!("field {key:?} must be a string"),
        }),
        None => Err(CorpusError::Malformed {
            line,
            reason: format!("missing field {key:?}"),
        }),
    }
}

fn parse_query(line: usize, obj: &Map<String, Value>) -> Result<Query, CorpusError> {
    let qid = str_field(obj, "qid", line)?;
    let video_id = str_field(obj, "video_id", line)?;
    let kind = str_field(obj, "kind", line)?;
    match kind.as_str() {
        "qa" => {
            let question = str_field(obj, "question", line)?;
            let choices = match obj.get("choices") {
                Some(Value::Array(items)) => items
                    .iter()
                    .map(|v| v.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| CorpusError::Malformed {
                        line,
                        reason: "choices must be strings".into(),
                    })?,
                Some(_) => {
                    return Err(CorpusError::Malformed {
                        line,
                        reason: "choices must be an array".into(),
                    })
                }
                None => Vec::new(),
            };
            let found = choices.len();
            let choices: [String; 5] = choices
                .try_into()
                .map_err(|_| CorpusError::ChoiceCount { line, found })?;
            let answer_idx = match obj.get("answer_idx") {
                None | Some(Value::Null) => None,
                Some(v) => match v.as_u64() {
                    Some(i) if i < 5 => Some(i as usize),
                    _ => {
                        return Err(CorpusError::Malformed {
                            line,
                            reason: "answer_idx must be an integer in 0..=4".into(),
                        })
                    }
                },
            };
            Ok(Query::qa(qid, video_id, &question, choices, answer_idx))
        }
        "nlq" => {
            if matches!(obj.get("choices"), Some(v) if !v.is_null()) {
                return Err(CorpusError::NlqWithChoices { line });
            }
            let text = str_field(obj, "query", line)?;
            let gt = match obj.get("gt") {
                None | Some(Value::Null) => None,
                Some(v) => {
                    let pair: [f64; 2] =
                        serde_json::from_value(v.clone()).map_err(|_| CorpusError::Malformed {
                            line,
                            reason: "gt must be [start, end]".into(),
                        })?;
                    let s = timestamp(line, pair[0])?;
                    let e = timestamp(line, pair[1])?;
                    Some(Interval::new(s, e).map_err(|_| CorpusError::InvertedInterval { line })?)
                }
            };
            Ok(Query::nlq(qid, video_id, &text, gt))
        }
        other => Err(CorpusError::UnknownKind {
            line,
            kind: other.to_string(),
        }),
    }
}

fn parse_queries(lines: Vec<(usize, String)>) -> Result<QuerySet, CorpusError> {
    let mut queries = Vec::with_capacity(lines.len());
    let mut qids = HashSet::new();
    for (line, raw) in lines {
        let obj = parse_object(line, &raw)?;
        let q = parse_query(line, &obj)?;
        if !qids.insert(q.qid.clone()) {
            return Err(CorpusError::DuplicateQid { line, qid: q.qid });
        }
        queries.push(q);
    }
    Ok(QuerySet { queries })
}

/// Serialize queries in the queries file format.
pub fn write_queries<'a, W: Write>(
    mut out: W,
    queries: impl IntoIterator<Item = &'a Query>,
) -> std::io::Result<()> {
    for q in queries {
        serde_json::to_writer(&mut out, &q.to_record())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
