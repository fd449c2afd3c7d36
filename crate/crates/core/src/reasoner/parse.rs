//! Structured-output extraction.
//!
//! The model is asked for a JSON array of per-query objects inside a fenced
//! block, but real responses wrap it in prose, change the fence, or drop
//! fields. The parser scans for the first JSON value that looks like answer
//! entries and degrades field by field instead of failing the whole response.

use serde_json::{json, Map, Value};

use super::prompt::choice_letter;
use super::{Confidence, LlmAnswer};
use crate::corpus::QueryKind;
use crate::error::ParseError;
use crate::interval::Interval;

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    /// One answer per expected qid, in expected order.
    pub answers: Vec<LlmAnswer>,
    pub warnings: Vec<String>,
}

/// Keys that mark an object as an answer entry.
const ENTRY_KEYS: [&str; 6] = [
    "qid",
    "answer",
    "intervals",
    "interval",
    "confidence",
    "explanation",
];
const WRAPPER_KEYS: [&str; 4] = ["answers", "predictions", "results", "queries"];

fn is_entry(v: &Value) -> bool {
    v.as_object()
        .is_some_and(|o| ENTRY_KEYS.iter().any(|k| o.contains_key(*k)))
}

fn entries_of(v: Value) -> Option<Vec<Map<String, Value>>> {
    match v {
        Value::Array(items) if !items.is_empty() && items.iter().all(is_entry) => Some(
            items
                .into_iter()
                .filter_map(|i| match i {
                    Value::Object(o) => Some(o),
                    _ => None,
                })
                .collect(),
        ),
        Value::Object(mut o) => {
            for key in WRAPPER_KEYS {
                if let Some(inner) = o.remove(key) {
                    if let Some(found) = entries_of(inner) {
                        return Some(found);
                    }
                }
            }
            let v = Value::Object(o);
            if is_entry(&v) {
                match v {
                    Value::Object(o) => Some(vec![o]),
                    _ => unreachable!(),
                }
            } else {
                None
            }
        }
        _ => None,
    }
}

/// First JSON value in `raw` (scanning each `[` / `{` left to right) that
/// holds answer entries.
fn find_block(raw: &str) -> Option<Vec<Map<String, Value>>> {
    for (pos, ch) in raw.char_indices() {
        if ch != '[' && ch != '{' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if let Some(entries) = entries_of(v) {
                return Some(entries);
            }
        }
    }
    None
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|x| x.is_finite())
}

fn parse_confidence(v: Option<&Value>, qid: &str, warnings: &mut Vec<String>) -> Confidence {
    let Some(v) = v else {
        warnings.push(format!("{qid}: missing confidence, defaulting to 1"));
        return Confidence::LOW;
    };
    if let Value::String(s) = v {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => return Confidence::LOW,
            "medium" => return Confidence::MEDIUM,
            "high" => return Confidence::HIGH,
            _ => {}
        }
    }
    match number(v) {
        Some(x) => {
            let level = x.round().clamp(1.0, 3.0);
            if level != x {
                warnings.push(format!("{qid}: confidence {x} clamped to {level}"));
            }
            Confidence::new(level as u8).expect("clamped into range")
        }
        None => {
            warnings.push(format!("{qid}: unreadable confidence {v}, defaulting to 1"));
            Confidence::LOW
        }
    }
}

fn parse_letter(s: &str) -> Option<usize> {
    let mut t = s.trim();
    for prefix in ["option", "answer", "choice"] {
        if t.len() >= prefix.len() && t[..prefix.len()].eq_ignore_ascii_case(prefix) {
            t = t[prefix.len()..].trim_start_matches([' ', ':']);
        }
    }
    let t = t.trim_start_matches(['(', '[', '"', '\'']);
    let mut chars = t.chars();
    let first = chars.next()?;
    if chars.next().is_some_and(|c| c.is_alphanumeric()) {
        return None;
    }
    "ABCDE".find(first.to_ascii_uppercase())
}

fn is_na_text(s: &str) -> bool {
    let t = s.trim().to_ascii_uppercase();
    let t = t.trim_start_matches(['"', '\'']);
    ["NA", "N/A", "NONE", "NULL"]
        .iter()
        .any(|m| t.starts_with(m) && !t[m.len()..].starts_with(|c: char| c.is_ascii_alphanumeric()))
}

/// Text after the NA marker, e.g. "NA: captions never mention X".
fn na_remark(s: &str) -> String {
    let t = s.trim();
    let rest = t
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_alphabetic() || *c == '/'))
        .map(|(i, _)| &t[i..])
        .unwrap_or("");
    rest.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '—' | '–' | ':' | ','))
        .trim()
        .to_string()
}

fn parse_intervals(
    v: Option<&Value>,
    qid: &str,
    warnings: &mut Vec<String>,
    remark: &mut Option<String>,
) -> Vec<Interval> {
    let items = match v {
        None | Some(Value::Null) => {
            warnings.push(format!("{qid}: no intervals given, treating as NA"));
            return Vec::new();
        }
        Some(Value::String(s)) => {
            if !is_na_text(s) {
                warnings.push(format!("{qid}: unreadable intervals {s:?}, treating as NA"));
            } else {
                let r = na_remark(s);
                if !r.is_empty() {
                    *remark = Some(r);
                }
            }
            return Vec::new();
        }
        Some(Value::Array(items)) => items,
        Some(other) => {
            warnings.push(format!(
                "{qid}: unreadable intervals {other}, treating as NA"
            ));
            return Vec::new();
        }
    };
    // a bare [s, e] pair instead of a list of pairs
    let pairs: Vec<&Value> = if items.len() == 2 && items.iter().all(|x| number(x).is_some()) {
        vec![v.expect("matched above")]
    } else {
        items.iter().collect()
    };
    let mut out = Vec::new();
    for p in pairs {
        let ends = p
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((number(&a[0])?, number(&a[1])?)));
        match ends {
            Some((s, e)) if s < e => out.push(Interval::new(s, e).expect("checked s < e")),
            Some((s, e)) if s > e => {
                warnings.push(format!("{qid}: inverted interval [{s}, {e}] swapped"));
                out.push(Interval::new(e, s).expect("checked e < s"));
            }
            _ => warnings.push(format!("{qid}: dropped unreadable interval {p}")),
        }
    }
    out
}

fn parse_entry(
    entry: &Map<String, Value>,
    qid: &str,
    kind: QueryKind,
    raw: &str,
    warnings: &mut Vec<String>,
) -> LlmAnswer {
    let mut answer = LlmAnswer::fallback(qid, kind, raw);
    let mut remark = None;
    match kind {
        QueryKind::Qa => {
            answer.choice_idx = match entry.get("answer") {
                Some(Value::String(s)) => parse_letter(s),
                _ => None,
            };
            if answer.choice_idx.is_none() {
                warnings.push(format!("{qid}: no usable answer letter"));
            }
        }
        QueryKind::Nlq => {
            let v = entry.get("intervals").or_else(|| entry.get("interval"));
            answer.intervals = parse_intervals(v, qid, warnings, &mut remark);
        }
    }
    answer.explanation = match entry.get("explanation") {
        Some(Value::String(s)) => s.clone(),
        _ => {
            if let Some(r) = remark {
                r
            } else {
                warnings.push(format!("{qid}: missing explanation"));
                String::new()
            }
        }
    };
    answer.confidence = parse_confidence(entry.get("confidence"), qid, warnings);
    answer
}

/// Extract one answer per expected qid from a raw model response.
///
/// Entries are matched by `qid`; entries without one fill the remaining
/// expected qids positionally. Qids the response never mentions come back
/// as NA (NLQ) or unanswered (QA) at confidence 1 with a warning. Interval
/// endpoints are taken verbatim from the response, never invented.
pub fn parse_response(
    raw: &str,
    kind: QueryKind,
    expected_qids: &[String],
) -> Result<ParsedResponse, ParseError> {
    let entries = find_block(raw).ok_or_else(|| ParseError {
        reason: "no JSON answer entries found".into(),
        raw_text: raw.to_string(),
    })?;
    let mut warnings = Vec::new();
    let mut slots: Vec<Option<&Map<String, Value>>> = vec![None; expected_qids.len()];
    let mut unlabeled = Vec::new();
    for e in &entries {
        match e.get("qid") {
            Some(q) => {
                let q = match q {
                    Value::String(s) => s.trim().to_string(),
                    other => other.to_string(),
                };
                match expected_qids.iter().position(|x| *x == q) {
                    Some(i) if slots[i].is_none() => slots[i] = Some(e),
                    Some(_) => warnings.push(format!("{q}: duplicate entry ignored")),
                    None => warnings.push(format!("{q}: unexpected qid ignored")),
                }
            }
            None => unlabeled.push(e),
        }
    }
    let mut unlabeled = unlabeled.into_iter();
    for slot in slots.iter_mut().filter(|s| s.is_none()) {
        match unlabeled.next() {
            Some(e) => *slot = Some(e),
            None => break,
        }
    }
    if unlabeled.next().is_some() {
        warnings.push("extra unlabeled entries ignored".into());
    }

    let answers = expected_qids
        .iter()
        .zip(slots)
        .map(|(qid, slot)| match slot {
            Some(e) => parse_entry(e, qid, kind, raw, &mut warnings),
            None => {
                warnings.push(format!("{qid}: absent from response, defaulting to NA"));
                LlmAnswer::fallback(qid, kind, raw)
            }
        })
        .collect();
    for w in &warnings {
        tracing::warn!(warning = %w, "response parse");
    }
    Ok(ParsedResponse { answers, warnings })
}

/// Canonical structured block for `answers`, as the model is asked to emit it.
pub fn format_reference(answers: &[LlmAnswer]) -> String {
    let entries: Vec<Value> = answers
        .iter()
        .map(|a| {
            let mut m = Map::new();
            m.insert("qid".into(), json!(a.qid));
            match a.kind {
                QueryKind::Qa => {
                    let letter = a.choice_idx.and_then(choice_letter).map(String::from);
                    m.insert("answer".into(), json!(letter));
                }
                QueryKind::Nlq => {
                    let iv = if a.intervals.is_empty() {
                        json!("NA")
                    } else {
                        json!(a.intervals)
                    };
                    m.insert("intervals".into(), iv);
                }
            }
            m.insert("explanation".into(), json!(a.explanation));
            m.insert("confidence".into(), json!(a.confidence.level()));
            Value::Object(m)
        })
        .collect();
    let body = serde_json::to_string_pretty(&entries).expect("answers serialize");
    format!("```json\n{body}\n```\n")
}
