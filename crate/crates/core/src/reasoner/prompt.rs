use std::fmt::Write;

use super::Prompt;
use crate::corpus::{normalize_text, CaptionTrack, Query, QueryKind};
use crate::error::PromptError;

/// Marker emitted in place of the caption log when a track is empty.
pub const NO_CAPTIONS: &str = "(no captions available)";

const LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

pub fn choice_letter(idx: usize) -> Option<char> {
    LETTERS.get(idx).copied()
}

const CONTEXT_PREAMBLE: &str = "\
You are reading the memory log of a first-person (egocentric) video. \
Each log line has the form `start-end: caption`, where start and end are seconds from the beginning of the video \
and \"C\" denotes the camera wearer. \
The captions were written automatically from short clips, so details can be missing or wrong. \
Imagine the visual scene behind the captions, use the whole log rather than only literal mentions, \
and combine separate pieces of evidence when they point to the same event.";

const QA_INSTRUCTIONS: &str = "\
You will answer one multiple-choice question about the video. Follow these steps:
1. Read the whole caption log and collect the lines that bear on the question.
2. Choose exactly one of the options A, B, C, D or E. If you are uncertain, still select the most plausible option; do not refuse.
3. Write one sentence explaining why you chose it.
4. Rate your confidence in the answer: 1 (low), 2 (medium) or 3 (high).

Reply with a JSON array inside a ```json fenced block, holding one object:
[{\"qid\": \"<qid>\", \"answer\": \"<A-E>\", \"explanation\": \"<one sentence>\", \"confidence\": <1, 2 or 3>}]";

const NLQ_INSTRUCTIONS: &str = "\
You will localize natural-language queries about past moments in the video. For each query:
1. Find the caption lines that could show the moment the query asks about.
2. Return the candidate time windows [start, end] in seconds where the answer is most likely visible, most likely first. Several candidates are allowed.
3. If the log gives no usable evidence for a query, return \"NA\" for its intervals instead of guessing.
4. Write one sentence explaining your prediction.
5. Rate your confidence: 1 (low), 2 (medium) or 3 (high).

Reply with a JSON array inside a ```json fenced block, one object per query:
[{\"qid\": \"<qid>\", \"intervals\": [[start, end], ...] or \"NA\", \"explanation\": \"<one sentence>\", \"confidence\": <1, 2 or 3>}]";

/// The caption log as `start-end: text` lines in time order.
pub fn caption_log(track: &CaptionTrack) -> String {
    if track.is_empty() {
        return format!("{NO_CAPTIONS}\n");
    }
    let mut out = String::new();
    for c in track.captions() {
        let _ = writeln!(out, "{}-{}: {}", c.start_s(), c.end_s(), c.text());
    }
    out
}

fn check_kind(q: &Query, expected: QueryKind) -> Result<(), PromptError> {
    if q.kind() != expected {
        return Err(PromptError::WrongKind {
            qid: q.qid.clone(),
            expected: expected.as_str(),
            found: q.kind().as_str(),
        });
    }
    Ok(())
}

/// One prompt per multiple-choice question. An empty track still yields a
/// prompt; the model is told no captions are available.
pub fn build_qa_prompt(track: &CaptionTrack, query: &Query) -> Result<Prompt, PromptError> {
    check_kind(query, QueryKind::Qa)?;
    let choices = query.choices().expect("QA query carries choices");
    let mut user = String::new();
    user.push_str("Caption log:\n");
    user.push_str(&caption_log(track));
    let _ = writeln!(
        user,
        "\nQuestion (qid {}): {}",
        query.qid,
        normalize_text(&query.text)
    );
    user.push_str("Options:\n");
    for (letter, choice) in LETTERS.iter().zip(choices) {
        let _ = writeln!(user, "{letter}. {}", normalize_text(choice));
    }
    Ok(Prompt {
        system_text: format!("{CONTEXT_PREAMBLE}\n\n{QA_INSTRUCTIONS}"),
        user_text: user,
        query_ids: vec![query.qid.clone()],
    })
}

/// One prompt carrying every given NLQ query of the same video.
pub fn build_nlq_prompt(track: &CaptionTrack, queries: &[&Query]) -> Result<Prompt, PromptError> {
    let first = queries.first().ok_or(PromptError::NoQueries)?;
    for q in queries {
        check_kind(q, QueryKind::Nlq)?;
        if q.video_id != first.video_id {
            return Err(PromptError::MixedVideo {
                expected: first.video_id.clone(),
                found: q.video_id.clone(),
            });
        }
    }
    if track.video_id() != first.video_id {
        return Err(PromptError::MixedVideo {
            expected: track.video_id().to_string(),
            found: first.video_id.clone(),
        });
    }
    let mut user = String::new();
    user.push_str("Caption log:\n");
    user.push_str(&caption_log(track));
    let _ = writeln!(
        user,
        "\nThe video spans {}-{} seconds.\nQueries:",
        track.bounds().start_s(),
        track.bounds().end_s()
    );
    for (i, q) in queries.iter().enumerate() {
        let _ = writeln!(
            user,
            "{}. (qid {}) {}",
            i + 1,
            q.qid,
            normalize_text(&q.text)
        );
    }
    Ok(Prompt {
        system_text: format!("{CONTEXT_PREAMBLE}\n\n{NLQ_INSTRUCTIONS}"),
        user_text: user,
        query_ids: queries.iter().map(|q| q.qid.clone()).collect(),
    })
}
