//! Synthetic benchmarks and a rule-based stand-in for the LLM.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use egomem::config::PipelineConfig;
use egomem::corpus::{write_captions, write_queries};
use egomem::digest::MERGE_PROMPT;
use egomem::error::LlmError;
use egomem::reasoner::{CompletionRequest, FnLlm};
use egomem::{Caption, CaptionTrack, Interval, Query};

pub type ScriptedLlm = FnLlm<fn(&CompletionRequest<'_>) -> Result<String, LlmError>>;

pub const OBJECTS: [&str; 20] = [
    "the red cup",
    "a wooden spoon",
    "the blue towel",
    "a metal bowl",
    "the green apple",
    "a paper bag",
    "the black kettle",
    "a glass jar",
    "the yellow sponge",
    "a white plate",
    "the silver knife",
    "a plastic bottle",
    "the orange peeler",
    "a cutting board",
    "the frying pan",
    "a tea bag",
    "the salt shaker",
    "a dish rack",
    "the rice cooker",
    "a soup ladle",
];

pub const VERBS: [&str; 5] = ["picks up", "washes", "puts down", "inspects", "carries"];

pub const FILLERS: [&str; 8] = [
    "C walks across the kitchen",
    "C stands by the counter",
    "C looks around the room",
    "C turns to the left",
    "C talks to a person",
    "C scratches the head",
    "C walks to the window",
    "C looks at the camera",
];

pub const EVENTS: [&str; 8] = [
    "opens the fridge door",
    "pours water into the kettle",
    "cuts the onion",
    "throws the bag in the bin",
    "switches on the stove",
    "wipes the table",
    "closes the cabinet",
    "hangs the towel",
];

fn cap(video: &str, start: f64, text: &str) -> Caption {
    Caption::new(video, Interval::new(start, start + 2.0).unwrap(), text).unwrap()
}

/// A deterministic permutation step; avoids a RNG dependency in fixtures.
fn mix(a: usize, b: usize) -> usize {
    (a.wrapping_mul(2654435761) ^ b.wrapping_mul(40503)) % 1_000_003
}

/// `n` QA questions over `n / 5` videos (rounded up). Every question's
/// correct option appears verbatim in exactly one caption of its video and no
/// other option appears anywhere in that video.
pub fn qa_bench(n: usize) -> (Vec<CaptionTrack>, Vec<Query>) {
    let videos = n.div_ceil(5);
    let mut tracks = Vec::new();
    let mut queries = Vec::new();
    for v in 0..videos {
        let vid = format!("qa_v{v:03}");
        let used: Vec<usize> = (0..5).map(|j| (v * 5 + j) % OBJECTS.len()).collect();
        let mut caps = Vec::new();
        for k in 0..30 {
            let t = 2.0 * k as f64;
            let j = k / 6;
            if k % 6 == 3 {
                caps.push(cap(
                    &vid,
                    t,
                    &format!("C {} {}", VERBS[j], OBJECTS[used[j]]),
                ));
            } else {
                caps.push(cap(&vid, t, FILLERS[mix(v, k) % FILLERS.len()]));
            }
        }
        tracks.push(CaptionTrack::new(&vid, Interval::new(0.0, 60.0).unwrap(), caps).unwrap());
        for j in 0..5 {
            let qi = v * 5 + j;
            if qi >= n {
                break;
            }
            let distractors: Vec<usize> =
                (0..OBJECTS.len()).filter(|o| !used.contains(o)).collect();
            let answer_idx = mix(qi, 7) % 5;
            let offset = mix(qi, 3);
            let mut d = 0;
            let choices: [String; 5] = std::array::from_fn(|slot| {
                if slot == answer_idx {
                    OBJECTS[used[j]].to_string()
                } else {
                    let o = distractors[(offset + d) % distractors.len()];
                    d += 1;
                    OBJECTS[o].to_string()
                }
            });
            queries.push(Query::qa(
                format!("qa{qi:04}"),
                &vid,
                &format!(
                    "Which object is C seen handling when the action is \"{}\"?",
                    VERBS[j]
                ),
                choices,
                Some(answer_idx),
            ));
        }
    }
    (tracks, queries)
}

/// `n` NLQ queries over `n / 4` videos (rounded up). Each query names an
/// event that occurs in exactly one 2 s caption; that caption's interval is
/// the ground truth.
pub fn nlq_bench(n: usize) -> (Vec<CaptionTrack>, Vec<Query>) {
    let videos = n.div_ceil(4);
    let mut tracks = Vec::new();
    let mut queries = Vec::new();
    for v in 0..videos {
        let vid = format!("nlq_v{v:03}");
        let mut caps = Vec::new();
        let mut slots = Vec::new();
        for k in 0..60 {
            let t = 2.0 * k as f64;
            if k % 15 == 7 {
                let e = (v + k / 15) % EVENTS.len();
                caps.push(cap(&vid, t, &format!("C {}", EVENTS[e])));
                slots.push((e, Interval::new(t, t + 2.0).unwrap()));
            } else {
                caps.push(cap(&vid, t, FILLERS[mix(v, k) % FILLERS.len()]));
            }
        }
        tracks.push(CaptionTrack::new(&vid, Interval::new(0.0, 120.0).unwrap(), caps).unwrap());
        for (j, (e, gt)) in slots.into_iter().enumerate() {
            let qi = v * 4 + j;
            if qi >= n {
                break;
            }
            queries.push(Query::nlq(
                format!("nlq{qi:04}"),
                &vid,
                &format!("When did C {}?", EVENTS[e]),
                Some(gt),
            ));
        }
    }
    (tracks, queries)
}

/// Parse `start-end: text` log lines out of a prompt.
fn log_lines(user: &str) -> Vec<(f64, f64, &str)> {
    user.lines()
        .filter_map(|l| {
            let (span, text) = l.split_once(": ")?;
            let (s, e) = span.split_once('-')?;
            Some((s.parse().ok()?, e.parse().ok()?, text))
        })
        .collect()
}

fn qid_of(line: &str) -> Option<(&str, &str)> {
    let rest = line.split_once("(qid ")?.1;
    let (qid, text) = rest.split_once(')')?;
    Some((qid, text.trim_start_matches(':').trim_start()))
}

fn answer_qa(user: &str) -> String {
    let log: String = log_lines(user)
        .iter()
        .map(|(_, _, t)| *t)
        .collect::<Vec<_>>()
        .join("\n");
    let qid = user.lines().find_map(qid_of).map(|(q, _)| q).unwrap_or("");
    let options: Vec<(char, &str)> = user
        .lines()
        .skip_while(|l| *l != "Options:")
        .skip(1)
        .filter_map(|l| {
            let (letter, text) = l.split_once(". ")?;
            Some((letter.chars().next()?, text))
        })
        .collect();
    let (letter, conf) = match options.iter().find(|(_, t)| log.contains(t)) {
        Some((l, _)) => (*l, 3),
        None => ('A', 1),
    };
    format!(
        "Based on the log, here is my answer.\n```json\n[{{\"qid\": \"{qid}\", \"answer\": \"{letter}\", \"explanation\": \"the option is mentioned in the log\", \"confidence\": {conf}}}]\n```"
    )
}

fn answer_nlq(user: &str) -> String {
    let log = log_lines(user);
    let mut entries = Vec::new();
    for line in user.lines().skip_while(|l| *l != "Queries:").skip(1) {
        let Some((qid, text)) = qid_of(line) else {
            continue;
        };
        let event = text.trim_start_matches("When did C ").trim_end_matches('?');
        let entry = match log.iter().find(|(_, _, t)| t.contains(event)) {
            Some((s, e, _)) => format!(
                "{{\"qid\": \"{qid}\", \"intervals\": [[{s}, {e}]], \"explanation\": \"caption match\", \"confidence\": 3}}"
            ),
            None => format!("{{\"qid\": \"{qid}\", \"intervals\": \"NA\", \"explanation\": \"no evidence\", \"confidence\": 1}}"),
        };
        entries.push(entry);
    }
    format!("```json\n[{}]\n```", entries.join(", "))
}

fn merge(user: &str) -> String {
    user.lines()
        .filter_map(|l| l.strip_prefix("- "))
        .collect::<Vec<_>>()
        .join("; ")
}

fn rule_based(req: &CompletionRequest<'_>) -> Result<String, LlmError> {
    if req.system == MERGE_PROMPT {
        Ok(merge(req.user))
    } else if req.user.contains("\nOptions:\n") {
        Ok(answer_qa(req.user))
    } else {
        Ok(answer_nlq(req.user))
    }
}

/// Answers QA by finding the option quoted in the caption log, NLQ by
/// returning the interval of the caption naming the queried event, and merges
/// by joining member captions.
pub fn rule_based_llm() -> ScriptedLlm {
    FnLlm(rule_based)
}

fn random_guess(req: &CompletionRequest<'_>) -> Result<String, LlmError> {
    if req.system == MERGE_PROMPT {
        return Ok(merge(req.user));
    }
    let qid = req
        .user
        .lines()
        .find_map(qid_of)
        .map(|(q, _)| q)
        .unwrap_or("");
    let letter = ['A', 'B', 'C', 'D', 'E'][(req.seed.unwrap_or(0) % 5) as usize];
    Ok(format!(
        "```json\n[{{\"qid\": \"{qid}\", \"answer\": \"{letter}\", \"explanation\": \"guess\", \"confidence\": 1}}]\n```"
    ))
}

/// Picks a letter from the per-run sampling seed, ignoring the captions.
pub fn random_guess_llm() -> ScriptedLlm {
    FnLlm(random_guess)
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub captions: PathBuf,
    pub queries: PathBuf,
}

impl Fixture {
    pub fn new(tracks: &[CaptionTrack], queries: &[Query]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let captions = dir.path().join("captions.jsonl");
        let qpath = dir.path().join("queries.jsonl");
        let mut buf = Vec::new();
        write_captions(&mut buf, tracks.iter()).unwrap();
        std::fs::write(&captions, buf).unwrap();
        let mut buf = Vec::new();
        write_queries(&mut buf, queries.iter()).unwrap();
        std::fs::write(&qpath, buf).unwrap();
        Self {
            dir,
            captions,
            queries: qpath,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Config with the fixture's inputs, `output` under the fixture dir, and
    /// no backoff delays.
    pub fn config(&self, seed: u64, output: &str) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            seed: Some(seed),
            ..Default::default()
        };
        cfg.paths.captions = Some(self.captions.clone());
        cfg.paths.queries = Some(self.queries.clone());
        cfg.paths.output = Some(self.path(output));
        cfg.retry = egomem::retry::RetryPolicy::immediate(3);
        cfg
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
