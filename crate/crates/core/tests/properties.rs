use proptest::prelude::*;

use egomem::corpus::{parse_captions_str, write_captions, QueryKind};
use egomem::digest::{digest, DigestConfig, MergeMode};
use egomem::ensemble::{vote_by_confidence, AnswerPool};
use egomem::metrics::iou;
use egomem::reasoner::{parse_response, Confidence, FnLlm, LlmAnswer};
use egomem::refine::{pad_interval, RefineConfig};
use egomem::retry::RetryPolicy;
use egomem::similarity::{cosine, Embedding, MockEmbedder};
use egomem::{Caption, CaptionTrack, Interval, Query};

fn ms_interval(max_ms: i64) -> impl Strategy<Value = (i64, i64)> {
    (0..max_ms - 1).prop_flat_map(move |s| (Just(s), s + 1..=max_ms))
}

fn iv((s, e): (i64, i64)) -> Interval {
    Interval::new(s as f64 / 1000.0, e as f64 / 1000.0).unwrap()
}

fn qa(choice: usize, conf: u8) -> LlmAnswer {
    LlmAnswer {
        qid: "q".into(),
        kind: QueryKind::Qa,
        choice_idx: Some(choice),
        intervals: Vec::new(),
        explanation: String::new(),
        confidence: Confidence::new(conf).unwrap(),
        raw_text: String::new(),
    }
}

const WORDS: [&str; 12] = [
    "C", "picks", "up", "the", "cup", "washes", "plate", "looks", "around", "opens", "fridge",
    "door",
];

fn caption_texts() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..6).prop_map(|w| w.join(" ")),
        0..25,
    )
}

fn track_of(texts: &[String]) -> CaptionTrack {
    let caps = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let s = 2.0 * i as f64;
            Caption::new("v", Interval::new(s, s + 2.0).unwrap(), t).unwrap()
        })
        .collect();
    CaptionTrack::new("v", Interval::new(0.0, 60.0).unwrap(), caps).unwrap()
}

/// Every value that some substring of a numeric run in `raw` parses to.
fn number_literals(raw: &str) -> Vec<f64> {
    let numeric = |c: char| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E');
    let mut out = Vec::new();
    for run in raw.split(|c: char| !numeric(c)).filter(|r| !r.is_empty()) {
        for a in 0..run.len() {
            for b in a + 1..=run.len() {
                if let Ok(x) = run[a..b].parse::<f64>() {
                    out.push(x);
                }
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn padded_window_contains_candidate_and_stays_in_bounds(
        c in ms_interval(200_000),
        margin in (0i64..50_000, 0i64..50_000),
        alpha_ms in 0i64..100_000,
    ) {
        let bounds = iv(((c.0 - margin.0).max(0), c.1 + margin.1));
        let cand = iv(c);
        let cfg = RefineConfig { pad_alpha: alpha_ms as f64 / 1000.0, ..Default::default() };
        let p = pad_interval(&cand, &cfg, &bounds).unwrap();
        prop_assert!(p.contains(&cand));
        prop_assert!(bounds.contains(&p));
        prop_assert!(p.duration() <= cand.duration() + 2.0 * cfg.pad_alpha + 1e-9);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in ms_interval(100_000), b in ms_interval(100_000)) {
        let (x, y) = (iv(a), iv(b));
        let v = iou(&x, &y);
        prop_assert_eq!(v, iou(&y, &x));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&x, &x), 1.0);
    }

    #[test]
    fn cosine_is_symmetric_and_in_range(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
        let (ea, eb) = (Embedding::new(a).unwrap(), Embedding::new(b).unwrap());
        let ab = cosine(&ea, &eb).unwrap();
        prop_assert_eq!(ab, cosine(&eb, &ea).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn digest_never_adds_captions(
        texts in caption_texts(),
        relevance in -1.0f64..1.0,
        adjacency in -1.0f64..1.2,
        cap in 2usize..6,
    ) {
        let track = track_of(&texts);
        let q = Query::nlq("n", "v", "When did C open the fridge door?", None);
        let cfg = DigestConfig {
            relevance_threshold: relevance,
            adjacency_threshold: adjacency,
            max_merge_group: cap,
            merge_mode: MergeMode::Concat,
            ..Default::default()
        };
        let llm = FnLlm(|_: &egomem::reasoner::CompletionRequest<'_>| Ok(String::new()));
        let (out, stats) = digest(&track, &[&q], &MockEmbedder::default(), &llm, &cfg, &RetryPolicy::immediate(1)).unwrap();
        prop_assert!(out.len() <= track.len());
        prop_assert!(stats.balances());
        prop_assert_eq!(stats.output, out.len());
        for c in out.captions() {
            prop_assert!(track.bounds().contains(&c.interval()));
        }
    }

    #[test]
    fn identity_digest_round_trips_through_the_file_format(texts in caption_texts()) {
        let track = track_of(&texts);
        let q = Query::nlq("n", "v", "anything", None);
        let llm = FnLlm(|_: &egomem::reasoner::CompletionRequest<'_>| Ok(String::new()));
        let (out, _) = digest(&track, &[&q], &MockEmbedder::default(), &llm, &DigestConfig::identity(), &RetryPolicy::immediate(1)).unwrap();
        prop_assert_eq!(&out, &track);
        let mut buf = Vec::new();
        write_captions(&mut buf, [&out]).unwrap();
        let loaded = parse_captions_str(std::str::from_utf8(&buf).unwrap()).unwrap();
        if !track.is_empty() {
            prop_assert_eq!(&loaded.tracks["v"], &track);
        }
    }

    #[test]
    fn parser_never_invents_numbers(raw in "[\\[\\]{}\",:0-9a-zA-Z .-]{0,120}") {
        let qids = vec!["q".to_string()];
        if let Ok(p) = parse_response(&raw, QueryKind::Nlq, &qids) {
            for a in &p.answers {
                for i in &a.intervals {
                    let present = number_literals(&raw);
                    prop_assert!(present.contains(&i.start_s()) && present.contains(&i.end_s()));
                }
            }
        }
    }

    #[test]
    fn parsed_intervals_come_from_the_response(
        pairs in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 0..5),
        confidence in -5i32..8,
    ) {
        let body: Vec<String> = pairs.iter().map(|(a, b)| format!("[{a}, {b}]")).collect();
        let raw = format!("Sure.\n```json\n[{{\"qid\": \"q\", \"intervals\": [{}], \"confidence\": {confidence}}}]\n```", body.join(", "));
        let p = parse_response(&raw, QueryKind::Nlq, &["q".to_string()]).unwrap();
        let got = &p.answers[0].intervals;
        let want: Vec<(f64, f64)> = pairs.iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(*b), a.max(*b))).collect();
        prop_assert_eq!(got.iter().map(|i| (i.start_s(), i.end_s())).collect::<Vec<_>>(), want);
        prop_assert!((1..=3).contains(&p.answers[0].confidence.level()));
    }

    #[test]
    fn vote_picks_a_maximal_confidence(
        pool in prop::collection::vec((0usize..5, 1u8..=3), 1..8),
        seed in any::<u64>(),
    ) {
        let answers: Vec<LlmAnswer> = pool.iter().map(|(c, k)| qa(*c, *k)).collect();
        let top = answers.iter().map(|a| a.confidence).max().unwrap();
        let p = AnswerPool::new(answers).unwrap();
        prop_assert_eq!(vote_by_confidence(&p, seed).confidence, top);
    }
}
