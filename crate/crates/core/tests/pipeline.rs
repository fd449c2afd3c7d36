mod common;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use common::{nlq_bench, qa_bench, read, rule_based_llm, Fixture};
use egomem::corpus::load_captions;
use egomem::digest::{DigestConfig, MergeMode};
use egomem::error::{EmbedError, LlmError};
use egomem::pipeline::{
    cmd_ask, cmd_digest, cmd_eval, cmd_gen_refine_data, cmd_localize, read_nlq_predictions,
    read_qa_predictions, sidecar, PipelineError, Split,
};
use egomem::reasoner::{self, ChatFlavor, CompletionRequest, FnLlm, HttpLlm, ReplayLlm};
use egomem::retry::RetryPolicy;
use egomem::similarity::{embed_batch, HttpEmbedder, MockEmbedder};
use egomem::{Caption, CaptionTrack, Embedder, Interval, LlmBackend, Prompt, Query};

fn qid_in(user: &str) -> String {
    user.split_once("(qid ")
        .and_then(|(_, r)| r.split_once(')'))
        .map(|(q, _)| q.to_string())
        .unwrap_or_default()
}

#[test]
fn ask_answers_synthetic_questions_and_writes_artifacts() {
    let (tracks, queries) = qa_bench(10);
    let fx = Fixture::new(&tracks, &queries);
    let cfg = fx.config(11, "out/qa.jsonl");
    let summary = cmd_ask(&cfg, &rule_based_llm(), &MockEmbedder::default()).unwrap();
    assert_eq!(summary.exit_code(), 0);
    assert_eq!(summary.counts["predictions"], 10);

    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&fx.path("out/qa.jsonl.manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["command"], "ask");
    assert_eq!(manifest["backends"]["llm"], "scripted");
    assert_eq!(manifest["backends"]["embedder"], "mock");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["inputs"]["captions"].is_string());
    assert!(!fx.path("out/qa.jsonl.failures.json").exists());

    let mut eval_cfg = fx.config(11, "out/qa_eval.json");
    eval_cfg.paths.predictions = Some(fx.path("out/qa.jsonl"));
    let eval = cmd_eval(&eval_cfg, Split::Qa).unwrap();
    let acc = eval.report.unwrap().qa_accuracy.unwrap();
    assert_eq!((acc.hits, acc.total), (10, 10));
}

#[test]
fn ensemble_is_at_least_as_accurate_as_one_run() {
    let (tracks, queries) = qa_bench(20);
    let gts: HashMap<String, usize> = queries
        .iter()
        .map(|q| (q.qid.clone(), q.gt_answer_idx().unwrap()))
        .collect();
    let fx = Fixture::new(&tracks, &queries);
    let letters = ['A', 'B', 'C', 'D', 'E'];
    let llm = FnLlm(move |req: &CompletionRequest<'_>| {
        if req.system == egomem::digest::MERGE_PROMPT {
            return Ok("merged".to_string());
        }
        let qid = qid_in(req.user);
        let gt = gts[&qid];
        let good_run = qid.bytes().map(usize::from).sum::<usize>() % 5;
        let (choice, conf) = if req.run_index == good_run {
            (gt, 3)
        } else {
            ((gt + 1 + req.run_index % 4) % 5, 1 + req.run_index % 2)
        };
        Ok(format!(
            "[{{\"qid\": \"{qid}\", \"answer\": \"{}\", \"explanation\": \"-\", \"confidence\": {conf}}}]",
            letters[choice]
        ))
    });
    let accuracy = |runs: usize, name: &str| {
        let mut cfg = fx.config(5, name);
        cfg.runs = runs;
        cmd_ask(&cfg, &llm, &MockEmbedder::default()).unwrap();
        let mut e = fx.config(5, &format!("{name}.eval.json"));
        e.paths.predictions = Some(fx.path(name));
        cmd_eval(&e, Split::Qa)
            .unwrap()
            .report
            .unwrap()
            .qa_accuracy
            .unwrap()
            .value
    };
    let single = accuracy(1, "single.jsonl");
    let ensemble = accuracy(5, "ensemble.jsonl");
    assert!(single < 1.0);
    assert_eq!(ensemble, 1.0);
    assert!(ensemble >= single);
}

fn one_track_fixture(bounds_end: f64) -> (Fixture, Query) {
    let caps = vec![
        Caption::new(
            "v",
            Interval::new(100.0, 110.0).unwrap(),
            "C opens the fridge",
        )
        .unwrap(),
        Caption::new("v", Interval::new(20.0, 22.0).unwrap(), "C walks in").unwrap(),
    ];
    let track = CaptionTrack::new("v", Interval::new(0.0, bounds_end).unwrap(), caps).unwrap();
    let q = Query::nlq(
        "n1",
        "v",
        "When did I open the fridge?",
        Some(Interval::new(100.0, 110.0).unwrap()),
    );
    (Fixture::new(&[track], std::slice::from_ref(&q)), q)
}

fn nlq_reply(
    body: &'static str,
) -> impl Fn(&CompletionRequest<'_>) -> Result<String, LlmError> + Send + Sync {
    move |req: &CompletionRequest<'_>| {
        if req.system == egomem::digest::MERGE_PROMPT {
            return Ok("merged".into());
        }
        Ok(format!("```json\n[{{\"qid\": \"n1\", \"intervals\": {body}, \"explanation\": \"e\", \"confidence\": 2}}]\n```"))
    }
}

#[test]
fn na_answer_becomes_full_clip() {
    let (fx, _) = one_track_fixture(200.0);
    let cfg = fx.config(1, "nlq.jsonl");
    cmd_localize(&cfg, &FnLlm(nlq_reply("\"NA\"")), &MockEmbedder::default()).unwrap();
    let p = &read_nlq_predictions(&fx.path("nlq.jsonl")).unwrap()["n1"];
    assert!(p.na);
    assert_eq!(p.predicted_window, Interval::new(0.0, 200.0).unwrap());
}

#[test]
fn single_candidate_is_padded_and_clamped() {
    let (fx, _) = one_track_fixture(200.0);
    let cfg = fx.config(1, "nlq.jsonl");
    cmd_localize(
        &cfg,
        &FnLlm(nlq_reply("[[100, 110]]")),
        &MockEmbedder::default(),
    )
    .unwrap();
    let p = &read_nlq_predictions(&fx.path("nlq.jsonl")).unwrap()["n1"];
    assert_eq!(p.predicted_window, Interval::new(90.0, 120.0).unwrap());

    let (fx, _) = one_track_fixture(115.0);
    let cfg = fx.config(1, "nlq.jsonl");
    cmd_localize(
        &cfg,
        &FnLlm(nlq_reply("[[100, 110]]")),
        &MockEmbedder::default(),
    )
    .unwrap();
    let p = &read_nlq_predictions(&fx.path("nlq.jsonl")).unwrap()["n1"];
    assert_eq!(p.predicted_window, Interval::new(90.0, 115.0).unwrap());

    let (fx, _) = one_track_fixture(200.0);
    let cfg = fx.config(1, "nlq.jsonl");
    cmd_localize(
        &cfg,
        &FnLlm(nlq_reply("[[190, 260]]")),
        &MockEmbedder::default(),
    )
    .unwrap();
    let p = &read_nlq_predictions(&fx.path("nlq.jsonl")).unwrap()["n1"];
    assert_eq!(p.candidates, vec![Interval::new(190.0, 200.0).unwrap()]);
}

#[test]
fn localize_metrics_match_hand_count() {
    let (tracks, queries) = nlq_bench(8);
    let fx = Fixture::new(&tracks, &queries);
    let mut cfg = fx.config(3, "nlq.jsonl");
    cfg.refine.pad_alpha = 0.0;
    cmd_localize(&cfg, &rule_based_llm(), &MockEmbedder::default()).unwrap();
    let preds = read_nlq_predictions(&fx.path("nlq.jsonl")).unwrap();
    let mut hits = 0;
    for q in &queries {
        let p = &preds[&q.qid];
        if p.predicted_window == q.gt_window().unwrap() {
            hits += 1;
        }
    }
    let mut e = fx.config(3, "eval.json");
    e.paths.predictions = Some(fx.path("nlq.jsonl"));
    let report = cmd_eval(&e, Split::Nlq).unwrap().report.unwrap();
    assert_eq!(report.recall_at_1["0.5"].hits, hits);
    assert_eq!(report.recall_at_1["0.5"].total, 8);
    assert_eq!(
        report.na_ratio.hits,
        preds.values().filter(|p| p.na).count()
    );
}

#[test]
fn replayed_transcripts_reproduce_predictions() {
    let (tracks, queries) = qa_bench(5);
    let (t2, q2) = nlq_bench(4);
    let all_tracks: Vec<CaptionTrack> = tracks.into_iter().chain(t2).collect();
    let all_queries: Vec<Query> = queries.into_iter().chain(q2).collect();
    let fx = Fixture::new(&all_tracks, &all_queries);

    let mut rec = fx.config(9, "live_qa.jsonl");
    rec.paths.record_transcripts = Some(fx.path("qa_transcripts.json"));
    cmd_ask(&rec, &rule_based_llm(), &MockEmbedder::default()).unwrap();
    let mut rec = fx.config(9, "live_nlq.jsonl");
    rec.paths.record_transcripts = Some(fx.path("nlq_transcripts.json"));
    cmd_localize(&rec, &rule_based_llm(), &MockEmbedder::default()).unwrap();

    let qa_replay = ReplayLlm::load(&fx.path("qa_transcripts.json")).unwrap();
    let nlq_replay = ReplayLlm::load(&fx.path("nlq_transcripts.json")).unwrap();
    let cfg = fx.config(9, "replay_qa.jsonl");
    cmd_ask(&cfg, &qa_replay, &MockEmbedder::default()).unwrap();
    let cfg = fx.config(9, "replay_nlq.jsonl");
    cmd_localize(&cfg, &nlq_replay, &MockEmbedder::default()).unwrap();
    assert_eq!(
        read(&fx.path("live_qa.jsonl")),
        read(&fx.path("replay_qa.jsonl"))
    );
    assert_eq!(
        read(&fx.path("live_nlq.jsonl")),
        read(&fx.path("replay_nlq.jsonl"))
    );

    // A different seed changes the sampling seeds but replay is keyed by
    // prompt and run index, so the same transcripts still apply.
    let cfg = fx.config(10, "replay_qa_seed10.jsonl");
    cmd_ask(&cfg, &qa_replay, &MockEmbedder::default()).unwrap();
}

#[test]
fn missing_transcripts_are_partial_failures() {
    let (tracks, queries) = qa_bench(5);
    let fx = Fixture::new(&tracks, &queries);
    let mut cfg = fx.config(1, "qa.jsonl");
    cfg.digest.merge_mode = MergeMode::Concat;
    let summary = cmd_ask(&cfg, &ReplayLlm::default(), &MockEmbedder::default()).unwrap();
    assert_eq!(summary.exit_code(), 2);
    assert_eq!(summary.failures.len(), 5);
    assert!(summary.failures.iter().all(|f| f.stage == "llm"));
    let failures: serde_json::Value =
        serde_json::from_slice(&read(&fx.path("qa.jsonl.failures.json"))).unwrap();
    assert_eq!(failures["failures"].as_array().unwrap().len(), 5);
    assert!(read(&fx.path("qa.jsonl")).is_empty());
}

#[test]
fn one_failing_question_does_not_stop_the_rest() {
    let (tracks, queries) = qa_bench(5);
    let fx = Fixture::new(&tracks, &queries);
    let inner = rule_based_llm();
    let llm = FnLlm(move |req: &CompletionRequest<'_>| {
        if req.user.contains("(qid qa0002)") {
            Err(LlmError::Rejected("content filter".into()))
        } else {
            inner.complete(req)
        }
    });
    let summary = cmd_ask(&fx.config(1, "qa.jsonl"), &llm, &MockEmbedder::default()).unwrap();
    assert_eq!(summary.exit_code(), 2);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].qid.as_deref(), Some("qa0002"));
    assert_eq!(read_qa_predictions(&fx.path("qa.jsonl")).unwrap().len(), 4);
}

#[test]
fn transient_errors_are_retried() {
    let (tracks, queries) = qa_bench(5);
    let fx = Fixture::new(&tracks, &queries);
    let calls = AtomicUsize::new(0);
    let inner = rule_based_llm();
    let llm = FnLlm(|req: &CompletionRequest<'_>| {
        if calls.fetch_add(1, Ordering::SeqCst).is_multiple_of(2) {
            Err(LlmError::Transport("503".into()))
        } else {
            inner.complete(req)
        }
    });
    let mut cfg = fx.config(1, "qa.jsonl");
    cfg.in_flight_limit = 1;
    cfg.runs = 1;
    let summary = cmd_ask(&cfg, &llm, &MockEmbedder::default()).unwrap();
    assert_eq!(summary.exit_code(), 0);
    assert_eq!(summary.counts["failed_runs"], 0);
}

#[test]
fn eval_lists_every_qid_mismatch() {
    let (tracks, queries) = qa_bench(5);
    let fx = Fixture::new(&tracks, &queries);
    cmd_ask(
        &fx.config(1, "qa.jsonl"),
        &rule_based_llm(),
        &MockEmbedder::default(),
    )
    .unwrap();
    let text = String::from_utf8(read(&fx.path("qa.jsonl"))).unwrap();
    let kept: Vec<&str> = text.lines().skip(2).collect();
    let extra = kept[0].replace(&queries[2].qid, "ghost");
    std::fs::write(
        fx.path("edited.jsonl"),
        format!("{}\n{}\n", kept.join("\n"), extra),
    )
    .unwrap();
    let mut e = fx.config(1, "eval.json");
    e.paths.predictions = Some(fx.path("edited.jsonl"));
    match cmd_eval(&e, Split::Qa) {
        Err(PipelineError::QidMismatch {
            without_gt,
            without_prediction,
        }) => {
            assert_eq!(without_gt, vec!["ghost"]);
            assert_eq!(
                without_prediction,
                vec![queries[0].qid.clone(), queries[1].qid.clone()]
            );
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn digest_command_identity_round_trips() {
    let (tracks, _) = qa_bench(10);
    let fx = Fixture::new(&tracks, &[]);
    let mut cfg = fx.config(1, "digested.jsonl");
    cfg.paths.queries = None;
    cfg.digest = DigestConfig::identity();
    let s = cmd_digest(&cfg, &ReplayLlm::default(), &MockEmbedder::default()).unwrap();
    assert_eq!(s.counts["captions_in"], s.counts["captions_out"]);
    assert_eq!(read(&fx.captions), read(&fx.path("digested.jsonl")));
    assert!(fx.path("digested.jsonl.stats.json").exists());

    cfg.digest = DigestConfig {
        merge_mode: MergeMode::Concat,
        ..Default::default()
    };
    let s = cmd_digest(&cfg, &ReplayLlm::default(), &MockEmbedder::default()).unwrap();
    assert!(s.counts["captions_out"] < s.counts["captions_in"]);
    let reloaded = load_captions(&fx.path("digested.jsonl")).unwrap();
    assert_eq!(reloaded.tracks.len(), tracks.len());
}

struct BrokenEmbedder;

impl Embedder for BrokenEmbedder {
    fn embed_texts(&self, _: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Err(EmbedError::Config("unreachable".into()))
    }
    fn kind(&self) -> &'static str {
        "broken"
    }
}

#[test]
fn digest_command_aborts_with_per_video_summary() {
    let (tracks, queries) = qa_bench(10);
    let fx = Fixture::new(&tracks, &queries);
    let cfg = fx.config(1, "digested.jsonl");
    match cmd_digest(&cfg, &ReplayLlm::default(), &BrokenEmbedder) {
        Err(PipelineError::Aborted { failures }) => assert_eq!(failures.len(), 2),
        other => panic!("unexpected {other:?}"),
    }
    assert!(!fx.path("digested.jsonl").exists());
}

#[test]
fn refinement_data_is_balanced_and_reproducible() {
    let (tracks, queries) = nlq_bench(12);
    let fx = Fixture::new(&tracks, &queries);
    let a = cmd_gen_refine_data(&fx.config(4, "a.jsonl")).unwrap();
    cmd_gen_refine_data(&fx.config(4, "b.jsonl")).unwrap();
    assert_eq!(a.counts["pos"], a.counts["neg"]);
    assert_eq!(a.counts["ground_truths"], 12);
    assert_eq!(read(&fx.path("a.jsonl")), read(&fx.path("b.jsonl")));
    cmd_gen_refine_data(&fx.config(5, "c.jsonl")).unwrap();
    assert_ne!(read(&fx.path("a.jsonl")), read(&fx.path("c.jsonl")));
}

#[test]
fn missing_seed_is_a_config_error() {
    let (tracks, queries) = qa_bench(5);
    let fx = Fixture::new(&tracks, &queries);
    let mut cfg = fx.config(1, "qa.jsonl");
    cfg.seed = None;
    let err = cmd_ask(&cfg, &rule_based_llm(), &MockEmbedder::default()).unwrap_err();
    assert!(err.is_usage());
}

/// Serves canned HTTP responses in order, one per connection, and records
/// each request's header block and parsed JSON body.
fn serve(
    responses: Vec<(u16, String)>,
) -> (
    String,
    std::thread::JoinHandle<Vec<(String, serde_json::Value)>>,
) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut head = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                head.push_str(&line.to_ascii_lowercase());
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            bodies.push((head, serde_json::from_slice(&req).unwrap()));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn http_embedder_rejects_count_mismatch() {
    let (url, h) = serve(vec![(200, "{\"embeddings\": [[1.0, 0.0]]}".into())]);
    let e = HttpEmbedder::new(
        &url,
        None,
        RetryPolicy::immediate(1),
        Duration::from_secs(5),
    )
    .unwrap();
    let err = embed_batch(&e, &["a".to_string(), "b".to_string()]).unwrap_err();
    assert!(matches!(
        err,
        EmbedError::CountMismatch {
            expected: 2,
            got: 1
        }
    ));
    assert!(err.to_string().contains("count mismatch"));
    let reqs = h.join().unwrap();
    assert_eq!(reqs[0].1, serde_json::json!({"texts": ["a", "b"]}));
    assert!(!reqs[0].0.contains("authorization"));
}

#[test]
fn http_embedder_retries_server_errors() {
    let (url, h) = serve(vec![
        (503, "{}".into()),
        (200, "{\"embeddings\": [[1.0, 0.5]]}".into()),
    ]);
    let e = HttpEmbedder::new(
        &url,
        None,
        RetryPolicy::immediate(3),
        Duration::from_secs(5),
    )
    .unwrap();
    let v = embed_batch(&e, &["a".to_string()]).unwrap();
    assert_eq!(v[0].as_slice(), &[1.0, 0.5]);
    assert_eq!(h.join().unwrap().len(), 2);
}

#[test]
fn http_llm_is_retried_by_the_runner_and_sends_the_token() {
    std::env::set_var("EGOMEM_TEST_TOKEN", "sekrit");
    let (url, h) = serve(vec![
        (429, "{}".into()),
        (
            200,
            "{\"choices\": [{\"message\": {\"content\": \"hello\"}}]}".into(),
        ),
        (400, "{}".into()),
    ]);
    let llm = HttpLlm::new(
        &url,
        Some("EGOMEM_TEST_TOKEN"),
        ChatFlavor::ChatCompletions { model: "m".into() },
        Duration::from_secs(5),
    )
    .unwrap();
    let prompt = Prompt {
        system_text: "sys".into(),
        user_text: "usr".into(),
        query_ids: vec![],
    };
    let res = reasoner::run(&prompt, &llm, 1, 3, &RetryPolicy::immediate(3));
    assert_eq!(res.responses[0].text, "hello");
    let res = reasoner::run(&prompt, &llm, 1, 3, &RetryPolicy::immediate(3));
    assert!(matches!(res.failures[0].error, LlmError::Rejected(_)));
    let reqs = h.join().unwrap();
    assert_eq!(reqs.len(), 3);
    assert!(reqs[0].0.contains("authorization: bearer sekrit"));
    let body = &reqs[0].1;
    assert_eq!(body["model"], "m");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "usr");
    assert!(body["seed"].is_u64());
}

#[test]
fn sidecar_paths() {
    assert_eq!(
        sidecar(std::path::Path::new("x/p.jsonl"), ".failures.json"),
        std::path::PathBuf::from("x/p.jsonl.failures.json")
    );
}
