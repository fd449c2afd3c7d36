//! Evaluation: interval IoU, Overlap, IoU*@t, NA ratio, R@1 IoU@t, QA
//! accuracy, and confidence-stratified reports.
//!
//! Threshold comparisons are strict: a candidate at exactly IoU 0.3 does not
//! count toward IoU*@0.3. Rates with a zero denominator report value 0 and
//! `undefined: true` so the report schema never changes shape.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write;

use crate::corpus::QueryKind;
use crate::ensemble::filter_by_confidence;
use crate::error::MetricsError;
use crate::interval::Interval;
use crate::reasoner::{Confidence, LlmAnswer};

/// Thresholds reported for IoU* and R@1.
pub const IOU_THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// Intersection over union of two time windows.
fn ms(seconds: f64) -> i64 {
    (seconds * 1000.0).round() as i64
}

/// Computed on the integer millisecond grid.
pub fn iou(a: &Interval, b: &Interval) -> f64 {
    let inter = ms(a.end_s()).min(ms(b.end_s())) - ms(a.start_s()).max(ms(b.start_s()));
    if inter <= 0 {
        return 0.0;
    }
    let union = ms(a.end_s()).max(ms(b.end_s())) - ms(a.start_s()).min(ms(b.start_s()));
    (inter as f64 / union as f64).clamp(0.0, 1.0)
}

/// A fraction with its counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub hits: usize,
    pub total: usize,
    pub undefined: bool,
}

impl Rate {
    pub fn of(hits: usize, total: usize) -> Self {
        if total == 0 {
            Rate {
                value: 0.0,
                hits,
                total,
                undefined: true,
            }
        } else {
            Rate {
                value: hits as f64 / total as f64,
                hits,
                total,
                undefined: false,
            }
        }
    }
}

fn check_threshold(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::Threshold(t))
    }
}

fn check_gts<V, G>(
    preds: &BTreeMap<String, V>,
    gts: &BTreeMap<String, G>,
) -> Result<(), MetricsError> {
    let missing: Vec<String> = preds
        .keys()
        .filter(|q| !gts.contains_key(*q))
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(MetricsError::MissingGroundTruth(missing))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Over non-NA predictions.
    pub overlap: Rate,
    /// Over all predictions, NA counted as a miss.
    pub overlap_all: Rate,
    pub na_ratio: Rate,
}

/// Fraction of predictions with any candidate positively intersecting the
/// ground truth, plus the NA ratio.
pub fn overlap_rate(
    preds: &BTreeMap<String, LlmAnswer>,
    gts: &BTreeMap<String, Interval>,
) -> Result<OverlapStats, MetricsError> {
    check_gts(preds, gts)?;
    let mut na = 0;
    let mut hits = 0;
    for (qid, a) in preds {
        if a.intervals.is_empty() {
            na += 1;
        } else if a
            .intervals
            .iter()
            .any(|c| c.intersection_len(&gts[qid]) > 0.0)
        {
            hits += 1;
        }
    }
    Ok(OverlapStats {
        overlap: Rate::of(hits, preds.len() - na),
        overlap_all: Rate::of(hits, preds.len()),
        na_ratio: Rate::of(na, preds.len()),
    })
}

fn iou_star_counts(
    preds: &BTreeMap<String, LlmAnswer>,
    gts: &BTreeMap<String, Interval>,
    threshold: f64,
) -> Result<(usize, usize, usize), MetricsError> {
    check_threshold(threshold)?;
    check_gts(preds, gts)?;
    let mut hits = 0;
    let mut answered = 0;
    for (qid, a) in preds {
        if a.intervals.is_empty() {
            continue;
        }
        answered += 1;
        if a.intervals.iter().any(|c| iou(c, &gts[qid]) > threshold) {
            hits += 1;
        }
    }
    Ok((hits, answered, preds.len()))
}

/// Fraction of non-NA predictions with at least one candidate whose IoU
/// with the ground truth exceeds `threshold`.
pub fn iou_star_at(
    preds: &BTreeMap<String, LlmAnswer>,
    gts: &BTreeMap<String, Interval>,
    threshold: f64,
) -> Result<Rate, MetricsError> {
    let (hits, answered, _) = iou_star_counts(preds, gts, threshold)?;
    Ok(Rate::of(hits, answered))
}

/// Fraction of queries whose single final window exceeds `threshold` IoU.
pub fn recall_at_1(
    preds: &BTreeMap<String, Interval>,
    gts: &BTreeMap<String, Interval>,
    threshold: f64,
) -> Result<Rate, MetricsError> {
    check_threshold(threshold)?;
    check_gts(preds, gts)?;
    let hits = preds
        .iter()
        .filter(|(qid, w)| iou(w, &gts[*qid]) > threshold)
        .count();
    Ok(Rate::of(hits, preds.len()))
}

/// Share of QA predictions naming the ground-truth choice. Unanswered
/// predictions count as wrong.
pub fn qa_accuracy(
    preds: &BTreeMap<String, LlmAnswer>,
    gts: &BTreeMap<String, usize>,
) -> Result<Rate, MetricsError> {
    if let Some(a) = preds.values().find(|a| a.kind != QueryKind::Qa) {
        return Err(MetricsError::NotQa(a.qid.clone()));
    }
    check_gts(preds, gts)?;
    let hits = preds
        .iter()
        .filter(|(qid, a)| a.choice_idx == Some(gts[*qid]))
        .count();
    Ok(Rate::of(hits, preds.len()))
}

/// Everything needed to evaluate one predictions set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalInput {
    pub qa: BTreeMap<String, LlmAnswer>,
    pub qa_gts: BTreeMap<String, usize>,
    /// Coarse NLQ answers: candidate lists, empty for NA.
    pub nlq: BTreeMap<String, LlmAnswer>,
    /// Final single windows per NLQ qid, after refinement.
    pub nlq_final: BTreeMap<String, Interval>,
    pub nlq_gts: BTreeMap<String, Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub na_ratio: Rate,
    pub overlap: Rate,
    pub overlap_all: Rate,
    /// IoU*@t over non-NA predictions, keyed by threshold.
    pub iou_star: BTreeMap<String, Rate>,
    /// IoU*@t over all predictions.
    pub iou_star_all: BTreeMap<String, Rate>,
    pub recall_at_1: BTreeMap<String, Rate>,
    /// Mean of R@1 at 0.3 and 0.5.
    pub recall_mean: Rate,
    pub qa_accuracy: Option<Rate>,
    /// Sub-reports over predictions with confidence ≥ level.
    pub per_confidence: BTreeMap<String, EvalReport>,
}

fn key(t: f64) -> String {
    t.to_string()
}

fn report(input: &EvalInput) -> Result<EvalReport, MetricsError> {
    let ov = overlap_rate(&input.nlq, &input.nlq_gts)?;
    let mut iou_star = BTreeMap::new();
    let mut iou_star_all = BTreeMap::new();
    let mut recall = BTreeMap::new();
    for t in IOU_THRESHOLDS {
        let (hits, answered, all) = iou_star_counts(&input.nlq, &input.nlq_gts, t)?;
        iou_star.insert(key(t), Rate::of(hits, answered));
        iou_star_all.insert(key(t), Rate::of(hits, all));
        recall.insert(key(t), recall_at_1(&input.nlq_final, &input.nlq_gts, t)?);
    }
    let r: Vec<Rate> = recall.values().copied().collect();
    let recall_mean = Rate {
        value: r.iter().map(|x| x.value).sum::<f64>() / r.len() as f64,
        hits: r.iter().map(|x| x.hits).sum(),
        total: r.iter().map(|x| x.total).sum(),
        undefined: r.iter().any(|x| x.undefined),
    };
    let qa_accuracy = if input.qa.is_empty() && input.qa_gts.is_empty() {
        None
    } else {
        Some(qa_accuracy(&input.qa, &input.qa_gts)?)
    };
    Ok(EvalReport {
        n_queries: input.qa.len() + input.nlq.len(),
        na_ratio: ov.na_ratio,
        overlap: ov.overlap,
        overlap_all: ov.overlap_all,
        iou_star,
        iou_star_all,
        recall_at_1: recall,
        recall_mean,
        qa_accuracy,
        per_confidence: BTreeMap::new(),
    })
}

fn restrict(input: &EvalInput, level: Confidence) -> EvalInput {
    let keep = |m: &BTreeMap<String, LlmAnswer>| -> BTreeMap<String, LlmAnswer> {
        let v: Vec<LlmAnswer> = m.values().cloned().collect();
        filter_by_confidence(&v, level)
            .into_iter()
            .map(|a| (a.qid.clone(), a))
            .collect()
    };
    let nlq = keep(&input.nlq);
    let nlq_final = input
        .nlq_final
        .iter()
        .filter(|(q, _)| input.nlq.get(*q).is_none_or(|a| a.confidence >= level))
        .map(|(q, w)| (q.clone(), *w))
        .collect();
    EvalInput {
        qa: keep(&input.qa),
        qa_gts: input.qa_gts.clone(),
        nlq,
        nlq_final,
        nlq_gts: input.nlq_gts.clone(),
    }
}

/// One sub-report per minimum confidence level 1, 2, 3.
pub fn stratify_by_confidence(
    input: &EvalInput,
) -> Result<BTreeMap<String, EvalReport>, MetricsError> {
    Confidence::LEVELS
        .iter()
        .map(|level| Ok((level.level().to_string(), report(&restrict(input, *level))?)))
        .collect()
}

/// Full report including the confidence strata.
pub fn evaluate(input: &EvalInput) -> Result<EvalReport, MetricsError> {
    let mut r = report(input)?;
    r.per_confidence = stratify_by_confidence(input)?;
    Ok(r)
}

fn pct(r: &Rate) -> String {
    if r.undefined {
        "n/a".into()
    } else {
        format!("{:.1}", 100.0 * r.value)
    }
}

/// Plain-text table, one row per confidence stratum.
pub fn summary_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>6} {:>6} {:>8} {:>9} {:>9} {:>11} {:>11} {:>6} {:>6}",
        "conf",
        "n",
        "NA",
        "Overlap",
        "IoU*@0.3",
        "IoU*@0.5",
        "R@1 IoU@0.3",
        "R@1 IoU@0.5",
        "Mean",
        "Acc"
    );
    let mut rows = vec![("all".to_string(), report)];
    rows.extend(
        report
            .per_confidence
            .iter()
            .map(|(k, r)| (format!(">= {k}"), r)),
    );
    for (label, r) in rows {
        let acc = r
            .qa_accuracy
            .as_ref()
            .map(pct)
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>6} {:>8} {:>9} {:>9} {:>11} {:>11} {:>6} {:>6}",
            label,
            r.n_queries,
            pct(&r.na_ratio),
            pct(&r.overlap),
            pct(&r.iou_star["0.3"]),
            pct(&r.iou_star["0.5"]),
            pct(&r.recall_at_1["0.3"]),
            pct(&r.recall_at_1["0.5"]),
            pct(&r.recall_mean),
            acc
        );
    }
    out
}
