//! Vote by confidence across repeated QA runs, and confidence filtering.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::QueryKind;
use crate::reasoner::{Confidence, LlmAnswer};

/// Non-empty answers to one QA question.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerPool {
    qid: String,
    answers: Vec<LlmAnswer>,
}

impl AnswerPool {
    /// `None` if `answers` is empty or mixes qids or kinds other than QA.
    pub fn new(answers: Vec<LlmAnswer>) -> Option<Self> {
        let qid = answers.first()?.qid.clone();
        answers
            .iter()
            .all(|a| a.qid == qid && a.kind == QueryKind::Qa)
            .then_some(Self { qid, answers })
    }

    pub fn qid(&self) -> &str {
        &self.qid
    }

    pub fn answers(&self) -> &[LlmAnswer] {
        &self.answers
    }

    pub fn max_confidence(&self) -> Confidence {
        self.answers
            .iter()
            .map(|a| a.confidence)
            .max()
            .expect("pool is non-empty")
    }
}

/// Pick the highest-confidence answer; ties are broken uniformly at random
/// with a ChaCha8 stream seeded by `rng_seed`. When exactly one answer has
/// the top confidence, no randomness is consumed.
pub fn vote_by_confidence(pool: &AnswerPool, rng_seed: u64) -> &LlmAnswer {
    let top = pool.max_confidence();
    let best: Vec<&LlmAnswer> = pool
        .answers
        .iter()
        .filter(|a| a.confidence == top)
        .collect();
    if best.len() == 1 {
        return best[0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    best[rng.random_range(0..best.len())]
}

/// Answers with confidence at least `min_level`, order preserved.
pub fn filter_by_confidence(answers: &[LlmAnswer], min_level: Confidence) -> Vec<LlmAnswer> {
    answers
        .iter()
        .filter(|a| a.confidence >= min_level)
        .cloned()
        .collect()
}
