//! Question answering and temporal grounding over long egocentric videos,
//! represented as timestamped caption tracks.
//!
//! Stages, in pipeline order:
//!
//! * [`corpus`]: caption tracks and query sets
//! * [`digest`]: drop uninformative and irrelevant captions, merge similar neighbours
//! * [`reasoner`]: prompt an LLM, parse answers with explanation and confidence
//! * [`ensemble`]: vote by confidence across repeated runs
//! * [`refine`]: pad and select NLQ candidate windows, generate classifier data
//! * [`metrics`]: IoU, Overlap, IoU*, R@1, accuracy, confidence strata
//! * [`pipeline`]: the end-to-end commands behind the CLI

pub mod config;
pub mod corpus;
pub mod digest;
pub mod ensemble;
pub mod error;
mod http;
pub mod interval;
pub mod metrics;
pub mod pipeline;
pub mod reasoner;
pub mod refine;
pub mod retry;
pub mod seeding;
pub mod similarity;

pub use corpus::{Caption, CaptionTrack, Query, QueryKind, QuerySet};
pub use interval::{CandidateInterval, Interval};
pub use reasoner::{Confidence, LlmAnswer, LlmBackend, Prompt};
pub use similarity::{Embedder, Embedding};
