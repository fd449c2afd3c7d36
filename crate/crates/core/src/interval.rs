//! Half-open time windows measured in seconds.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::InvalidInterval;

/// Round a timestamp to millisecond precision.
///
/// All timestamps entering the pipeline pass through this.
pub fn round_ms(seconds: f64) -> f64 {
    let r = (seconds * 1000.0).round() / 1000.0;
    // normalize -0.0
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// A time window `[start_s, end_s]` with `start_s < end_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    start_s: f64,
    end_s: f64,
}

/// A coarse window proposed by the LLM for an NLQ query.
pub type CandidateInterval = Interval;

impl Interval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, InvalidInterval> {
        if !start_s.is_finite() || !end_s.is_finite() {
            return Err(InvalidInterval::NonFinite);
        }
        if start_s >= end_s {
            return Err(InvalidInterval::Inverted { start_s, end_s });
        }
        Ok(Self { start_s, end_s })
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    pub fn end_s(&self) -> f64 {
        self.end_s
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Length of the overlap with `other`, zero when disjoint or touching.
    pub fn intersection_len(&self, other: &Interval) -> f64 {
        let lo = self.start_s.max(other.start_s);
        let hi = self.end_s.min(other.end_s);
        (hi - lo).max(0.0)
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.start_s <= other.start_s && other.end_s <= self.end_s
    }

    /// Clip to `bounds`; `None` when nothing of positive length remains.
    pub fn clamp_to(&self, bounds: &Interval) -> Option<Interval> {
        Interval::new(
            self.start_s.max(bounds.start_s),
            self.end_s.min(bounds.end_s),
        )
        .ok()
    }

    /// Smallest window covering both.
    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            start_s: self.start_s.min(other.start_s),
            end_s: self.end_s.max(other.end_s),
        }
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = InvalidInterval;

    fn try_from(v: [f64; 2]) -> Result<Self, Self::Error> {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.start_s, i.end_s]
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start_s, self.end_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_and_empty() {
        assert!(Interval::new(4.0, 2.0).is_err());
        assert!(Interval::new(2.0, 2.0).is_err());
        assert!(Interval::new(f64::NAN, 2.0).is_err());
    }

    #[test]
    fn intersection_and_clamp() {
        let a = Interval::new(0.0, 10.0).unwrap();
        let b = Interval::new(5.0, 20.0).unwrap();
        assert_eq!(a.intersection_len(&b), 5.0);
        assert_eq!(a.clamp_to(&b), Some(Interval::new(5.0, 10.0).unwrap()));
        let c = Interval::new(10.0, 12.0).unwrap();
        assert_eq!(a.intersection_len(&c), 0.0);
        assert_eq!(a.clamp_to(&c), None);
        assert_eq!(a.hull(&c), Interval::new(0.0, 12.0).unwrap());
    }

    #[test]
    fn round_ms_is_exact_on_millis() {
        assert_eq!(round_ms(1.23449), 1.234);
        assert_eq!(round_ms(-0.0001), 0.0);
        assert_eq!(round_ms(21.3), 21.3);
    }
}
