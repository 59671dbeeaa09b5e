//! Confusion counts and the four presence-probing metrics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Records one answer. A missing prediction counts as wrong.
    pub fn record(&mut self, label_yes: bool, predicted_yes: Option<bool>) {
        match (label_yes, predicted_yes) {
            (true, Some(true)) => self.tp += 1,
            (true, _) => self.fn_ += 1,
            (false, Some(false)) => self.tn += 1,
            (false, _) => self.fp += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Metrics::from_parts(
            ratio(self.tp + self.tn, self.total()),
            ratio(self.tp, self.tp + self.fp),
            ratio(self.tp, self.tp + self.fn_),
        )
    }
}

/// Fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    let d = precision + recall;
    if d > 0.0 {
        2.0 * precision * recall / d
    } else {
        0.0
    }
}

impl Metrics {
    pub fn from_parts(accuracy: f64, precision: f64, recall: f64) -> Self {
        Self {
            accuracy,
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }

    /// Field-wise unweighted mean.
    pub fn mean(all: &[Metrics]) -> Metrics {
        if all.is_empty() {
            return Metrics::default();
        }
        let n = all.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            accuracy: sum(|m| m.accuracy),
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            f1: sum(|m| m.f1),
        }
    }

    pub fn as_percent(&self) -> Metrics {
        Metrics {
            accuracy: 100.0 * self.accuracy,
            precision: 100.0 * self.precision,
            recall: 100.0 * self.recall,
            f1: 100.0 * self.f1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let mut c = Confusion::default();
        for y in [true, false, true, false] {
            c.record(y, Some(y));
        }
        let m = c.metrics();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn always_yes_on_balanced_set() {
        let mut c = Confusion::default();
        for y in [true, false, true, false] {
            c.record(y, Some(true));
        }
        let m = c.metrics();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn non_answers_are_wrong() {
        let mut c = Confusion::default();
        c.record(true, None);
        c.record(false, None);
        assert_eq!((c.fn_, c.fp), (1, 1));
    }

    #[test]
    fn degenerate_f1() {
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert_eq!(Confusion::default().metrics(), Metrics::default());
    }
}
