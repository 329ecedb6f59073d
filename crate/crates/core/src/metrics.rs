use serde::{Deserialize, Serialize};

/// Precision / recall / F1 with the raw counts they came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Zero denominators yield 0 for the affected ratio.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1, tp, fp, fn_ }
    }
}

/// `num / den`, or 0 when `den == 0`.
pub fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// A rate reported next to the counts that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountedRate {
    pub hits: usize,
    pub total: usize,
    pub rate: f64,
}

impl CountedRate {
    pub fn new(hits: usize, total: usize) -> Self {
        Self { hits, total, rate: ratio(hits, total) }
    }

    pub fn percent(&self) -> f64 {
        self.rate * 100.0
    }

    pub fn merge(self, other: CountedRate) -> CountedRate {
        CountedRate::new(self.hits + other.hits, self.total + other.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_counts() {
        let p = Prf::from_counts(0, 0, 0);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let p = Prf::from_counts(0, 0, 4);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let p = Prf::from_counts(10, 0, 0);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn counted_rate_merge() {
        let r = CountedRate::new(1, 2).merge(CountedRate::new(2, 2));
        assert_eq!((r.hits, r.total), (3, 4));
        assert_eq!(r.rate, 0.75);
        assert_eq!(CountedRate::new(0, 0).rate, 0.0);
    }
}
