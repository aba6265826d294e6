//! Exact-match top-k metrics over ranked predictions.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::FormulaIR;

pub const REPORT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("k must be at least 1")]
    ZeroK,
}

pub fn match_formula(pred: &FormulaIR, gold: &FormulaIR) -> bool {
    pred == gold
}

pub fn match_sketch(pred: &FormulaIR, gold: &FormulaIR) -> bool {
    pred.sketch() == gold.sketch()
}

pub fn match_ranges(pred: &FormulaIR, gold: &FormulaIR) -> bool {
    pred.ranges() == gold.ranges()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Formula,
    Sketch,
    Range,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Formula, Metric::Sketch, Metric::Range];

    pub fn matches(self, pred: &FormulaIR, gold: &FormulaIR) -> bool {
        match self {
            Metric::Formula => match_formula(pred, gold),
            Metric::Sketch => match_sketch(pred, gold),
            Metric::Range => match_ranges(pred, gold),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Formula => "formula",
            Metric::Sketch => "sketch",
            Metric::Range => "range",
        }
    }
}

/// Keeps the first occurrence of each token stream.
pub fn dedup_ranked(preds: &[FormulaIR]) -> Vec<FormulaIR> {
    let mut seen = HashSet::new();
    preds.iter().filter(|p| seen.insert(p.to_string())).cloned().collect()
}

/// Whether any of the first `k` predictions matches.
pub fn hit_at_k(preds: &[FormulaIR], gold: &FormulaIR, k: usize, metric: Metric) -> Result<bool, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    Ok(preds.iter().take(k).any(|p| metric.matches(p, gold)))
}

/// Fraction of examples credited at `k`. An empty input scores 0.
pub fn topk_accuracy(ranked: &[Vec<FormulaIR>], golds: &[FormulaIR], k: usize, metric: Metric) -> Result<f64, MetricError> {
    assert_eq!(ranked.len(), golds.len(), "one ranking per gold");
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (preds, gold) in ranked.iter().zip(golds) {
        if hit_at_k(preds, gold, k, metric)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LengthBucket {
    One,
    Two,
    Three,
    FourToFive,
    SixPlus,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 5] =
        [LengthBucket::One, LengthBucket::Two, LengthBucket::Three, LengthBucket::FourToFive, LengthBucket::SixPlus];

    pub fn of(sketch_len: usize) -> Self {
        match sketch_len {
            0 | 1 => LengthBucket::One,
            2 => LengthBucket::Two,
            3 => LengthBucket::Three,
            4 | 5 => LengthBucket::FourToFive,
            _ => LengthBucket::SixPlus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::One => "1",
            LengthBucket::Two => "2",
            LengthBucket::Three => "3",
            LengthBucket::FourToFive => "4-5",
            LengthBucket::SixPlus => "6+",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub bucket: String,
    pub count: usize,
    pub hits: usize,
    pub accuracy: f64,
}

/// Top-1 formula accuracy per sketch-length bucket, from `(sketch_len, top1_hit)` pairs.
/// Empty buckets are kept with accuracy 0.
pub fn breakdown_by_sketch_length(results: &[(usize, bool)]) -> Vec<BucketStat> {
    LengthBucket::ALL
        .iter()
        .map(|&b| {
            let in_bucket: Vec<bool> = results.iter().filter(|(len, _)| LengthBucket::of(*len) == b).map(|r| r.1).collect();
            let hits = in_bucket.iter().filter(|h| **h).count();
            let count = in_bucket.len();
            BucketStat {
                bucket: b.label().to_string(),
                count,
                hits,
                accuracy: if count == 0 { 0.0 } else { hits as f64 / count as f64 },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub hits: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub rows: Vec<MetricRow>,
    pub buckets: Vec<BucketStat>,
    /// Filter and UNK-drop counts carried over from preprocessing, when known.
    pub dropped: std::collections::BTreeMap<String, u64>,
}

impl EvalReport {
    /// `ranked` lists are deduplicated here before scoring.
    pub fn compute(ranked: &[Vec<FormulaIR>], golds: &[FormulaIR], ks: &[usize]) -> Result<Self, MetricError> {
        assert_eq!(ranked.len(), golds.len(), "one ranking per gold");
        let ranked: Vec<Vec<FormulaIR>> = ranked.iter().map(|r| dedup_ranked(r)).collect();
        let mut rows = Vec::new();
        for metric in Metric::ALL {
            for &k in ks {
                let mut hits = 0;
                for (preds, gold) in ranked.iter().zip(golds) {
                    hits += hit_at_k(preds, gold, k, metric)? as usize;
                }
                let accuracy = if golds.is_empty() { 0.0 } else { hits as f64 / golds.len() as f64 };
                rows.push(MetricRow { metric: metric.name().to_string(), k, hits, accuracy });
            }
        }
        let per_example: Vec<(usize, bool)> = ranked
            .iter()
            .zip(golds)
            .map(|(preds, gold)| (gold.sketch_length(), preds.first().is_some_and(|p| match_formula(p, gold))))
            .collect();
        Ok(Self { examples: golds.len(), rows, buckets: breakdown_by_sketch_length(&per_example), dropped: Default::default() })
    }

    pub fn accuracy(&self, metric: Metric, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric.name() && r.k == k).map(|r| r.accuracy)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples: {}", self.examples)?;
        writeln!(f, "{:<8} {:>4} {:>8} {:>9}", "metric", "k", "hits", "accuracy")?;
        for r in &self.rows {
            writeln!(f, "{:<8} {:>4} {:>8} {:>9.4}", r.metric, r.k, r.hits, r.accuracy)?;
        }
        writeln!(f, "top-1 formula accuracy by sketch length")?;
        for b in &self.buckets {
            writeln!(f, "{:<8} {:>8} {:>8} {:>9.4}", b.bucket, b.count, b.hits, b.accuracy)?;
        }
        for (k, v) in &self.dropped {
            writeln!(f, "dropped {k}: {v}")?;
        }
        Ok(())
    }
}
