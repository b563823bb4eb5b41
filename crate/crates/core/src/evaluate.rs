//! Exact-match triplet scoring: micro precision/recall/F1, per-sentiment
//! breakdowns, and multi-triplet bucketing.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::corpus::{Sentiment, Triplet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction list has {predictions} sentences, gold has {gold}")]
    LengthMismatch { predictions: usize, gold: usize },
}

/// Pooled counts and the derived ratios. A predicted triplet is a true
/// positive iff a gold triplet matches its target span, opinion span, and
/// sentiment exactly; zero denominators yield zero ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreReport {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> ScoreReport {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ScoreReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P={:.4} R={:.4} F1={:.4} (tp={} fp={} fn={})",
            self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_
        )
    }
}

/// Full evaluation output: overall report plus breakdowns.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub overall: ScoreReport,
    pub per_sentiment: Vec<(Sentiment, ScoreReport)>,
    /// Reports keyed by gold triplet count: 0, 1, 2, 3, then ≥4 pooled.
    pub buckets: Vec<Bucket>,
    /// Fraction of sentences with more than one gold triplet.
    pub multi_triplet_ratio: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Bucket {
    pub key: BucketKey,
    pub sentences: usize,
    pub report: ScoreReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BucketKey {
    Exactly(usize),
    AtLeast(usize),
}

impl fmt::Display for BucketKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BucketKey::Exactly(n) => write!(f, "{n}"),
            BucketKey::AtLeast(n) => write!(f, "ge{n}"),
        }
    }
}

fn bucket_of(gold_count: usize) -> BucketKey {
    if gold_count >= 4 {
        BucketKey::AtLeast(4)
    } else {
        BucketKey::Exactly(gold_count)
    }
}

fn counts(predictions: &[Triplet], gold: &[Triplet]) -> (usize, usize, usize) {
    let p: BTreeSet<Triplet> = predictions.iter().copied().collect();
    let g: BTreeSet<Triplet> = gold.iter().copied().collect();
    let tp = p.intersection(&g).count();
    (tp, p.len() - tp, g.len() - tp)
}

/// Micro scoring pooled over all sentences.
pub fn score(
    predictions: &[Vec<Triplet>],
    gold: &[Vec<Triplet>],
) -> Result<ScoreReport, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predictions.iter().zip(gold) {
        let (t, f, n) = counts(p, g);
        tp += t;
        fp += f;
        fn_ += n;
    }
    Ok(ScoreReport::from_counts(tp, fp, fn_))
}

/// Overall report plus per-sentiment and per-bucket breakdowns. Sentences
/// fall into buckets by their gold triplet count; pooling the buckets
/// reproduces the overall counts exactly.
pub fn evaluate(
    predictions: &[Vec<Triplet>],
    gold: &[Vec<Triplet>],
) -> Result<Evaluation, EvalError> {
    let overall = score(predictions, gold)?;

    let mut per_sentiment = Vec::new();
    for sentiment in [Sentiment::Pos, Sentiment::Neg, Sentiment::Neu] {
        let filter = |side: &[Vec<Triplet>]| -> Vec<Vec<Triplet>> {
            side.iter()
                .map(|ts| {
                    ts.iter()
                        .copied()
                        .filter(|t| t.sentiment == sentiment)
                        .collect()
                })
                .collect()
        };
        let report = score(&filter(predictions), &filter(gold))?;
        per_sentiment.push((sentiment, report));
    }

    let keys: Vec<BucketKey> = gold.iter().map(|g| bucket_of(unique_count(g))).collect();
    let mut present: Vec<BucketKey> = keys.clone();
    present.sort();
    present.dedup();
    let mut buckets = Vec::new();
    for key in present {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let mut sentences = 0;
        for ((p, g), k) in predictions.iter().zip(gold).zip(&keys) {
            if *k == key {
                let (t, f, n) = counts(p, g);
                tp += t;
                fp += f;
                fn_ += n;
                sentences += 1;
            }
        }
        buckets.push(Bucket {
            key,
            sentences,
            report: ScoreReport::from_counts(tp, fp, fn_),
        });
    }

    let multi = gold.iter().filter(|g| unique_count(g) > 1).count();
    let multi_triplet_ratio = if gold.is_empty() {
        0.0
    } else {
        multi as f64 / gold.len() as f64
    };

    Ok(Evaluation {
        overall,
        per_sentiment,
        buckets,
        multi_triplet_ratio,
    })
}

fn unique_count(triplets: &[Triplet]) -> usize {
    triplets.iter().collect::<BTreeSet<_>>().len()
}

impl Evaluation {
    /// Machine-readable `metric=value` lines for harness consumption.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("precision", format!("{:.6}", self.overall.precision));
        push("recall", format!("{:.6}", self.overall.recall));
        push("f1", format!("{:.6}", self.overall.f1));
        push("tp", self.overall.tp.to_string());
        push("fp", self.overall.fp.to_string());
        push("fn", self.overall.fn_.to_string());
        for (s, r) in &self.per_sentiment {
            push(
                &format!("{}_f1", s.as_str().to_lowercase()),
                format!("{:.6}", r.f1),
            );
        }
        for b in &self.buckets {
            push(
                &format!("bucket{}_f1", b.key),
                format!("{:.6}", b.report.f1),
            );
            push(
                &format!("bucket{}_sentences", b.key),
                b.sentences.to_string(),
            );
        }
        push("r_multi", format!("{:.6}", self.multi_triplet_ratio));
        out
    }
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "triplets: {}", self.overall)?;
        for (s, r) in &self.per_sentiment {
            writeln!(f, "  {s}: {r}")?;
        }
        for b in &self.buckets {
            writeln!(
                f,
                "  bucket {} ({} sentences): {}",
                b.key, b.sentences, b.report
            )?;
        }
        write!(
            f,
            "  multi-triplet sentence ratio: {:.4}",
            self.multi_triplet_ratio
        )
    }
}
