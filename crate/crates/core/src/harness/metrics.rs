use serde::{Deserialize, Serialize};

use crate::corpus::LabelVocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub bucket: String,
    pub count: usize,
    pub accuracy: f64,
    pub micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub accuracy: f64,
    /// Micro-averaged F1 over every class except the negative one.
    pub micro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub buckets: Vec<BucketMetrics>,
}

pub const BUCKETS: [(&str, usize, usize); 3] = [("(0,25]", 1, 25), ("(25,50]", 26, 50), (">50", 51, usize::MAX)];

/// One scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub gold: usize,
    pub predicted: usize,
    pub tokens: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn micro_f1(outcomes: &[Outcome], negative: Option<usize>) -> f64 {
    let positive = |c: usize| Some(c) != negative;
    let tp = outcomes.iter().filter(|o| o.gold == o.predicted && positive(o.gold)).count();
    let predicted = outcomes.iter().filter(|o| positive(o.predicted)).count();
    let gold = outcomes.iter().filter(|o| positive(o.gold)).count();
    f1(ratio(tp, predicted), ratio(tp, gold))
}

fn accuracy(outcomes: &[Outcome]) -> f64 {
    ratio(outcomes.iter().filter(|o| o.gold == o.predicted).count(), outcomes.len())
}

impl Metrics {
    /// `negative` names the class left out of micro-F1; if the vocabulary has
    /// no such label every class counts.
    pub fn compute(outcomes: &[Outcome], labels: &LabelVocab, negative: &str) -> Metrics {
        let neg = labels.index(negative);
        let per_class = (0..labels.len())
            .map(|c| {
                let tp = outcomes.iter().filter(|o| o.gold == c && o.predicted == c).count();
                let predicted = outcomes.iter().filter(|o| o.predicted == c).count();
                let support = outcomes.iter().filter(|o| o.gold == c).count();
                let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
                ClassMetrics {
                    label: labels.label(c).to_string(),
                    precision,
                    recall,
                    f1: f1(precision, recall),
                    support,
                }
            })
            .collect();
        let buckets = BUCKETS
            .iter()
            .map(|&(name, lo, hi)| {
                let sub: Vec<Outcome> = outcomes
                    .iter()
                    .filter(|o| (lo..=hi).contains(&o.tokens))
                    .copied()
                    .collect();
                BucketMetrics {
                    bucket: name.to_string(),
                    count: sub.len(),
                    accuracy: accuracy(&sub),
                    micro_f1: micro_f1(&sub, neg),
                }
            })
            .collect();
        Metrics {
            count: outcomes.len(),
            accuracy: accuracy(outcomes),
            micro_f1: micro_f1(outcomes, neg),
            per_class,
            buckets,
        }
    }
}
