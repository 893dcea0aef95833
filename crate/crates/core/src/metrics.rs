//! Corpus BLEU, repetition rate and length-bucketed reports.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 4;

/// Smoothing applied by [`bleu`]; written into every report record.
pub const BLEU_SMOOTHING: &str = "add-one on n-gram orders >= 2";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    /// Modified precisions; order 1 unsmoothed, orders >= 2 add-one.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram counts up to order 4, add-one
/// smoothing on orders >= 2 and the standard brevity penalty.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuScore> {
    if refs.is_empty() || refs.iter().any(Vec::is_empty) {
        return Err(Error::contract("BLEU needs non-empty references"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "BLEU: {} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=MAX_NGRAM {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let precisions: Vec<f64> = (0..MAX_NGRAM)
        .map(|i| {
            if i == 0 {
                if total[0] == 0 {
                    0.0
                } else {
                    matched[0] as f64 / total[0] as f64
                }
            } else {
                (matched[i] + 1) as f64 / (total[i] + 1) as f64
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Fraction of tokens equal to their immediate predecessor, over all
/// tokens of all sequences.
pub fn repetition_rate<T: PartialEq>(seqs: &[Vec<T>]) -> f64 {
    let total: usize = seqs.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let repeats: usize = seqs
        .iter()
        .map(|s| s.windows(2).filter(|w| w[0] == w[1]).count())
        .sum();
    repeats as f64 / total as f64
}

/// Half-open reference-length range `(lower, upper]`; `upper = None` is
/// unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LengthBucket {
    pub lower: usize,
    pub upper: Option<usize>,
}

impl LengthBucket {
    pub fn contains(&self, len: usize) -> bool {
        len > self.lower && self.upper.is_none_or(|u| len <= u)
    }

    pub fn label(&self) -> String {
        match self.upper {
            Some(u) => format!("({}, {}]", self.lower, u),
            None => format!("({}, inf)", self.lower),
        }
    }
}

pub const DEFAULT_BUCKETS: [LengthBucket; 4] = [
    LengthBucket {
        lower: 0,
        upper: Some(20),
    },
    LengthBucket {
        lower: 20,
        upper: Some(40),
    },
    LengthBucket {
        lower: 40,
        upper: Some(60),
    },
    LengthBucket {
        lower: 60,
        upper: None,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub bucket: LengthBucket,
    pub n_sentences: usize,
    pub bleu: BleuScore,
}

/// BLEU per reference-length bucket. Empty buckets are omitted.
pub fn length_bucket_report<T: Eq + Hash + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    buckets: &[LengthBucket],
) -> Result<Vec<BucketReport>> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(
            "length buckets: hypothesis/reference count mismatch",
        ));
    }
    let mut out = Vec::new();
    for &bucket in buckets {
        let idx: Vec<usize> = (0..refs.len())
            .filter(|&i| bucket.contains(refs[i].len()))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let h: Vec<Vec<T>> = idx.iter().map(|&i| hyps[i].clone()).collect();
        let r: Vec<Vec<T>> = idx.iter().map(|&i| refs[i].clone()).collect();
        out.push(BucketReport {
            bucket,
            n_sentences: idx.len(),
            bleu: bleu(&h, &r)?,
        });
    }
    Ok(out)
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n_sentences: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bucket: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<String>,
}

impl MetricRecord {
    pub fn bleu(score: &BleuScore, n_sentences: usize, bucket: Option<String>) -> Self {
        MetricRecord {
            metric: "bleu".into(),
            value: score.score,
            n_sentences,
            bucket,
            smoothing: Some(BLEU_SMOOTHING.into()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}
