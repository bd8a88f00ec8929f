//! Detection metrics over scored samples.
//!
//! Conventions: a score is the probability of "fake" (label 1) and a
//! sample is flagged fake when `score >= threshold`.
//!
//! * AP: records sorted by score descending, ties broken by ascending id;
//!   `AP = (1/P) Σ_k precision@k` over the ranks `k` holding a positive.
//! * ECE: 10 equal-width bins over the score range `[0, 1]`, confidence
//!   `max(s, 1 - s)`, accuracy of the predicted class; empty bins skipped.
//! * `threshold_at_fpr`: the smallest observed real score `τ` whose false
//!   positive rate `|{r ≥ τ}| / n` is at most the target; when no observed
//!   score qualifies, the next float above the largest score.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fewer calibration reals than this make the 1% quantile unstable.
pub const MIN_CALIBRATION_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub score: f64,
    /// Generator family, `none` for reals.
    pub family: String,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, label: u8, score: f64, family: impl Into<String>) -> Self {
        ScoreRecord {
            id: id.into(),
            label,
            score,
            family: family.into(),
        }
    }

    fn flagged(&self, threshold: f64) -> bool {
        self.score >= threshold
    }
}

fn nonempty(records: &[ScoreRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} of an empty record set")));
    }
    Ok(())
}

pub fn accuracy(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    nonempty(records, "accuracy")?;
    let hits = records
        .iter()
        .filter(|r| r.flagged(threshold) == (r.label == 1))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Score descending, then id ascending.
pub fn ranking_order(a: &ScoreRecord, b: &ScoreRecord) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

pub fn average_precision(records: &[ScoreRecord]) -> Result<f64> {
    let positives = records.iter().filter(|r| r.label == 1).count();
    if positives == 0 || positives == records.len() {
        return Err(Error::InvalidArgument(
            "average precision needs both classes".into(),
        ));
    }
    let mut ranked: Vec<&ScoreRecord> = records.iter().collect();
    ranked.sort_by(|a, b| ranking_order(a, b));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, r) in ranked.iter().enumerate() {
        if r.label == 1 {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

pub const ECE_BINS: usize = 10;

fn bin_of(score: f64, bins: usize) -> usize {
    ((score * bins as f64).floor() as usize).min(bins - 1)
}

pub fn ece(records: &[ScoreRecord], bins: usize) -> Result<f64> {
    nonempty(records, "ECE")?;
    if bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for r in records {
        let b = bin_of(r.score, bins);
        conf[b] += r.score.max(1.0 - r.score);
        hits[b] += (r.flagged(0.5) == (r.label == 1)) as usize;
        count[b] += 1;
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        total += nb / n * (conf[b] / nb - hits[b] as f64 / nb).abs();
    }
    Ok(total)
}

/// Threshold on real-only scores at the target false positive rate.
pub fn threshold_at_fpr(real_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if real_scores.is_empty() {
        return Err(Error::InvalidArgument("no real scores to calibrate on".into()));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::InvalidArgument(format!("target FPR {target_fpr} outside [0, 1]")));
    }
    if real_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration score".into()));
    }
    let mut sorted = real_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n = sorted.len();
    let allowed = (target_fpr * n as f64 + 1e-9).floor() as usize;
    if allowed >= n {
        return Ok(*sorted.last().unwrap());
    }
    // Every τ ≤ sorted[allowed] flags at least allowed + 1 reals.
    let bar = sorted[allowed];
    Ok(sorted[..allowed]
        .iter()
        .rev()
        .find(|&&s| s > bar)
        .copied()
        .unwrap_or_else(|| bar.next_up()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    /// Fraction of fakes flagged; absent without fakes.
    pub tpr: Option<f64>,
    /// Fraction of reals flagged; absent without reals.
    pub rfpr: Option<f64>,
}

pub fn tpr_rfpr_at(records: &[ScoreRecord], tau: f64) -> Rates {
    let rate = |label: u8| {
        let group: Vec<&ScoreRecord> = records.iter().filter(|r| r.label == label).collect();
        (!group.is_empty())
            .then(|| group.iter().filter(|r| r.flagged(tau)).count() as f64 / group.len() as f64)
    };
    Rates {
        tpr: rate(1),
        rfpr: rate(0),
    }
}
