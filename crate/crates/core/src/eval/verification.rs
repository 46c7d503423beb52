use crate::data::Pair;
use crate::error::{Error, Result};
use crate::geometry::{dot, l2_normalize_rows, Matrix};
use std::collections::BTreeMap;

pub const FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationResult {
    /// Mean held-out accuracy over the folds.
    pub accuracy: f64,
    /// Most frequently selected threshold (smallest on ties).
    pub best_threshold: f64,
}

/// Fold of pair `k` out of `n`: contiguous blocks whose sizes differ by at most one.
pub fn fold_of(k: usize, n: usize) -> usize {
    k * FOLDS / n
}

/// Ten-fold verification accuracy on precomputed scores.
///
/// Candidate thresholds are the midpoints between consecutive distinct scores
/// of the whole pair set, so every cut depends on score ranks only. Within a
/// fold the candidate with the best accuracy on the other nine folds is
/// applied (`score > t` means same), the smallest winning on ties. With a
/// single distinct score that score is the only candidate.
pub fn ten_fold_accuracy(scores: &[f64], same: &[bool]) -> Result<VerificationResult> {
    let n = scores.len();
    if same.len() != n {
        return Err(Error::shape("verification labels", n, same.len()));
    }
    if n < FOLDS {
        return Err(Error::InsufficientData(format!("{n} pairs for {FOLDS} folds")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain {
            what: "verification score",
            value: *s,
            domain: "finite",
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut acc_sum = 0.0;
    let mut picks: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for f in 0..FOLDS {
        let in_train = |k: usize| fold_of(k, n) != f;
        // before any cut everything is predicted "same"
        let mut correct = (0..n).filter(|&k| in_train(k) && same[k]).count() as i64;
        let mut best: Option<(i64, f64)> = None;
        for i in 0..n - 1 {
            let k = order[i];
            if in_train(k) {
                correct += if same[k] { -1 } else { 1 };
            }
            let (lo, hi) = (scores[k], scores[order[i + 1]]);
            if lo == hi {
                continue;
            }
            if best.is_none_or(|(c, _)| correct > c) {
                best = Some((correct, 0.5 * (lo + hi)));
            }
        }
        let t = best.map_or(scores[order[0]], |(_, t)| t);
        let held: Vec<usize> = (0..n).filter(|&k| !in_train(k)).collect();
        let hits = held.iter().filter(|&&k| (scores[k] > t) == same[k]).count();
        acc_sum += hits as f64 / held.len() as f64;
        picks.entry(t.to_bits()).or_insert((t, 0)).1 += 1;
    }
    let best_threshold = picks
        .values()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .map(|v| v.0)
        .unwrap_or(0.0);
    Ok(VerificationResult {
        accuracy: acc_sum / FOLDS as f64,
        best_threshold,
    })
}

/// Cosine similarity of each pair, rows normalized first.
pub fn pair_scores(embeddings: &Matrix, pairs: &[Pair]) -> Result<Vec<f64>> {
    let unit = l2_normalize_rows(embeddings)?;
    pairs
        .iter()
        .map(|p| {
            if p.a >= unit.rows() || p.b >= unit.rows() {
                return Err(Error::InvalidSpec {
                    field: "pair",
                    reason: format!("index {} out of {} embeddings", p.a.max(p.b), unit.rows()),
                });
            }
            Ok(dot(unit.row(p.a), unit.row(p.b)).clamp(-1.0, 1.0))
        })
        .collect()
}

pub fn verification_accuracy(embeddings: &Matrix, pairs: &[Pair]) -> Result<VerificationResult> {
    let scores = pair_scores(embeddings, pairs)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    ten_fold_accuracy(&scores, &same)
}
