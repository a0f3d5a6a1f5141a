//! Accuracy, average precision with junk removal, database ranking and
//! classification mAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relevance {
    Positive,
    Negative,
    Junk,
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Non-interpolated AP: junk entries are dropped, then precision is
/// averaged over the ranks of the positives.
pub fn average_precision(ranked: &[Relevance]) -> Result<f64> {
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for r in ranked {
        match r {
            Relevance::Junk => continue,
            Relevance::Negative => rank += 1,
            Relevance::Positive => {
                rank += 1;
                hits += 1;
                sum += hits as f64 / rank as f64;
            }
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(sum / hits as f64)
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::NoQueries);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    /// `(image id, similarity)`, best first.
    pub entries: Vec<(String, f64)>,
    pub junk_removed: bool,
}

/// Ranks `db` by dot product with `query`, descending; equal scores keep
/// database order.
pub fn rank_database(query_id: &str, query: &[f64], db: &[(String, Vec<f64>)]) -> Result<Ranking> {
    let mut entries = Vec::with_capacity(db.len());
    for (id, v) in db {
        if v.len() != query.len() {
            return Err(Error::DimensionMismatch(format!(
                "database vector {id} has dim {}, query has {}",
                v.len(),
                query.len()
            )));
        }
        entries.push((id.clone(), query.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()));
    }
    entries.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(Ranking {
        query_id: query_id.to_string(),
        entries,
        junk_removed: false,
    })
}

/// Per-class AP of ranking the test items by that class's score, and the
/// mean over classes. `truth[i]` is the class index of item `i`.
pub fn classification_map(scores: &[Vec<f64>], truth: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if scores.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: truth.len(),
        });
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        if !truth.contains(&c) {
            return Err(Error::EmptyClass(c.to_string()));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]));
        let rel: Vec<Relevance> = order
            .iter()
            .map(|&i| if truth[i] == c { Relevance::Positive } else { Relevance::Negative })
            .collect();
        per_class.push(average_precision(&rel)?);
    }
    Ok((mean_ap(&per_class)?, per_class))
}
