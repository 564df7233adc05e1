//! Per-sample teacher selection by prediction ambiguity.
//!
//! A teacher's ambiguity on a sample is the Shannon entropy of its softmax
//! output, divided by `ln(num_classes)` so heads of different cardinality
//! compare on the same `[0, 1]` scale. The least ambiguous teacher wins;
//! ties go to the lowest teacher index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ImpurityScore {
    pub raw_entropy: f64,
    pub normalized: f64,
    pub teacher_index: usize,
    pub task_id: String,
}

/// `-sum p_i ln(max(p_i, clamp))`, in nats. Zero-probability classes
/// contribute nothing.
pub fn entropy_impurity(probs: &[f64], clamp: f64) -> Result<f64> {
    if probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Normalization(format!("negative or NaN probability in {probs:?}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Normalization(format!("probabilities sum to {total}")));
    }
    Ok(-probs.iter().map(|&p| p * p.max(clamp).ln()).sum::<f64>())
}

pub fn impurity_score(teacher_index: usize, task_id: &str, probs: &[f64], clamp: f64) -> Result<ImpurityScore> {
    if probs.len() < 2 {
        return Err(Error::Arity(format!("need at least 2 classes, got {}", probs.len())));
    }
    let raw_entropy = entropy_impurity(probs, clamp)?;
    Ok(ImpurityScore {
        raw_entropy,
        normalized: raw_entropy / (probs.len() as f64).ln(),
        teacher_index,
        task_id: task_id.to_string(),
    })
}

/// Index of the smallest score, ties resolved to the lowest teacher index.
pub fn argmin_teacher(scores: impl IntoIterator<Item = (usize, f64)>) -> Result<usize> {
    scores
        .into_iter()
        .reduce(|best, cur| {
            if cur.1 < best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Selection("no candidate teachers".into()))
}

/// One teacher's predicted distribution for a single sample.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub teacher_index: usize,
    pub task_id: &'a str,
    pub probs: &'a [f64],
}

pub fn select_teacher(candidates: &[Candidate<'_>], clamp: f64) -> Result<usize> {
    let scores = candidates
        .iter()
        .map(|c| impurity_score(c.teacher_index, c.task_id, c.probs, clamp).map(|s| (c.teacher_index, s.normalized)))
        .collect::<Result<Vec<_>>>()?;
    argmin_teacher(scores)
}

/// One teacher's `[N, C]` softmax output over a batch.
#[derive(Debug, Clone, Copy)]
pub struct TeacherBatch<'a> {
    pub teacher_index: usize,
    pub task_id: &'a str,
    pub probs: &'a Tensor,
}

/// Normalized impurity of every row of an `[N, C]` probability tensor.
pub fn batch_impurities(probs: &Tensor, clamp: f64) -> Result<Vec<f64>> {
    if probs.shape().len() != 2 {
        return Err(Error::Shape(format!("expected [N, C] probabilities, got {:?}", probs.shape())));
    }
    let classes = probs.shape()[1];
    probs
        .data()
        .chunks(classes)
        .map(|row| impurity_score(0, "", row, clamp).map(|s| s.normalized))
        .collect()
}

/// Independent per-sample selection over a batch.
pub fn select_batch(teachers: &[TeacherBatch<'_>], clamp: f64) -> Result<Vec<usize>> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::Selection("no candidate teachers".into()))?;
    let n = first.probs.shape()[0];
    if let Some(t) = teachers.iter().find(|t| t.probs.shape()[0] != n) {
        return Err(Error::Alignment(format!(
            "teacher {} scored {} samples, expected {n}",
            t.teacher_index,
            t.probs.shape()[0]
        )));
    }
    let scores = teachers
        .iter()
        .map(|t| batch_impurities(t.probs, clamp).map(|s| (t.teacher_index, s)))
        .collect::<Result<Vec<_>>>()?;
    select_from_scores(&scores)
}

/// Per-sample argmin over precomputed `(teacher_index, per-sample score)`.
pub fn select_from_scores(scores: &[(usize, Vec<f64>)]) -> Result<Vec<usize>> {
    let n = scores
        .first()
        .map(|(_, s)| s.len())
        .ok_or_else(|| Error::Selection("no candidate teachers".into()))?;
    if scores.iter().any(|(_, s)| s.len() != n) {
        return Err(Error::Alignment("teachers scored different batch sizes".into()));
    }
    (0..n)
        .map(|i| argmin_teacher(scores.iter().map(|(t, s)| (*t, s[i]))))
        .collect()
}
