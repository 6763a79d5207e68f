//! Cosine scoring, the max-margin hinge loss and candidate ranking.

use crate::error::{Error, Result};
use crate::tensor::MIN_NORM;
use std::cmp::Ordering;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
        }
    }
}

impl LossConfig {
    pub fn new(margin: f64) -> Result<Self> {
        // cosine differences never exceed 2
        if !(margin > 0.0 && margin <= 2.0) {
            return Err(Error::Config(format!("margin must lie in (0, 2], got {margin}")));
        }
        Ok(Self { margin })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("cosine", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::Degenerate(format!(
            "vector norms {na:e} and {nb:e} (minimum {MIN_NORM:e})"
        )));
    }
    Ok(dot / (na * nb))
}

pub fn hinge_loss(cos_pos: f64, cos_neg: f64, margin: f64) -> f64 {
    (margin - cos_pos + cos_neg).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub id: usize,
    pub score: f64,
    pub label: u8,
}

/// Final representations of one (question, candidate) pair. With attention
/// the question side depends on the candidate, so each pair carries its own.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRepresentation {
    pub id: usize,
    pub label: u8,
    pub question: Vec<f64>,
    pub answer: Vec<f64>,
}

/// Descending score, ties by ascending id.
pub fn order_candidates(mut scored: Vec<ScoredCandidate>) -> Result<Vec<ScoredCandidate>> {
    if scored.is_empty() {
        return Err(Error::Data("cannot rank an empty candidate pool".into()));
    }
    scored.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
    Ok(scored)
}

pub fn rank_candidates(pairs: &[PairRepresentation]) -> Result<Vec<ScoredCandidate>> {
    let scored = pairs
        .iter()
        .map(|p| {
            Ok(ScoredCandidate {
                id: p.id,
                score: cosine(&p.question, &p.answer)?,
                label: p.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    order_candidates(scored)
}
