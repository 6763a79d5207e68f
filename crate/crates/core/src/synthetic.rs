//! Generated answer-selection data with a known right answer.
//!
//! Each question draws its tokens from a shared content vocabulary. The
//! positive candidate repeats some of them and pads with fresh tokens; the
//! negatives never use a question token.

use crate::data::{Candidate, QADataset, QAQuestion, Split};
use crate::embedding::tokenize;
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub questions: usize,
    pub negatives: usize,
    /// Size of the content vocabulary `t0 .. t{n-1}`.
    pub vocabulary: usize,
    pub question_len: usize,
    pub answer_len: usize,
    /// Question tokens copied into the positive.
    pub shared: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            questions: 20,
            negatives: 4,
            vocabulary: 400,
            question_len: 8,
            answer_len: 12,
            shared: 3,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.questions == 0 || self.question_len == 0 || self.answer_len == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.shared > self.question_len || self.shared > self.answer_len {
            return Err(Error::Config("cannot share more tokens than a sentence holds".into()));
        }
        if self.vocabulary < self.question_len + self.answer_len {
            return Err(Error::Config("synthetic vocabulary too small".into()));
        }
        Ok(())
    }
}

fn sentence(ids: &[usize]) -> String {
    ids.iter().map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ")
}

/// Draws `n` ids from `0..vocab` that avoid `forbidden`.
fn fresh<R: Rng + ?Sized>(rng: &mut R, vocab: usize, n: usize, forbidden: &[usize]) -> Vec<usize> {
    let allowed: Vec<usize> = (0..vocab).filter(|i| !forbidden.contains(i)).collect();
    sample(rng, allowed.len(), n).into_iter().map(|j| allowed[j]).collect()
}

/// The positive sits at a random position in each pool.
pub fn generate<R: Rng + ?Sized>(cfg: &SyntheticConfig, split: Split, rng: &mut R) -> Result<QADataset> {
    cfg.validate()?;
    let mut questions = Vec::with_capacity(cfg.questions);
    for qi in 0..cfg.questions {
        let q: Vec<usize> = sample(rng, cfg.vocabulary, cfg.question_len).into_vec();
        let mut pos: Vec<usize> = sample(rng, cfg.question_len, cfg.shared).into_iter().map(|j| q[j]).collect();
        pos.extend(fresh(rng, cfg.vocabulary, cfg.answer_len - cfg.shared, &q));
        let pos_slot = rng.random_range(0..=cfg.negatives);
        let mut candidates = Vec::with_capacity(cfg.negatives + 1);
        for slot in 0..=cfg.negatives {
            let (ids, label) = if slot == pos_slot {
                (pos.clone(), 1)
            } else {
                (fresh(rng, cfg.vocabulary, cfg.answer_len, &q), 0)
            };
            let text = sentence(&ids);
            candidates.push(Candidate {
                tokens: tokenize(&text),
                text,
                label,
            });
        }
        let text = sentence(&q);
        questions.push(QAQuestion {
            id: format!("s{qi}"),
            tokens: tokenize(&text),
            text,
            candidates,
        });
    }
    Ok(QADataset::new(split, questions))
}
