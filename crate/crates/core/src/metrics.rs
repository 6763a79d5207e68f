//! Ranking metrics: MAP, MRR and top-1 accuracy, overall and broken down
//! by question type.
//!
//! | Metric | Per question                                         |
//! |--------|------------------------------------------------------|
//! | AP     | mean over relevant ranks k of (#relevant in top k)/k |
//! | RR     | 1 / rank of the first relevant candidate             |
//! | top-1  | 1 if the rank-1 candidate is relevant, else 0        |
//!
//! Questions without any relevant candidate have no AP or RR; they must be
//! filtered out before building a [`RankedRun`].

use crate::error::{Error, Result};
use std::fmt::{self, Write};

/// `None` when no label is relevant.
pub fn average_precision(ranked_labels: &[u8]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &l) in ranked_labels.iter().enumerate() {
        if l != 0 {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// `None` when no label is relevant.
pub fn reciprocal_rank(ranked_labels: &[u8]) -> Option<f64> {
    ranked_labels
        .iter()
        .position(|&l| l != 0)
        .map(|p| 1.0 / (p + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionType {
    Who,
    Why,
    How,
    When,
    Where,
    What,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 7] = [
        QuestionType::Who,
        QuestionType::Why,
        QuestionType::How,
        QuestionType::When,
        QuestionType::Where,
        QuestionType::What,
        QuestionType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Who => "who",
            QuestionType::Why => "why",
            QuestionType::How => "how",
            QuestionType::When => "when",
            QuestionType::Where => "where",
            QuestionType::What => "what",
            QuestionType::Other => "other",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The first interrogative token, scanning left to right, decides.
pub fn classify_question_type<S: AsRef<str>>(tokens: &[S]) -> QuestionType {
    for tok in tokens {
        let ty = match tok.as_ref().to_lowercase().as_str() {
            "who" => QuestionType::Who,
            "why" => QuestionType::Why,
            "how" => QuestionType::How,
            "when" => QuestionType::When,
            "where" => QuestionType::Where,
            "what" => QuestionType::What,
            _ => continue,
        };
        return ty;
    }
    QuestionType::Other
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuestion {
    pub question_id: String,
    pub question_type: QuestionType,
    /// Relevance labels in ranked order (best first).
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedRun {
    questions: Vec<RankedQuestion>,
}

impl RankedRun {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, q: RankedQuestion) -> Result<()> {
        if !q.labels.iter().any(|&l| l != 0) {
            return Err(Error::Data(format!(
                "question {} has no relevant candidate",
                q.question_id
            )));
        }
        self.questions.push(q);
        Ok(())
    }

    pub fn questions(&self) -> &[RankedQuestion] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    fn mean_of(&self, f: impl Fn(&[u8]) -> f64) -> f64 {
        if self.questions.is_empty() {
            return 0.0;
        }
        let total: f64 = self.questions.iter().map(|q| f(&q.labels)).sum();
        total / self.questions.len() as f64
    }

    pub fn mean_average_precision(&self) -> f64 {
        self.mean_of(|l| average_precision(l).unwrap_or(0.0))
    }

    pub fn mean_reciprocal_rank(&self) -> f64 {
        self.mean_of(|l| reciprocal_rank(l).unwrap_or(0.0))
    }

    pub fn top1_accuracy(&self) -> f64 {
        self.mean_of(|l| if l.first().copied().unwrap_or(0) != 0 { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub questions: usize,
    pub map: f64,
    pub mrr: f64,
    pub top1_accuracy: f64,
}

impl MetricSummary {
    pub fn of(run: &RankedRun) -> Self {
        Self {
            questions: run.len(),
            map: run.mean_average_precision(),
            mrr: run.mean_reciprocal_rank(),
            top1_accuracy: run.top1_accuracy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: MetricSummary,
    /// One entry per question type, in [`QuestionType::ALL`] order;
    /// types with no questions have `questions == 0`.
    pub by_type: Vec<(QuestionType, MetricSummary)>,
}

impl EvalReport {
    pub fn from_run(run: &RankedRun) -> Result<Self> {
        if run.is_empty() {
            return Err(Error::Data("no rankable questions to evaluate".into()));
        }
        let by_type = QuestionType::ALL
            .iter()
            .map(|&ty| {
                let mut sub = RankedRun::new();
                sub.questions = run
                    .questions
                    .iter()
                    .filter(|q| q.question_type == ty)
                    .cloned()
                    .collect();
                (ty, MetricSummary::of(&sub))
            })
            .collect();
        Ok(Self {
            overall: MetricSummary::of(run),
            by_type,
        })
    }

    /// Human-readable table, 4 decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.overall;
        writeln!(s, "questions     {}", o.questions).unwrap();
        writeln!(s, "MAP           {:.4}", o.map).unwrap();
        writeln!(s, "MRR           {:.4}", o.mrr).unwrap();
        writeln!(s, "top1_accuracy {:.4}", o.top1_accuracy).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "{:<6} {:>5} {:>7} {:>7} {:>7}", "type", "n", "MAP", "MRR", "top1").unwrap();
        for (ty, m) in &self.by_type {
            if m.questions == 0 {
                writeln!(s, "{:<6} {:>5} {:>7} {:>7} {:>7}", ty, 0, "-", "-", "-").unwrap();
            } else {
                writeln!(
                    s,
                    "{:<6} {:>5} {:>7.4} {:>7.4} {:>7.4}",
                    ty, m.questions, m.map, m.mrr, m.top1_accuracy
                )
                .unwrap();
            }
        }
        s
    }

    /// `key=value` lines for machines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let o = &self.overall;
        writeln!(s, "questions={}", o.questions).unwrap();
        writeln!(s, "map={:.4}", o.map).unwrap();
        writeln!(s, "mrr={:.4}", o.mrr).unwrap();
        writeln!(s, "top1_accuracy={:.4}", o.top1_accuracy).unwrap();
        for (ty, m) in &self.by_type {
            writeln!(s, "type.{ty}.questions={}", m.questions).unwrap();
            if m.questions > 0 {
                writeln!(s, "type.{ty}.map={:.4}", m.map).unwrap();
                writeln!(s, "type.{ty}.mrr={:.4}", m.mrr).unwrap();
                writeln!(s, "type.{ty}.top1_accuracy={:.4}", m.top1_accuracy).unwrap();
            }
        }
        s
    }
}
