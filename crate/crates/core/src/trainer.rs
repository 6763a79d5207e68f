//! Triplet sampling, dropout, Adagrad and the training loop.

use crate::data::QADataset;
use crate::embedding::{pad_truncate, PaddedSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{classify_question_type, MetricSummary, QuestionType, RankedQuestion, RankedRun};
use crate::model::Model;
use crate::par::{self, Execution};
use crate::scoring::DEFAULT_MARGIN;
use crate::tensor::{ParamStore, Tape, Var};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::ControlFlow;
use std::time::Instant;

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const DEFAULT_NEGATIVES_PER_POSITIVE: usize = 5;
pub const DEFAULT_ADAGRAD_EPS: f64 = 1e-8;
pub const DEFAULT_EPOCHS: usize = 200;

/// A question and its candidate pool as padded id sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuestion {
    pub id: String,
    pub question_type: QuestionType,
    pub question: PaddedSequence,
    pub candidates: Vec<PaddedSequence>,
    pub labels: Vec<u8>,
}

impl EncodedQuestion {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 1).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 0).collect()
    }
}

pub fn encode_dataset(dataset: &QADataset, vocab: &Vocabulary, seq_len: usize) -> Result<Vec<EncodedQuestion>> {
    dataset
        .questions
        .iter()
        .map(|q| {
            let candidates = q
                .candidates
                .iter()
                .map(|c| pad_truncate(&vocab.encode(&c.tokens), seq_len))
                .collect::<Result<Vec<_>>>()?;
            Ok(EncodedQuestion {
                id: q.id.clone(),
                question_type: classify_question_type(&q.tokens),
                question: pad_truncate(&vocab.encode(&q.tokens), seq_len)?,
                candidates,
                labels: q.candidates.iter().map(|c| c.label).collect(),
            })
        })
        .collect()
}

/// Indices of a question and two of its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub question: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletSample {
    pub triplets: Vec<Triplet>,
    /// Questions with a positive but no negative candidate.
    pub skipped_no_negative: usize,
}

/// For every (question, positive) pair draws `per_positive` negatives from
/// the same pool, without replacement when the pool is large enough, and
/// shuffles the result.
pub fn sample_triplets<R: Rng + ?Sized>(questions: &[EncodedQuestion], per_positive: usize, rng: &mut R) -> Result<TripletSample> {
    if per_positive == 0 {
        return Err(Error::Config("negatives_per_positive must be at least 1".into()));
    }
    let mut out = TripletSample::default();
    for (qi, q) in questions.iter().enumerate() {
        let pos = q.positives();
        if pos.is_empty() {
            continue;
        }
        let neg = q.negatives();
        if neg.is_empty() {
            out.skipped_no_negative += 1;
            continue;
        }
        for &p in &pos {
            if neg.len() >= per_positive {
                for j in sample(rng, neg.len(), per_positive) {
                    out.triplets.push(Triplet {
                        question: qi,
                        positive: p,
                        negative: neg[j],
                    });
                }
            } else {
                for _ in 0..per_positive {
                    out.triplets.push(Triplet {
                        question: qi,
                        positive: p,
                        negative: neg[rng.random_range(0..neg.len())],
                    });
                }
            }
        }
    }
    out.triplets.shuffle(rng);
    Ok(out)
}

/// Inverted-dropout multipliers: `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

/// Identity unless `training` is set and `p > 0`; no rng draws otherwise.
pub fn apply_dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, rng: &mut R, training: bool) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), p, rng)?;
    tape.scale(x, mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub eps: f64,
    accumulators: Vec<Vec<f64>>,
}

impl Adagrad {
    pub fn new(store: &ParamStore, learning_rate: f64, eps: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("adagrad eps must be nonnegative, got {eps}")));
        }
        Ok(Self {
            learning_rate,
            eps,
            accumulators: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        })
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accumulators
    }

    /// `acc += g^2; w -= lr * g / (sqrt(acc) + eps)`, then clears the
    /// gradients. Nothing is updated if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.accumulators.len() {
            return Err(Error::Config("optimizer and parameter store disagree".into()));
        }
        for (_, name, t) in store.iter() {
            if let Some(i) = t.grad().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} in {name} at index {i}",
                    t.grad()[i]
                )));
            }
        }
        for ((_, t), acc) in store.iter_mut().zip(&mut self.accumulators) {
            if !t.requires_grad() {
                continue;
            }
            let (w, g) = t.data_and_grad_mut();
            for ((w, g), a) in w.iter_mut().zip(g.iter_mut()).zip(acc.iter_mut()) {
                if *g == 0.0 {
                    continue;
                }
                *a += *g * *g;
                *w -= self.learning_rate * *g / (a.sqrt() + self.eps);
                *g = 0.0;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub adagrad_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            learning_rate: DEFAULT_LEARNING_RATE,
            dropout: DEFAULT_DROPOUT,
            epochs: DEFAULT_EPOCHS,
            negatives_per_positive: DEFAULT_NEGATIVES_PER_POSITIVE,
            adagrad_eps: DEFAULT_ADAGRAD_EPS,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        crate::scoring::LossConfig::new(self.margin)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be at least 1".into()));
        }
        if !(self.adagrad_eps >= 0.0 && self.adagrad_eps.is_finite()) {
            return Err(Error::Config("adagrad eps must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Hinge loss of one triplet on a fresh tape. `rng` is only used for
/// dropout.
pub fn triplet_loss<R: Rng + ?Sized>(
    model: &Model,
    q: &EncodedQuestion,
    t: Triplet,
    margin: f64,
    dropout: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let qf = model.encode_question(&mut tape, &q.question)?;
    let pf = model.encode(&mut tape, &q.candidates[t.positive])?;
    let nf = model.encode(&mut tape, &q.candidates[t.negative])?;
    let pos = model.represent(&mut tape, &qf, &pf)?;
    let neg = model.represent(&mut tape, &qf, &nf)?;
    let mut cos = |tape: &mut Tape, rq: Var, ra: Var| -> Result<Var> {
        let rq = apply_dropout(tape, rq, dropout, rng, training)?;
        let ra = apply_dropout(tape, ra, dropout, rng, training)?;
        tape.cosine(rq, ra)
    };
    let cp = cos(&mut tape, pos.r_q, pos.r_a)?;
    let cn = cos(&mut tape, neg.r_q, neg.r_a)?;
    let loss = tape.hinge(cp, cn, margin)?;
    Ok((tape, loss))
}

pub fn rank_question(model: &Model, q: &EncodedQuestion) -> Result<RankedQuestion> {
    let ranked = model.rank(&q.question, &q.candidates, &q.labels)?;
    Ok(RankedQuestion {
        question_id: q.id.clone(),
        question_type: q.question_type,
        labels: ranked.iter().map(|c| c.label).collect(),
    })
}

/// Ranks every question with a positive candidate.
pub fn evaluate(model: &Model, questions: &[EncodedQuestion], exec: Execution) -> Result<RankedRun> {
    let rankable: Vec<&EncodedQuestion> = questions.iter().filter(|q| q.labels.contains(&1)).collect();
    let ranked = par::map(exec, &rankable, |q| rank_question(model, q));
    let mut run = RankedRun::new();
    for r in ranked {
        run.push(r?)?;
    }
    Ok(run)
}

/// One line of the training log. Epoch 0 describes the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub triplets: usize,
    pub updates: usize,
    pub dev_map: f64,
    pub dev_mrr: f64,
    pub dev_top1: f64,
    pub skipped_degenerate: usize,
    pub skipped_no_negative: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the highest dev MAP seen, earliest on ties.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub log: Vec<EpochRecord>,
}

struct EpochStats {
    mean_loss: f64,
    triplets: usize,
    updates: usize,
    skipped_degenerate: usize,
}

fn run_epoch<R: Rng + ?Sized>(
    model: &mut Model,
    opt: Option<&mut Adagrad>,
    train: &[EncodedQuestion],
    triplets: &[Triplet],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<EpochStats> {
    let training = opt.is_some();
    let mut opt = opt;
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut updates = 0usize;
    let mut skipped = 0usize;
    for &t in triplets {
        let q = &train[t.question];
        let (tape, loss) = match triplet_loss(model, q, t, cfg.margin, cfg.dropout, rng, training) {
            Ok(v) => v,
            Err(Error::Degenerate(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let value = tape.scalar(loss);
        total += value;
        counted += 1;
        if let Some(opt) = opt.as_deref_mut() {
            // a zero hinge has a zero gradient everywhere
            if value > 0.0 {
                tape.backward(loss, &mut model.params)?;
                opt.step(&mut model.params)?;
                updates += 1;
            }
        }
    }
    Ok(EpochStats {
        mean_loss: if counted > 0 { total / counted as f64 } else { 0.0 },
        triplets: counted,
        updates,
        skipped_degenerate: skipped,
    })
}

/// Trains `model` in place with single-triplet Adagrad updates. Dev
/// metrics are computed after every epoch; `on_epoch` sees each record and
/// may stop training early.
pub fn train<R, F>(
    model: Model,
    train: &[EncodedQuestion],
    dev: &[EncodedQuestion],
    cfg: &TrainConfig,
    exec: Execution,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&EpochRecord) -> ControlFlow<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if !dev.iter().any(|q| q.labels.contains(&1)) {
        return Err(Error::Data("dev set has no rankable question".into()));
    }
    let mut model = model;
    let mut opt = Adagrad::new(&model.params, cfg.learning_rate, cfg.adagrad_eps)?;
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_map = f64::NEG_INFINITY;

    for epoch in 0..=cfg.epochs {
        let start = Instant::now();
        let sampled = sample_triplets(train, cfg.negatives_per_positive, rng)?;
        if sampled.triplets.is_empty() {
            return Err(Error::Data("no training triplets: every question lacks a positive or a negative".into()));
        }
        let stats = if epoch == 0 {
            let mut eval_cfg = cfg.clone();
            eval_cfg.dropout = 0.0;
            run_epoch(&mut model, None, train, &sampled.triplets, &eval_cfg, rng)?
        } else {
            run_epoch(&mut model, Some(&mut opt), train, &sampled.triplets, cfg, rng)?
        };
        let dev_metrics = MetricSummary::of(&evaluate(&model, dev, exec)?);
        let record = EpochRecord {
            epoch,
            mean_loss: stats.mean_loss,
            triplets: stats.triplets,
            updates: stats.updates,
            dev_map: dev_metrics.map,
            dev_mrr: dev_metrics.mrr,
            dev_top1: dev_metrics.top1_accuracy,
            skipped_degenerate: stats.skipped_degenerate,
            skipped_no_negative: sampled.skipped_no_negative,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if record.dev_map > best_map {
            best_map = record.dev_map;
            best_epoch = epoch;
            best = model.clone();
        }
        let flow = on_epoch(&record);
        log.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
    })
}

/// JSON lines, one record per line.
pub fn write_epoch_log(mut w: impl std::io::Write, log: &[EpochRecord]) -> std::io::Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
