//! Finite-difference verification of the end-to-end training gradient.
//!
//! Each instance draws a fresh random model and a random triplet, computes
//! the analytic gradient of the hinge loss with dropout off, and compares
//! it entry by entry with a central difference. Instances are redrawn when
//! the loss sits on a kink (relu at zero, tied maxima, inactive or
//! borderline hinge) or when a perturbation moves the forward pass onto a
//! different smooth piece.

use crate::embedding::pad_truncate;
use crate::error::{Error, Result};
use crate::metrics::QuestionType;
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamId, ParamStore};
use crate::trainer::{triplet_loss, EncodedQuestion, Triplet};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Magnitudes below this are compared absolutely.
    pub floor: f64,
    /// Instances closer than this to any kink are redrawn.
    pub kink_gap: f64,
    pub instances: usize,
    /// Entries checked per parameter group; `None` checks all of them.
    pub entries_per_group: Option<usize>,
    pub margin: f64,
    pub seed: u64,
    /// Give up after this many redraws in a row.
    pub max_redraws: usize,
    /// Multiplies one group's analytic gradient. Only useful for testing
    /// that the harness notices a wrong backward rule.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            floor: 1e-6,
            kink_gap: 1e-6,
            instances: 4,
            entries_per_group: None,
            margin: crate::scoring::DEFAULT_MARGIN,
            seed: 1,
            max_redraws: 1000,
            corrupt: None,
        }
    }
}

/// The small model the check runs on by default: d=8, L=7, branches of
/// width 1, 3 and 5 with two channels each.
pub fn toy_config(vocab_size: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab_size);
    cfg.embed_dim = 8;
    cfg.seq_len = 7;
    cfg.embed_init_range = 0.5;
    cfg.encoder.branches = crate::encoder::parse_branches("1:2,3:2,5:2").expect("literal spec");
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
    pub instances: usize,
    pub redrawn: usize,
}

impl GradcheckReport {
    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error.is_nan() || g.max_rel_error > self.tolerance)
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing_groups().is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "instances {} (redrawn {}), tolerance {:e}\n",
            self.instances, self.redrawn, self.tolerance
        );
        for g in &self.groups {
            let verdict = if g.max_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{:<28} max_rel_error {:.3e} over {} entries  {verdict}\n",
                g.name, g.max_rel_error, g.checked
            ));
        }
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_sentence<R: Rng + ?Sized>(rng: &mut R, vocab: usize, max_len: usize) -> Vec<usize> {
    let len = rng.random_range(1..=max_len);
    // id 0 is padding and never occurs inside a sentence
    (0..len).map(|_| rng.random_range(1..vocab)).collect()
}

fn random_instance<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Model, EncodedQuestion)> {
    let model = Model::init(cfg.clone(), rng)?;
    let l = cfg.seq_len;
    let v = cfg.vocab_size;
    let q = EncodedQuestion {
        id: "gradcheck".into(),
        question_type: QuestionType::Other,
        question: pad_truncate(&random_sentence(rng, v, l), l)?,
        candidates: vec![
            pad_truncate(&random_sentence(rng, v, l), l)?,
            pad_truncate(&random_sentence(rng, v, l), l)?,
        ],
        labels: vec![1, 0],
    };
    Ok((model, q))
}

const TRIPLET: Triplet = Triplet {
    question: 0,
    positive: 0,
    negative: 1,
};

/// Loss and branch signature at the model's current parameters.
fn probe(model: &Model, q: &EncodedQuestion, margin: f64, rng: &mut ChaCha8Rng) -> Result<(f64, u64)> {
    let (tape, loss) = triplet_loss(model, q, TRIPLET, margin, 0.0, rng, false)?;
    Ok((tape.scalar(loss), tape.branch_signature()))
}

/// Entries of `id` to check.
fn pick_entries(store: &ParamStore, id: ParamId, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = store.get(id).len();
    match limit {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

enum Outcome {
    Checked(Vec<(f64, usize)>),
    Redraw,
}

fn check_instance(model: &mut Model, q: &EncodedQuestion, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (tape, loss) = match triplet_loss(model, q, TRIPLET, opts.margin, 0.0, rng, false) {
        Ok(v) => v,
        Err(Error::Degenerate(_)) => return Ok(Outcome::Redraw),
        Err(e) => return Err(e),
    };
    if tape.scalar(loss) == 0.0 || tape.min_kink_gap() < opts.kink_gap {
        return Ok(Outcome::Redraw);
    }
    let signature = tape.branch_signature();
    model.params.zero_grad();
    tape.backward(loss, &mut model.params)?;
    let analytic: Vec<Vec<f64>> = model.params.iter().map(|(_, _, t)| t.grad().to_vec()).collect();
    model.params.zero_grad();

    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut per_group = Vec::with_capacity(ids.len());
    for (gi, &id) in ids.iter().enumerate() {
        let scale = match &opts.corrupt {
            Some((name, factor)) if name == model.params.name(id) => *factor,
            _ => 1.0,
        };
        let mut worst = 0.0f64;
        let entries = pick_entries(&model.params, id, opts.entries_per_group, rng);
        for &e in &entries {
            let orig = model.params.get(id).data()[e];
            model.params.get_mut(id).data_mut()[e] = orig + opts.step;
            let plus = probe(model, q, opts.margin, rng);
            model.params.get_mut(id).data_mut()[e] = orig - opts.step;
            let minus = probe(model, q, opts.margin, rng);
            model.params.get_mut(id).data_mut()[e] = orig;
            let ((lp, sp), (lm, sm)) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(Error::Degenerate(_)), _) | (_, Err(Error::Degenerate(_))) => return Ok(Outcome::Redraw),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            if sp != signature || sm != signature {
                return Ok(Outcome::Redraw);
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let a = analytic[gi][e] * scale;
            worst = worst.max(relative_error(a, numeric, opts.floor));
        }
        per_group.push((worst, entries.len()));
    }
    Ok(Outcome::Checked(per_group))
}

/// Runs the check on `opts.instances` random models built from `cfg`.
pub fn gradcheck(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    if opts.instances == 0 {
        return Err(Error::Config("gradcheck needs at least one instance".into()));
    }
    if !(opts.step > 0.0 && opts.tolerance > 0.0) {
        return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups: Vec<GroupResult> = Vec::new();
    let mut redrawn = 0;
    let mut done = 0;
    let mut streak = 0;
    while done < opts.instances {
        let (mut model, q) = random_instance(cfg, &mut rng)?;
        match check_instance(&mut model, &q, opts, &mut rng)? {
            Outcome::Redraw => {
                redrawn += 1;
                streak += 1;
                if streak > opts.max_redraws {
                    return Err(Error::Numerical(format!(
                        "gave up after {streak} consecutive instances on a kink or with zero loss"
                    )));
                }
            }
            Outcome::Checked(per_group) => {
                streak = 0;
                done += 1;
                if groups.is_empty() {
                    groups = model
                        .params
                        .iter()
                        .map(|(_, name, _)| GroupResult {
                            name: name.to_string(),
                            max_rel_error: 0.0,
                            checked: 0,
                        })
                        .collect();
                }
                for (g, (err, n)) in groups.iter_mut().zip(per_group) {
                    g.max_rel_error = g.max_rel_error.max(err);
                    g.checked += n;
                }
            }
        }
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        groups,
        instances: done,
        redrawn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn toy_model_passes_and_corruption_is_caught() {
        let cfg = toy_config(12);
        let opts = GradcheckOptions {
            instances: 1,
            ..Default::default()
        };
        let report = gradcheck(&cfg, &opts).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert_eq!(report.groups.len(), 8);

        let bad = GradcheckOptions {
            corrupt: Some(("attention.U".into(), 1.01)),
            ..opts
        };
        let report = gradcheck(&cfg, &bad).unwrap();
        assert_eq!(report.failing_groups(), vec!["attention.U"]);
    }
}
