//! Shared test oracles: a central-difference gradient checker that knows
//! nothing about the tape's backward rules, and small data builders.
#![allow(dead_code)]

use ammsnn::gradcheck::toy_config;
use ammsnn::model::Model;
use ammsnn::trainer::{triplet_loss, EncodedQuestion, Triplet};
use ammsnn::tensor::{Activation, ParamId, ParamStore, ReduceAxis, Tape, Tensor, Var};
use ammsnn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;
/// Inputs this close to a kink are redrawn.
pub const KINK_GAP: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdResult {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Builds a scalar loss from the parameters.
pub type Build<'a> = dyn Fn(&mut Tape, &ParamStore) -> Result<Var> + 'a;

fn loss_at(store: &ParamStore, build: &Build) -> (f64, u64) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store).expect("forward pass");
    (tape.scalar(loss), tape.branch_signature())
}

/// Compares the tape's gradient with central differences for every entry
/// of every parameter in `store`, except those `skip` names. Returns `None`
/// when the point sits on or next to a kink, so the caller can redraw.
pub fn fd_check(store: &mut ParamStore, build: &Build, skip: &dyn Fn(ParamId, usize) -> bool) -> Option<FdResult> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store).expect("forward pass");
    if tape.min_kink_gap() < KINK_GAP {
        return None;
    }
    let base_sig = tape.branch_signature();
    store.zero_grad();
    tape.backward(loss, store).expect("backward pass");
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| t.grad().to_vec()).collect();
    store.zero_grad();

    let mut out = FdResult::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for (gi, &id) in ids.iter().enumerate() {
        for (e, &grad) in analytic[gi].iter().enumerate() {
            if skip(id, e) {
                continue;
            }
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + STEP;
            let (lp, sp) = loss_at(store, build);
            store.get_mut(id).data_mut()[e] = orig - STEP;
            let (lm, sm) = loss_at(store, build);
            store.get_mut(id).data_mut()[e] = orig;
            if sp != base_sig || sm != base_sig {
                return None;
            }
            let numeric = (lp - lm) / (2.0 * STEP);
            out.max_rel_error = out.max_rel_error.max(rel_err(grad, numeric));
            out.checked += 1;
        }
    }
    Some(out)
}

/// Redraws with fresh seeds until a smooth point is found.
pub fn fd_check_redrawing(
    seed: u64,
    setup: impl Fn(&mut ChaCha8Rng) -> (ParamStore, Box<Build<'static>>),
) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        let (mut store, build) = setup(&mut rng);
        if let Some(r) = fd_check(&mut store, &*build, &|_, _| false) {
            return r;
        }
    }
    panic!("no smooth instance found in 200 draws");
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::uniform(shape, 1.0, rng).expect("valid shape")
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Turns any output into a scalar with fixed random weights so that every
/// entry of the output contributes its own direction.
pub fn project(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let scaled = tape.scale(out, weights.to_vec())?;
    tape.sum(scaled)
}

/// One store with a parameter per shape.
pub fn store_of(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), random_tensor(rng, s.clone())).unwrap())
        .collect();
    (store, ids)
}

fn unary(
    seed: u64,
    shape: Vec<usize>,
    out_len: usize,
    op: impl Fn(&mut Tape, Var) -> Result<Var> + Clone + 'static,
) -> FdResult {
    fd_check_redrawing(seed, move |rng| {
        let (store, ids) = store_of(rng, std::slice::from_ref(&shape));
        let w = random_vec(rng, out_len);
        let op = op.clone();
        let x = ids[0];
        (
            store,
            Box::new(move |tape: &mut Tape, s: &ParamStore| {
                let v = tape.param(s, x);
                let y = op(tape, v)?;
                project(tape, y, &w)
            }),
        )
    })
}

fn binary(
    seed: u64,
    shapes: [Vec<usize>; 2],
    out_len: usize,
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + Clone + 'static,
) -> FdResult {
    fd_check_redrawing(seed, move |rng| {
        let (store, ids) = store_of(rng, &shapes);
        let w = random_vec(rng, out_len);
        let op = op.clone();
        let (a, b) = (ids[0], ids[1]);
        (
            store,
            Box::new(move |tape: &mut Tape, s: &ParamStore| {
                let va = tape.param(s, a);
                let vb = tape.param(s, b);
                let y = op(tape, va, vb)?;
                project(tape, y, &w)
            }),
        )
    })
}

pub fn check_gather(seed: u64) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut store, ids) = store_of(&mut rng, &[vec![4, 6]]);
    let table = ids[0];
    let w = random_vec(&mut rng, 4 * 7);
    // repeated ids accumulate; id 0 is padding and is never updated
    let seq = [1usize, 3, 3, 0, 5, 2, 0];
    let build = move |tape: &mut Tape, s: &ParamStore| {
        let g = tape.gather_columns(s, table, &seq)?;
        project(tape, g, &w)
    };
    fd_check(&mut store, &build, &|_, e| e % 6 == 0).expect("gather is smooth")
}

pub fn check_add(seed: u64) -> FdResult {
    binary(seed, [vec![3, 4], vec![3, 4]], 12, |t, a, b| t.add(a, b))
}

pub fn check_sum(seed: u64) -> FdResult {
    unary(seed, vec![3, 5], 1, |t, x| t.sum(x))
}

pub fn check_transpose(seed: u64) -> FdResult {
    unary(seed, vec![3, 5], 15, |t, x| t.transpose(x))
}

pub fn check_matmul(seed: u64) -> FdResult {
    binary(seed, [vec![3, 4], vec![4, 5]], 15, |t, a, b| t.matmul(a, b))
}

pub fn check_conv(seed: u64, width: usize, valid: Option<usize>) -> FdResult {
    let (d, l, c) = (3, 7, 2);
    fd_check_redrawing(seed, move |rng| {
        let (store, ids) = store_of(rng, &[vec![d, l], vec![c, d, width], vec![c]]);
        let w = random_vec(rng, c * l);
        (
            store,
            Box::new(move |tape: &mut Tape, s: &ParamStore| {
                let x = tape.param(s, ids[0]);
                let f = tape.param(s, ids[1]);
                let b = tape.param(s, ids[2]);
                let y = tape.conv1d_same(x, f, b, valid)?;
                project(tape, y, &w)
            }),
        )
    })
}

pub fn check_activation(seed: u64, kind: Activation) -> FdResult {
    unary(seed, vec![2, 6], 12, move |t, x| t.activation(x, kind))
}

pub fn check_softmax(seed: u64, valid: Option<usize>) -> FdResult {
    unary(seed, vec![6], 6, move |t, x| match valid {
        Some(v) => t.softmax_masked(x, v),
        None => t.softmax_vec(x),
    })
}

pub fn check_max_reduce(seed: u64, axis: ReduceAxis, limit: Option<usize>) -> FdResult {
    let n = match axis {
        ReduceAxis::Rows => 4,
        ReduceAxis::Cols => 6,
    };
    unary(seed, vec![4, 6], n, move |t, x| Ok(t.max_reduce(x, axis, limit)?.0))
}

pub fn check_hadamard(seed: u64) -> FdResult {
    binary(seed, [vec![3, 5], vec![5]], 15, |t, m, v| t.hadamard_broadcast(m, v))
}

pub fn check_concat(seed: u64, axis: usize) -> FdResult {
    let shapes = if axis == 0 {
        [vec![2, 3], vec![4, 3]]
    } else {
        [vec![3, 2], vec![3, 4]]
    };
    binary(seed, shapes, 18, move |t, a, b| t.concat(&[a, b], axis))
}

pub fn check_scale(seed: u64) -> FdResult {
    let factors = vec![0.5, -2.0, 0.0, 3.0, 1.25, 1.0];
    unary(seed, vec![6], 6, move |t, x| t.scale(x, factors.clone()))
}

pub fn check_cosine(seed: u64) -> FdResult {
    binary(seed, [vec![7], vec![7]], 1, |t, a, b| t.cosine(a, b))
}

/// The hinge with its kink away from the sample: the margin is shifted so
/// the loss is active.
pub fn check_hinge(seed: u64) -> FdResult {
    binary(seed, [vec![1], vec![1]], 1, |t, p, n| t.hinge(p, n, 3.0))
}

/// Every primitive, by name, with the worst relative error found.
pub fn primitive_suite(seed: u64) -> Vec<(String, FdResult)> {
    let mut out = vec![
        ("gather_columns".to_string(), check_gather(seed)),
        ("add".to_string(), check_add(seed)),
        ("sum".to_string(), check_sum(seed)),
        ("transpose".to_string(), check_transpose(seed)),
        ("matmul".to_string(), check_matmul(seed)),
    ];
    for k in [1, 3, 5] {
        out.push((format!("conv1d_same k={k}"), check_conv(seed, k, None)));
        out.push((format!("conv1d_same k={k} valid=4"), check_conv(seed, k, Some(4))));
    }
    for kind in [Activation::Tanh, Activation::Relu, Activation::Sigmoid] {
        out.push((format!("activation {kind}"), check_activation(seed, kind)));
    }
    out.push(("softmax".to_string(), check_softmax(seed, None)));
    out.push(("softmax_masked".to_string(), check_softmax(seed, Some(4))));
    for (axis, name) in [(ReduceAxis::Rows, "rows"), (ReduceAxis::Cols, "cols")] {
        out.push((format!("max_reduce {name}"), check_max_reduce(seed, axis, None)));
        out.push((format!("max_reduce {name} limit=3"), check_max_reduce(seed, axis, Some(3))));
    }
    out.push(("hadamard_broadcast".to_string(), check_hadamard(seed)));
    out.push(("concat axis=0".to_string(), check_concat(seed, 0)));
    out.push(("concat axis=1".to_string(), check_concat(seed, 1)));
    out.push(("scale".to_string(), check_scale(seed)));
    out.push(("cosine".to_string(), check_cosine(seed)));
    out.push(("hinge".to_string(), check_hinge(seed)));
    out
}

/// A random toy model and triplet, checked end to end with the oracle.
pub fn check_end_to_end(seed: u64) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..500 {
        let cfg = toy_config(12);
        let model = Model::init(cfg.clone(), &mut rng).unwrap();
        let sentence = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(1..=cfg.seq_len);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(1..cfg.vocab_size)).collect();
            model.prepare(&ids).unwrap()
        };
        let q = EncodedQuestion {
            id: "e2e".into(),
            question_type: ammsnn::metrics::QuestionType::Other,
            question: sentence(&mut rng),
            candidates: vec![sentence(&mut rng), sentence(&mut rng)],
            labels: vec![1, 0],
        };
        let t = Triplet {
            question: 0,
            positive: 0,
            negative: 1,
        };
        let mut store = model.params.clone();
        let build = |tape: &mut Tape, s: &ParamStore| {
            let m = Model::from_params(cfg.clone(), s.clone())?;
            let (inner, loss) = triplet_loss(&m, &q, t, 0.2, 0.0, &mut ChaCha8Rng::seed_from_u64(0), false)?;
            *tape = inner;
            Ok(loss)
        };
        let mut probe = Tape::new();
        match build(&mut probe, &store) {
            Ok(l) if probe.scalar(l) > 0.0 => {}
            _ => continue,
        }
        if let Some(r) = fd_check(&mut store, &build, &|id, e| id.index() == 0 && e % cfg.vocab_size == 0) {
            return r;
        }
    }
    panic!("no smooth instance with positive loss in 500 draws");
}

/// Brute-force average precision: precision at every relevant position,
/// computed by counting from scratch.
pub fn brute_average_precision(labels: &[u8]) -> Option<f64> {
    let relevant: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    if relevant.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &k in &relevant {
        let hits = labels[..=k].iter().filter(|&&l| l == 1).count();
        total += hits as f64 / (k + 1) as f64;
    }
    Some(total / relevant.len() as f64)
}

pub fn brute_reciprocal_rank(labels: &[u8]) -> Option<f64> {
    for (i, &l) in labels.iter().enumerate() {
        if l == 1 {
            return Some(1.0 / (i + 1) as f64);
        }
    }
    None
}

/// A `c x l` feature map whose columns past `len` are exactly zero, as the
/// encoder produces them.
pub fn padded_feature_values(rng: &mut ChaCha8Rng, c: usize, l: usize, len: usize) -> Vec<f64> {
    let mut v = random_vec(rng, c * l);
    for r in 0..c {
        for j in len..l {
            v[r * l + j] = 0.0;
        }
    }
    v
}

/// Like [`padded_feature_values`] with small dyadic entries (multiples of
/// 1/8 in [-1, 1]) so every sum formed from them is exact.
pub fn dyadic_feature_values(rng: &mut ChaCha8Rng, c: usize, l: usize, len: usize) -> Vec<f64> {
    (0..c * l)
        .map(|i| {
            if i % l < len {
                rng.random_range(-8i32..=8) as f64 / 8.0
            } else {
                0.0
            }
        })
        .collect()
}
