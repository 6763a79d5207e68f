//! Two-way attention between a question and an answer feature map.
//!
//! The soft-alignment matrix `T = tanh(Q_f^T U A_f)` scores every
//! (question position, answer position) pair. Row maxima of `T` score the
//! question positions, column maxima the answer positions; a softmax turns
//! each score vector into attention weights. Each feature map is reweighted
//! column-wise by its weights and max-pooled per channel, and that weighted
//! vector is appended to the plain max-pooled one. The final
//! representations are therefore `2c` long.
//!
//! Padding columns are excluded from every maximum and softmax; their
//! attention weight is exactly zero.

use crate::encoder::{pool_encoding, FeatureMap};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ParamId, ParamStore, ReduceAxis, Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;
use std::io::Write;

pub const U_INIT_RANGE: f64 = 0.1;

/// Handle to the bilinear matrix `U` (`c x c`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub bilinear: ParamId,
}

pub fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<AttentionParams> {
    let u = Tensor::uniform(vec![channels, channels], U_INIT_RANGE, rng)?;
    Ok(AttentionParams {
        bilinear: store.add("attention.U", u)?,
    })
}

pub fn bind_attention(store: &ParamStore, channels: usize) -> Result<AttentionParams> {
    let id = store
        .id_of("attention.U")
        .ok_or_else(|| Error::Checkpoint("missing parameter attention.U".into()))?;
    if store.get(id).shape() != [channels, channels] {
        return Err(Error::Checkpoint(format!(
            "attention.U has shape {:?}, expected [{channels}, {channels}]",
            store.get(id).shape()
        )));
    }
    Ok(AttentionParams { bilinear: id })
}

/// `T = tanh(Q_f^T U A_f)`, rows indexed by question positions and
/// columns by answer positions.
pub fn attention_matrix(
    tape: &mut Tape,
    store: &ParamStore,
    qf: &FeatureMap,
    af: &FeatureMap,
    params: &AttentionParams,
) -> Result<Var> {
    let u = tape.param(store, params.bilinear);
    attention_matrix_with(tape, qf, af, u)
}

/// [`attention_matrix`] with `U` already on the tape.
pub fn attention_matrix_with(tape: &mut Tape, qf: &FeatureMap, af: &FeatureMap, u: Var) -> Result<Var> {
    let cq = tape.shape(qf.values)[0];
    let ca = tape.shape(af.values)[0];
    if cq != ca {
        return Err(Error::dim("attention_matrix", tape.shape(qf.values), tape.shape(af.values)));
    }
    let left = project_question_with(tape, qf, u)?;
    attention_matrix_projected(tape, left, af)
}

/// `Q_f^T U`. Every answer scored against the same question on one tape
/// can share it.
pub fn project_question(tape: &mut Tape, store: &ParamStore, qf: &FeatureMap, params: &AttentionParams) -> Result<Var> {
    let u = tape.param(store, params.bilinear);
    project_question_with(tape, qf, u)
}

fn project_question_with(tape: &mut Tape, qf: &FeatureMap, u: Var) -> Result<Var> {
    let qt = tape.transpose(qf.values)?;
    tape.matmul(qt, u)
}

/// `T` from a precomputed `Q_f^T U`.
pub fn attention_matrix_projected(tape: &mut Tape, projected: Var, af: &FeatureMap) -> Result<Var> {
    let scores = tape.matmul(projected, af.values)?;
    tape.activation(scores, Activation::Tanh)
}

/// `(sigma_q, sigma_a)`: softmax of the masked row and column maxima of `T`.
pub fn attention_vectors(tape: &mut Tape, t: Var, q_len: usize, a_len: usize) -> Result<(Var, Var)> {
    if q_len == 0 || a_len == 0 {
        return Err(Error::Data("attention over an empty sentence".into()));
    }
    let (g_q, _) = tape.max_reduce(t, ReduceAxis::Rows, Some(a_len))?;
    let (g_a, _) = tape.max_reduce(t, ReduceAxis::Cols, Some(q_len))?;
    let sigma_q = tape.softmax_masked(g_q, q_len)?;
    let sigma_a = tape.softmax_masked(g_a, a_len)?;
    Ok((sigma_q, sigma_a))
}

/// Reweights one feature map and returns `pooled ++ weighted_pooled`.
fn attend_one(tape: &mut Tape, fm: &FeatureMap, sigma: Var) -> Result<Var> {
    let weighted = tape.hadamard_broadcast(fm.values, sigma)?;
    let (r_weight, _) = tape.max_reduce(weighted, ReduceAxis::Rows, Some(fm.len))?;
    let r_plain = pool_encoding(tape, fm)?;
    tape.concat(&[r_plain, r_weight], 0)
}

/// Final `(r_q, r_a)`, each of length `2c`.
pub fn attend(tape: &mut Tape, qf: &FeatureMap, af: &FeatureMap, sigma_q: Var, sigma_a: Var) -> Result<(Var, Var)> {
    Ok((attend_one(tape, qf, sigma_q)?, attend_one(tape, af, sigma_a)?))
}

/// Every intermediate of one attention pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub t: Var,
    pub sigma_q: Var,
    pub sigma_a: Var,
    pub r_q: Var,
    pub r_a: Var,
}

pub fn two_way_attention(
    tape: &mut Tape,
    store: &ParamStore,
    qf: &FeatureMap,
    af: &FeatureMap,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let projected = project_question(tape, store, qf, params)?;
    two_way_attention_projected(tape, qf, projected, af)
}

/// [`two_way_attention`] with `Q_f^T U` from [`project_question`].
pub fn two_way_attention_projected(tape: &mut Tape, qf: &FeatureMap, projected: Var, af: &FeatureMap) -> Result<AttentionOutput> {
    let t = attention_matrix_projected(tape, projected, af)?;
    let (sigma_q, sigma_a) = attention_vectors(tape, t, qf.len, af.len)?;
    let (r_q, r_a) = attend(tape, qf, af, sigma_q, sigma_a)?;
    Ok(AttentionOutput {
        t,
        sigma_q,
        sigma_a,
        r_q,
        r_a,
    })
}

/// One line of an attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AttentionRecord {
    pub question_id: String,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub sigma_q: Vec<f64>,
    pub sigma_a: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `T`.
    pub t: Vec<f64>,
}

impl AttentionRecord {
    pub fn from_tape(tape: &Tape, out: &AttentionOutput, question_id: &str, question: &[String], answer: &[String]) -> Self {
        let shape = tape.shape(out.t);
        Self {
            question_id: question_id.to_string(),
            question: question.to_vec(),
            answer: answer.to_vec(),
            sigma_q: tape.value(out.sigma_q).to_vec(),
            sigma_a: tape.value(out.sigma_a).to_vec(),
            rows: shape[0],
            cols: shape[1],
            t: tape.value(out.t).to_vec(),
        }
    }
}

/// Writes records as JSON lines.
pub fn write_attention_dump(mut w: impl Write, records: &[AttentionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>, len: usize) -> FeatureMap {
        FeatureMap {
            values: tape.constant(vec![rows, cols], data).unwrap(),
            len,
        }
    }

    #[test]
    fn zero_u_gives_zero_t() {
        let mut tape = Tape::new();
        let q = fm(&mut tape, 2, 3, vec![0.5; 6], 3);
        let a = fm(&mut tape, 2, 3, vec![0.7; 6], 3);
        let u = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let t = attention_matrix_with(&mut tape, &q, &a, u).unwrap();
        assert!(tape.value(t).iter().all(|&x| x == 0.0));
        let (sq, sa) = attention_vectors(&mut tape, t, 3, 3).unwrap();
        for &v in tape.value(sq).iter().chain(tape.value(sa)) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn direct_formula_single_channel() {
        let mut tape = Tape::new();
        let q = fm(&mut tape, 1, 2, vec![1.0, 2.0], 2);
        let a = fm(&mut tape, 1, 1, vec![3.0], 1);
        let u = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let t = attention_matrix_with(&mut tape, &q, &a, u).unwrap();
        assert_eq!(tape.shape(t), &[2, 1]);
        assert_eq!(tape.value(t), &[3f64.tanh(), 6f64.tanh()]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let q = fm(&mut tape, 2, 2, vec![1.0; 4], 2);
        let a = fm(&mut tape, 3, 2, vec![1.0; 6], 2);
        let u = tape.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        assert!(matches!(
            attention_matrix_with(&mut tape, &q, &a, u),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn vectors_from_direct_formula() {
        let mut tape = Tape::new();
        let t = tape.constant(vec![2, 2], vec![5.0, 0.0, 0.0, 0.0]).unwrap();
        let (sq, sa) = attention_vectors(&mut tape, t, 2, 2).unwrap();
        let e = 5f64.exp();
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0)];
        for (got, want) in tape.value(sq).iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(tape.value(sq), tape.value(sa));
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let mut tape = Tape::new();
        let t = tape
            .constant(vec![3, 2], vec![0.1, 0.9, 0.2, 0.3, 0.95, 0.99])
            .unwrap();
        let (sq, sa) = attention_vectors(&mut tape, t, 2, 1).unwrap();
        let sq = tape.value(sq).to_vec();
        let sa = tape.value(sa).to_vec();
        assert_eq!(sq[2], 0.0);
        assert_eq!(sa, vec![1.0, 0.0]);
        // answer column 1 is masked so row 0's max is 0.1, not 0.9
        let e = (0.1f64 - 0.2).exp();
        assert!((sq[0] - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn one_hot_weights_select_a_column() {
        let mut tape = Tape::new();
        let data = vec![0.2, 0.8, 0.1, 0.5, 0.0, 0.9];
        let q = fm(&mut tape, 2, 3, data.clone(), 3);
        let a = fm(&mut tape, 2, 3, data, 3);
        let onehot = tape.constant(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let (rq, _) = attend(&mut tape, &q, &a, onehot, onehot).unwrap();
        assert_eq!(tape.value(rq), &[0.8, 0.9, 0.8, 0.0]);
    }

    #[test]
    fn uniform_weights_scale_the_max() {
        let mut tape = Tape::new();
        let data = vec![0.25, 0.75, 0.5, 1.0, 0.0, 0.5, 0.125, 0.25];
        let q = fm(&mut tape, 2, 4, data.clone(), 4);
        let uniform = tape.constant(vec![4], vec![0.25; 4]).unwrap();
        let (rq, _) = attend(&mut tape, &q, &q, uniform, uniform).unwrap();
        let v = tape.value(rq);
        assert_eq!(v.len(), 4);
        assert_eq!(&v[..2], &[1.0, 0.5]);
        assert_eq!(&v[2..], &[0.25, 0.125]);
    }

    #[test]
    fn dump_is_json_lines() {
        let rec = AttentionRecord {
            question_id: "q1".into(),
            question: vec!["who".into()],
            answer: vec!["me".into()],
            sigma_q: vec![1.0],
            sigma_a: vec![1.0],
            rows: 1,
            cols: 1,
            t: vec![0.5],
        };
        let mut buf = Vec::new();
        write_attention_dump(&mut buf, &[rec.clone(), rec.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: AttentionRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back, rec);
    }
}
