//! Additive attention scoring, context vectors, and captured attention
//! matrices for the regularizers and word discovery.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Row-stochastic matrix of alignment weights, rows = decoder steps,
/// columns = attended states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AttentionMatrix {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::contract(format!(
                "attention matrix must be 2-D, got shape {:?}",
                t.shape()
            )));
        }
        Ok(AttentionMatrix {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("attention matrix needs at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("attention rows have unequal lengths"));
        }
        Ok(AttentionMatrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("valid dims")
    }

    /// Text export: first line "M N", then M rows of N space-separated values.
    pub fn write_text(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.rows, self.cols)?;
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text(input: &str) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::contract("empty attention matrix file"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::contract("bad matrix header")))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::contract("matrix header must be \"M N\""));
        }
        let (rows, cols) = (dims[0], dims[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for line in lines.take(rows) {
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::contract("bad matrix entry"))?,
                );
            }
        }
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix body has {} values, expected {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(AttentionMatrix { rows, cols, data })
    }
}

/// A span of gold alignment: decoder rows x attended columns, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignSpan {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

/// Fraction of total attention mass falling inside the union of `spans`.
/// Rows are stochastic, so the total mass equals the number of rows.
pub fn attention_mass_in_spans(a: &AttentionMatrix, spans: &[AlignSpan]) -> Result<f64> {
    for s in spans {
        if s.row_end > a.rows || s.col_end > a.cols || s.row_start > s.row_end || s.col_start > s.col_end
        {
            return Err(Error::contract(format!(
                "span {s:?} out of bounds for {}x{} matrix",
                a.rows, a.cols
            )));
        }
    }
    // mark the union so overlapping spans are not double counted
    let mut covered = vec![false; a.rows * a.cols];
    for s in spans {
        for r in s.row_start..s.row_end {
            for c in s.col_start..s.col_end {
                covered[r * a.cols + c] = true;
            }
        }
    }
    let in_mass: f64 = covered
        .iter()
        .zip(&a.data)
        .filter_map(|(&m, &v)| if m { Some(v) } else { None })
        .sum();
    Ok(in_mass / a.rows as f64)
}

/// Additive (MLP) attention parameters with an optional softmax temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub query_dim: usize,
    pub key_dim: usize,
    pub att_dim: usize,
    pub temperature: f64,
    wq: ParamId,
    wk: ParamId,
    v: ParamId,
}

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        key_dim: usize,
        att_dim: usize,
        temperature: f64,
        rng: &mut StdRng,
    ) -> Self {
        let wq = store.register(format!("{prefix}.wq"), Tensor::glorot(query_dim, att_dim, rng));
        let wk = store.register(format!("{prefix}.wk"), Tensor::glorot(key_dim, att_dim, rng));
        let v = store.register(format!("{prefix}.v"), Tensor::glorot(att_dim, 1, rng));
        AttentionLayer {
            query_dim,
            key_dim,
            att_dim,
            temperature,
            wq,
            wk,
            v,
        }
    }

    /// Score the query against all keys and return the context vector plus the
    /// attention row (1 x N, summing to one).
    ///
    /// `keys` is an N x key_dim matrix; `temperature_override` replaces the
    /// trained temperature, used when re-extracting alignments.
    pub fn attend(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        query: Var,
        keys: Var,
        temperature_override: Option<f64>,
    ) -> Result<(Var, Var)> {
        let n = tape.value(keys).rows();
        if n == 0 {
            return Err(Error::contract("attend requires at least one key"));
        }
        let kproj = tape.matmul(keys, bound.var(self.wk))?;
        let qproj = tape.matmul(query, bound.var(self.wq))?;
        let pre = tape.add_row_broadcast(kproj, qproj)?;
        let act = tape.tanh(pre);
        let scores = tape.matmul(act, bound.var(self.v))?; // N x 1
        let t = temperature_override.unwrap_or(self.temperature);
        let weights_col = tape.softmax_temperature(scores, t)?;
        let row = tape.transpose(weights_col)?; // 1 x N
        let context = tape.matmul(row, keys)?; // 1 x key_dim
        Ok((context, row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng() -> StdRng {
        StdRng::seed_from_u64(21)
    }

    fn random_layer(store: &mut ParamStore, r: &mut StdRng) -> AttentionLayer {
        AttentionLayer::new(store, "att", 3, 4, 5, 1.0, r)
    }

    #[test]
    fn single_key_gets_all_the_mass() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = random_layer(&mut store, &mut r);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.leaf(Tensor::row(vec![0.1, -0.2, 0.5]));
        let key = Tensor::row(vec![1.0, 2.0, 3.0, 4.0]);
        let keys = tape.leaf(key.clone());
        let (ctx, row) = layer.attend(&mut tape, &bound, q, keys, None).unwrap();
        assert_eq!(tape.value(row).data(), &[1.0]);
        for (a, b) in tape.value(ctx).data().iter().zip(key.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_reproduce_the_key() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = random_layer(&mut store, &mut r);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.leaf(Tensor::row(vec![0.7, 0.7, -0.7]));
        let row_vals = [0.5, -1.0, 2.0, 0.25];
        let keys = tape.leaf(
            Tensor::new(vec![3, 4], row_vals.iter().cycle().take(12).copied().collect()).unwrap(),
        );
        let (ctx, row) = layer.attend(&mut tape, &bound, q, keys, None).unwrap();
        let total: f64 = tape.value(row).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (a, b) in tape.value(ctx).data().iter().zip(&row_vals) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn attend_matches_direct_dense_recomputation() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = random_layer(&mut store, &mut r);
        let q_vals: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let k_vals: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.leaf(Tensor::row(q_vals.clone()));
        let keys = tape.leaf(Tensor::new(vec![5, 4], k_vals.clone()).unwrap());
        let (ctx, row) = layer.attend(&mut tape, &bound, q, keys, None).unwrap();

        // direct recomputation with plain loops
        let wq = store.get(store.by_name("att.wq").unwrap());
        let wk = store.get(store.by_name("att.wk").unwrap());
        let v = store.get(store.by_name("att.v").unwrap());
        let mut scores = Vec::new();
        for n in 0..5 {
            let mut s = 0.0;
            for a in 0..5usize {
                let mut pre = 0.0;
                for i in 0..3 {
                    pre += q_vals[i] * wq.at(i, a);
                }
                for j in 0..4 {
                    pre += k_vals[n * 4 + j] * wk.at(j, a);
                }
                s += pre.tanh() * v.at(a, 0);
            }
            scores.push(s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut expected_ctx = vec![0.0; 4];
        for n in 0..5 {
            for j in 0..4 {
                expected_ctx[j] += weights[n] * k_vals[n * 4 + j];
            }
        }
        for (a, b) in tape.value(row).data().iter().zip(&weights) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(ctx).data().iter().zip(&expected_ctx) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_softens_the_row() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = random_layer(&mut store, &mut r);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.leaf(Tensor::row(vec![1.0, -0.4, 0.3]));
        let keys = tape.leaf(Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 / 4.0).collect()).unwrap());
        let (_, row1) = layer.attend(&mut tape, &bound, q, keys, Some(1.0)).unwrap();
        let (_, row10) = layer.attend(&mut tape, &bound, q, keys, Some(10.0)).unwrap();
        let max1 = tape.value(row1).data().iter().cloned().fold(0.0, f64::max);
        let max10 = tape.value(row10).data().iter().cloned().fold(0.0, f64::max);
        assert!(max10 < max1, "raising T must soften the distribution");
    }

    #[test]
    fn attend_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = random_layer(&mut store, &mut r);
        let q0: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let k0: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();

        let eval = |q_vals: &[f64], k_vals: &[f64], store: &ParamStore| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let q = tape.leaf(Tensor::row(q_vals.to_vec()));
            let keys = tape.leaf(Tensor::new(vec![2, 4], k_vals.to_vec()).unwrap());
            let (ctx, _) = layer.attend(&mut tape, &bound, q, keys, None).unwrap();
            let loss = tape.frobenius_norm_sq(ctx).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).scalar_value(),
                tape.grad(q).unwrap().to_vec(),
                tape.grad(keys).unwrap().to_vec(),
            )
        };

        let (_, gq, gk) = eval(&q0, &k0, &store);
        let eps = 1e-5;
        for i in 0..q0.len() {
            let mut qp = q0.clone();
            qp[i] += eps;
            let (fp, _, _) = eval(&qp, &k0, &store);
            qp[i] -= 2.0 * eps;
            let (fm, _, _) = eval(&qp, &k0, &store);
            let num = (fp - fm) / (2.0 * eps);
            let rel = (gq[i] - num).abs() / gq[i].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "query grad {i}: {} vs {num}", gq[i]);
        }
        for i in 0..k0.len() {
            let mut kp = k0.clone();
            kp[i] += eps;
            let (fp, _, _) = eval(&q0, &kp, &store);
            kp[i] -= 2.0 * eps;
            let (fm, _, _) = eval(&q0, &kp, &store);
            let num = (fp - fm) / (2.0 * eps);
            let rel = (gk[i] - num).abs() / gk[i].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "key grad {i}: {} vs {num}", gk[i]);
        }
    }

    #[test]
    fn mass_covers_whole_matrix_and_empty_set() {
        let a = AttentionMatrix::from_rows(&[vec![0.25, 0.75], vec![0.6, 0.4]]).unwrap();
        let all = AlignSpan {
            row_start: 0,
            row_end: 2,
            col_start: 0,
            col_end: 2,
        };
        assert!((attention_mass_in_spans(&a, &[all]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(attention_mass_in_spans(&a, &[]).unwrap(), 0.0);
    }

    #[test]
    fn mass_single_cell_is_weight_over_rows() {
        let a = AttentionMatrix::from_rows(&[vec![0.25, 0.75], vec![0.6, 0.4]]).unwrap();
        let cell = AlignSpan {
            row_start: 1,
            row_end: 2,
            col_start: 0,
            col_end: 1,
        };
        let m = attention_mass_in_spans(&a, &[cell]).unwrap();
        assert!((m - 0.6 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mass_union_does_not_double_count() {
        let a = AttentionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let s = AlignSpan {
            row_start: 0,
            row_end: 2,
            col_start: 0,
            col_end: 1,
        };
        // same span twice must not double the mass
        let m = attention_mass_in_spans(&a, &[s, s]).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mass_rejects_out_of_bounds() {
        let a = AttentionMatrix::from_rows(&[vec![1.0]]).unwrap();
        let bad = AlignSpan {
            row_start: 0,
            row_end: 2,
            col_start: 0,
            col_end: 1,
        };
        assert!(attention_mass_in_spans(&a, &[bad]).is_err());
    }

    #[test]
    fn text_export_round_trips() {
        let a = AttentionMatrix::from_rows(&[vec![0.125, 0.875], vec![0.5, 0.5]]).unwrap();
        let mut buf = Vec::new();
        a.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("2 2\n"));
        let back = AttentionMatrix::read_text(&text).unwrap();
        assert_eq!(a, back);
    }

    proptest! {
        #[test]
        fn captured_rows_are_stochastic(
            seed in 0u64..500,
            n in 1usize..7,
        ) {
            let mut store = ParamStore::new();
            let mut r = StdRng::seed_from_u64(seed);
            let layer = AttentionLayer::new(&mut store, "att", 2, 3, 4, 1.0, &mut r);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let q = tape.leaf(Tensor::row(vec![r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]));
            let keys = tape.leaf(
                Tensor::new(vec![n, 3], (0..n * 3).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap(),
            );
            let (_, row) = layer.attend(&mut tape, &bound, q, keys, None).unwrap();
            let data = tape.value(row).data();
            let sum: f64 = data.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(data.iter().all(|&v| v >= 0.0));
        }
    }
}
