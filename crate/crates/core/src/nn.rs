//! Neural layers: embeddings, LSTM cells, bidirectional text encoder,
//! pyramidal speech encoder, and the output vocabulary projection.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

/// Embedding table over a vocabulary, one row per symbol id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub weight: ParamId,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut StdRng,
    ) -> Self {
        let weight = store.register(
            format!("{prefix}.embed"),
            Tensor::glorot(vocab_size, dim, rng),
        );
        EmbeddingTable {
            vocab_size,
            dim,
            weight,
        }
    }

    pub fn lookup(&self, tape: &mut Tape, bound: &Bound, token: u32) -> Result<Var> {
        let table = bound.var(self.weight);
        if token as usize >= self.vocab_size {
            return Err(Error::contract(format!(
                "token id {token} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        tape.lookup(table, token as usize)
    }
}

/// Gate order within an LSTM cell.
const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// One LSTM cell. Each of the four gates owns a (input+hidden) x hidden
/// weight matrix and a 1 x hidden bias, so the parameter count is
/// 4 * (hidden * (input + hidden) + hidden).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    weights: [ParamId; 4],
    biases: [ParamId; 4],
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut StdRng,
    ) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for gate in GATES {
            weights.push(store.register(
                format!("{prefix}.w_{gate}"),
                Tensor::glorot(input_size + hidden_size, hidden_size, rng),
            ));
            // forget gate bias starts at +1 to ease gradient flow early on
            let init = if gate == "f" { 1.0 } else { 0.0 };
            biases.push(store.register(
                format!("{prefix}.b_{gate}"),
                Tensor::row(vec![init; hidden_size]),
            ));
        }
        LstmCell {
            input_size,
            hidden_size,
            weights: [weights[0], weights[1], weights[2], weights[3]],
            biases: [biases[0], biases[1], biases[2], biases[3]],
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (Var, Var) {
        let h = tape.leaf(Tensor::row(vec![0.0; self.hidden_size]));
        let c = tape.leaf(Tensor::row(vec![0.0; self.hidden_size]));
        (h, c)
    }

    /// Standard LSTM recurrence with sigmoid gates and tanh candidate.
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prev_h: Var,
        prev_c: Var,
        x: Var,
    ) -> Result<(Var, Var)> {
        let xs = tape.value(x).shape().to_vec();
        if xs != [1, self.input_size] {
            return Err(Error::Shape {
                op: "lstm_step",
                lhs: vec![1, self.input_size],
                rhs: xs,
            });
        }
        let xh = tape.concat(&[x, prev_h], 1)?;
        let mut gates = Vec::with_capacity(4);
        for k in 0..4 {
            let lin = tape.matmul(xh, bound.var(self.weights[k]))?;
            let pre = tape.add(lin, bound.var(self.biases[k]))?;
            gates.push(pre);
        }
        let i = tape.sigmoid(gates[0]);
        let f = tape.sigmoid(gates[1]);
        let o = tape.sigmoid(gates[2]);
        let g = tape.tanh(gates[3]);
        let fc = tape.mul(f, prev_c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }
}

/// Configuration of the bidirectional text encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_size: usize,
    /// Stacked depth; layer 1 is bidirectional, deeper layers unidirectional.
    pub layers: usize,
}

/// Bidirectional LSTM encoder over token ids. Forward and backward states are
/// concatenated per position, so the output dimension is 2 * hidden.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    embed: EmbeddingTable,
    fwd: LstmCell,
    bwd: LstmCell,
    upper: Vec<LstmCell>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: TextEncoderConfig, rng: &mut StdRng) -> Self {
        let embed = EmbeddingTable::new(store, "enc", cfg.vocab_size, cfg.embed_dim, rng);
        let fwd = LstmCell::new(store, "enc.fwd", cfg.embed_dim, cfg.hidden_size, rng);
        let bwd = LstmCell::new(store, "enc.bwd", cfg.embed_dim, cfg.hidden_size, rng);
        let mut upper = Vec::new();
        for l in 1..cfg.layers {
            upper.push(LstmCell::new(
                store,
                &format!("enc.l{}", l + 1),
                2 * cfg.hidden_size,
                2 * cfg.hidden_size,
                rng,
            ));
        }
        TextEncoder {
            cfg,
            embed,
            fwd,
            bwd,
            upper,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.cfg.hidden_size
    }

    /// Encode a token sequence into one state per position.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[u32],
        dropout: Option<(f64, &mut StdRng)>,
    ) -> Result<Vec<Var>> {
        if tokens.is_empty() {
            return Err(Error::contract("encode_text requires a nonempty sequence"));
        }
        let mut embs = Vec::with_capacity(tokens.len());
        for &t in tokens {
            embs.push(self.embed.lookup(tape, bound, t)?);
        }
        if let Some((p, rng)) = dropout {
            for e in embs.iter_mut() {
                *e = tape.dropout(*e, p, rng)?;
            }
        }

        let (mut h, mut c) = self.fwd.zero_state(tape);
        let mut fwd_states = Vec::with_capacity(tokens.len());
        for &e in &embs {
            let (nh, nc) = self.fwd.step(tape, bound, h, c, e)?;
            h = nh;
            c = nc;
            fwd_states.push(h);
        }

        let (mut h, mut c) = self.bwd.zero_state(tape);
        let mut bwd_states = vec![fwd_states[0]; tokens.len()];
        for (pos, &e) in embs.iter().enumerate().rev() {
            let (nh, nc) = self.bwd.step(tape, bound, h, c, e)?;
            h = nh;
            c = nc;
            bwd_states[pos] = h;
        }

        let mut states = Vec::with_capacity(tokens.len());
        for (f, b) in fwd_states.iter().zip(&bwd_states) {
            states.push(tape.concat(&[*f, *b], 1)?);
        }

        for cell in &self.upper {
            let (mut h, mut c) = cell.zero_state(tape);
            let mut next = Vec::with_capacity(states.len());
            for &s in &states {
                let (nh, nc) = cell.step(tape, bound, h, c, s)?;
                h = nh;
                c = nc;
                next.push(h);
            }
            states = next;
        }
        Ok(states)
    }
}

/// Pyramidal speech encoder configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeechEncoderConfig {
    /// Dimension of the input feature frames.
    pub input_dim: usize,
    /// Hidden size of the first, bidirectional layer.
    pub hidden1: usize,
    pub hidden2: usize,
    pub hidden3: usize,
    /// Each layer above the first consumes every `stride`-th output.
    pub stride: usize,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        SpeechEncoderConfig {
            input_dim: 39,
            hidden1: 128,
            hidden2: 128,
            hidden3: 512,
            stride: 2,
        }
    }
}

impl SpeechEncoderConfig {
    /// Output length after both downsampling stages (ceiling at each stage).
    pub fn output_len(&self, n: usize) -> usize {
        let after2 = n.div_ceil(self.stride);
        after2.div_ceil(self.stride)
    }
}

/// Three-layer pyramidal encoder: a bidirectional layer over raw frames, then
/// two unidirectional layers that each consume every second output of the
/// layer below, downsampling the sequence by stride^2 overall.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeechEncoder {
    pub cfg: SpeechEncoderConfig,
    l1f: LstmCell,
    l1b: LstmCell,
    l2: LstmCell,
    l3: LstmCell,
}

impl SpeechEncoder {
    pub fn new(store: &mut ParamStore, cfg: SpeechEncoderConfig, rng: &mut StdRng) -> Self {
        let l1f = LstmCell::new(store, "spe.l1f", cfg.input_dim, cfg.hidden1, rng);
        let l1b = LstmCell::new(store, "spe.l1b", cfg.input_dim, cfg.hidden1, rng);
        let l2 = LstmCell::new(store, "spe.l2", 2 * cfg.hidden1, cfg.hidden2, rng);
        let l3 = LstmCell::new(store, "spe.l3", cfg.hidden2, cfg.hidden3, rng);
        SpeechEncoder { cfg, l1f, l1b, l2, l3 }
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.hidden3
    }

    /// Encode an N x input_dim feature matrix into ceil(ceil(N/2)/2) states.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &Tensor,
        dropout: Option<(f64, &mut StdRng)>,
    ) -> Result<Vec<Var>> {
        let n = features.rows();
        if features.shape().len() != 2 || features.cols() != self.cfg.input_dim {
            return Err(Error::Shape {
                op: "encode_speech",
                lhs: vec![n, self.cfg.input_dim],
                rhs: features.shape().to_vec(),
            });
        }
        if n < 4 {
            return Err(Error::contract(format!(
                "encode_speech requires at least 4 frames, got {n}"
            )));
        }
        let feat = tape.leaf(features.clone());
        let mut frames = Vec::with_capacity(n);
        for i in 0..n {
            frames.push(tape.lookup(feat, i)?);
        }

        let (mut h, mut c) = self.l1f.zero_state(tape);
        let mut fwd = Vec::with_capacity(n);
        for &f in &frames {
            let (nh, nc) = self.l1f.step(tape, bound, h, c, f)?;
            h = nh;
            c = nc;
            fwd.push(h);
        }
        let (mut h, mut c) = self.l1b.zero_state(tape);
        let mut bwd = vec![fwd[0]; n];
        for (pos, &f) in frames.iter().enumerate().rev() {
            let (nh, nc) = self.l1b.step(tape, bound, h, c, f)?;
            h = nh;
            c = nc;
            bwd[pos] = h;
        }
        let mut l1_out = Vec::with_capacity(n);
        for (f, b) in fwd.iter().zip(&bwd) {
            l1_out.push(tape.concat(&[*f, *b], 1)?);
        }

        let mut dropout = dropout;
        if let Some((p, rng)) = dropout.as_mut() {
            for s in l1_out.iter_mut() {
                *s = tape.dropout(*s, *p, rng)?;
            }
        }

        // even-indexed outputs (0, 2, 4, ...) survive each downsampling stage
        let l2_in: Vec<Var> = l1_out.iter().step_by(self.cfg.stride).copied().collect();
        let (mut h, mut c) = self.l2.zero_state(tape);
        let mut l2_out = Vec::with_capacity(l2_in.len());
        for &s in &l2_in {
            let (nh, nc) = self.l2.step(tape, bound, h, c, s)?;
            h = nh;
            c = nc;
            l2_out.push(h);
        }

        if let Some((p, rng)) = dropout.as_mut() {
            for s in l2_out.iter_mut() {
                *s = tape.dropout(*s, *p, rng)?;
            }
        }

        let l3_in: Vec<Var> = l2_out.iter().step_by(self.cfg.stride).copied().collect();
        let (mut h, mut c) = self.l3.zero_state(tape);
        let mut l3_out = Vec::with_capacity(l3_in.len());
        for &s in &l3_in {
            let (nh, nc) = self.l3.step(tape, bound, h, c, s)?;
            h = nh;
            c = nc;
            l3_out.push(h);
        }
        debug_assert_eq!(l3_out.len(), self.cfg.output_len(n));
        Ok(l3_out)
    }
}

/// Linear projection to vocabulary log-probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabProjection {
    pub state_dim: usize,
    pub vocab_size: usize,
    w: ParamId,
    b: ParamId,
}

impl VocabProjection {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        state_dim: usize,
        vocab_size: usize,
        rng: &mut StdRng,
    ) -> Self {
        let w = store.register(
            format!("{prefix}.proj_w"),
            Tensor::glorot(state_dim, vocab_size, rng),
        );
        let b = store.register(format!("{prefix}.proj_b"), Tensor::row(vec![0.0; vocab_size]));
        VocabProjection {
            state_dim,
            vocab_size,
            w,
            b,
        }
    }

    /// Log-probabilities over the vocabulary for one decoder state.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, state: Var) -> Result<Var> {
        let logits = tape.matmul(state, bound.var(self.w))?;
        let logits = tape.add(logits, bound.var(self.b))?;
        tape.log_softmax(logits)
    }
}
