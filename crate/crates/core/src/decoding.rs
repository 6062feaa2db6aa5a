//! Beam search with length normalization and the two-phase joint decoding
//! procedure for models with two decoders.

use crate::corpus::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{ArchKind, DecState, InferenceSession, Model, SourceData};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// How the second phase treats phase-1 candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Search the second decoder on every phase-1 candidate and keep the pair
    /// with the best interpolated score.
    Joint,
    /// Only expand the single best phase-1 candidate.
    First1Best,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(DecodeMode::Joint),
            "first-1best" => Ok(DecodeMode::First1Best),
            other => Err(Error::config(format!("unknown decode mode: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    /// Length-normalization weight in the GNMT penalty.
    pub alpha_len: f64,
    pub max_len: usize,
    pub mode: DecodeMode,
    /// Combine phase scores on raw log-probabilities instead of
    /// length-normalized ones.
    pub raw_joint: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 4,
            alpha_len: 0.8,
            max_len: 64,
            mode: DecodeMode::Joint,
            raw_joint: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::config("beam size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha_len) {
            return Err(Error::config("length-norm weight must lie in [0, 1]"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max output length must be positive"));
        }
        Ok(())
    }
}

/// GNMT length penalty ((5 + length) / 6)^alpha.
pub fn length_penalty(length: usize, alpha_len: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha_len)
}

/// A partial or complete decode of one decoder.
#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    /// Emitted tokens, including the final EOS when complete.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub normalized: f64,
    pub state: S,
    /// Decoder hidden-state trace, one vector per emitted token.
    pub states_trace: Vec<Vec<f64>>,
    /// Captured attention rows per step: over encoder states, over S1 states.
    pub rows_enc: Vec<Vec<f64>>,
    pub rows_s1: Vec<Vec<f64>>,
    pub complete: bool,
    /// Step at which EOS was emitted (= tokens.len() for complete hypotheses).
    pub completed_at: usize,
}

impl<S> Hypothesis<S> {
    fn renormalize(&mut self, alpha_len: f64) {
        let len = self.tokens.len().max(1);
        self.normalized = self.log_prob / length_penalty(len, alpha_len);
    }

    /// Content tokens without the trailing EOS.
    pub fn surface_tokens(&self) -> &[u32] {
        if self.complete && self.tokens.last() == Some(&EOS_ID) {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Deterministic ranking: normalized score descending, then earlier
/// completion, then lexicographic token order.
fn rank<S>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> Ordering {
    b.normalized
        .partial_cmp(&a.normalized)
        .unwrap_or(Ordering::Equal)
        .then(a.completed_at.cmp(&b.completed_at))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// One decoder step for beam search: log-probabilities over the vocabulary
/// plus the data needed to build hypothesis traces.
pub struct StepOutput<S> {
    pub state: S,
    pub log_probs: Vec<f64>,
    pub state_vec: Vec<f64>,
    pub row_enc: Option<Vec<f64>>,
    pub row_s1: Option<Vec<f64>>,
}

pub struct BeamResult<S> {
    /// Complete hypotheses sorted by the deterministic ranking; when nothing
    /// completed, the single best incomplete hypothesis.
    pub hyps: Vec<Hypothesis<S>>,
    /// Set when no hypothesis completed within the length budget.
    pub incomplete: bool,
}

impl<S> BeamResult<S> {
    pub fn best(&self) -> &Hypothesis<S> {
        &self.hyps[0]
    }
}

/// Standard beam search over a step function. The step function receives the
/// previous state and the previously emitted token (BOS at the start).
pub fn beam_search<S: Clone, F>(
    init: S,
    mut step: F,
    vocab_size: usize,
    cfg: &BeamConfig,
) -> Result<BeamResult<S>>
where
    F: FnMut(&S, u32) -> Result<StepOutput<S>>,
{
    cfg.validate()?;
    let mut live: Vec<Hypothesis<S>> = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        normalized: 0.0,
        state: init,
        states_trace: Vec::new(),
        rows_enc: Vec::new(),
        rows_s1: Vec::new(),
        complete: false,
        completed_at: usize::MAX,
    }];
    let mut completed: Vec<Hypothesis<S>> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut candidates: Vec<Hypothesis<S>> = Vec::new();
        for hyp in &live {
            let prev = *hyp.tokens.last().unwrap_or(&BOS_ID);
            let out = step(&hyp.state, prev)?;
            if out.log_probs.len() != vocab_size {
                return Err(Error::contract(format!(
                    "decoder emitted {} log-probs for vocabulary of {vocab_size}",
                    out.log_probs.len()
                )));
            }
            for (tok, &lp) in out.log_probs.iter().enumerate() {
                let tok = tok as u32;
                let mut next = hyp.clone();
                next.tokens.push(tok);
                next.log_prob += lp;
                next.state = out.state.clone();
                next.states_trace.push(out.state_vec.clone());
                if let Some(r) = &out.row_enc {
                    next.rows_enc.push(r.clone());
                }
                if let Some(r) = &out.row_s1 {
                    next.rows_s1.push(r.clone());
                }
                if tok == EOS_ID {
                    next.complete = true;
                    next.completed_at = next.tokens.len();
                }
                next.renormalize(cfg.alpha_len);
                candidates.push(next);
            }
        }
        candidates.sort_by(rank);
        // only the top `beam` candidates survive this step; completions among
        // them retire to the pool, the rest stay live (beam 1 = greedy)
        let mut next_live = Vec::with_capacity(cfg.beam);
        for cand in candidates.into_iter().take(cfg.beam) {
            if cand.complete {
                completed.push(cand);
            } else {
                next_live.push(cand);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    completed.sort_by(rank);
    if completed.is_empty() {
        live.sort_by(rank);
        let best = live
            .into_iter()
            .next()
            .ok_or_else(|| Error::contract("beam search produced no hypotheses"))?;
        return Ok(BeamResult {
            hyps: vec![best],
            incomplete: true,
        });
    }
    Ok(BeamResult {
        hyps: completed,
        incomplete: false,
    })
}

/// A model with two decoders, searchable phase by phase.
pub trait JointStepper {
    type State: Clone;

    fn phase1(&mut self, cfg: &BeamConfig) -> Result<BeamResult<Self::State>>;
    fn phase2(
        &mut self,
        candidate: &Hypothesis<Self::State>,
        cfg: &BeamConfig,
    ) -> Result<BeamResult<Self::State>>;
}

/// The chosen transcription/translation pair and its interpolated score.
pub struct JointDecode<S> {
    pub y1: Hypothesis<S>,
    pub y2: Hypothesis<S>,
    pub joint_score: f64,
    /// Joint scores of every explored (candidate, translation) pair.
    pub explored: Vec<f64>,
    pub incomplete: bool,
}

/// Two-phase beam search: decode the first task, then decode the second task
/// conditioned on each candidate, and output the pair with the highest
/// interpolated score.
pub fn two_phase_decode<M: JointStepper>(
    model: &mut M,
    cfg: &BeamConfig,
    lambda: f64,
) -> Result<JointDecode<M::State>> {
    cfg.validate()?;
    let phase1 = model.phase1(cfg)?;
    let n_candidates = match cfg.mode {
        DecodeMode::Joint => phase1.hyps.len(),
        DecodeMode::First1Best => 1,
    };

    let mut best: Option<JointDecode<M::State>> = None;
    let mut explored = Vec::new();
    let mut any_incomplete = phase1.incomplete;
    for cand in phase1.hyps.iter().take(n_candidates) {
        let phase2 = model.phase2(cand, cfg)?;
        any_incomplete |= phase2.incomplete;
        for hyp2 in &phase2.hyps {
            let joint = if cfg.raw_joint {
                lambda * cand.log_prob + (1.0 - lambda) * hyp2.log_prob
            } else {
                lambda * cand.normalized + (1.0 - lambda) * hyp2.normalized
            };
            explored.push(joint);
            let better = match &best {
                None => true,
                Some(b) => joint > b.joint_score,
            };
            if better {
                best = Some(JointDecode {
                    y1: cand.clone(),
                    y2: hyp2.clone(),
                    joint_score: joint,
                    explored: Vec::new(),
                    incomplete: false,
                });
            }
        }
    }
    let mut out = best.ok_or_else(|| Error::contract("two-phase decode explored no pairs"))?;
    out.explored = explored;
    out.incomplete = any_incomplete;
    Ok(out)
}

// ---- model adapters ---------------------------------------------------------

/// Adapter implementing [`JointStepper`] over a live [`InferenceSession`].
pub struct ModelJointDecoder<'m> {
    session: InferenceSession<'m>,
}

impl<'m> ModelJointDecoder<'m> {
    pub fn new(model: &'m Model, src: &SourceData) -> Result<Self> {
        if !model.arch.kind.has_second_decoder() {
            return Err(Error::config(
                "two-phase decoding needs an architecture with two decoders",
            ));
        }
        Ok(ModelJointDecoder {
            session: model.start_inference(src)?,
        })
    }
}

impl JointStepper for ModelJointDecoder<'_> {
    type State = DecState;

    fn phase1(&mut self, cfg: &BeamConfig) -> Result<BeamResult<DecState>> {
        let vocab = self.session.model().y1_vocab.size();
        let init = self.session.dec1_start();
        let session = &mut self.session;
        beam_search(
            init,
            |state, prev| {
                let step = session.dec1_step(state, prev)?;
                Ok(StepOutput {
                    state: step.state,
                    log_probs: step.log_probs,
                    state_vec: step.state_vec,
                    row_enc: step.row_enc,
                    row_s1: step.row_s1,
                })
            },
            vocab,
            cfg,
        )
    }

    fn phase2(
        &mut self,
        candidate: &Hypothesis<DecState>,
        cfg: &BeamConfig,
    ) -> Result<BeamResult<DecState>> {
        let model = self.session.model();
        let vocab = model
            .second_vocab()
            .ok_or_else(|| Error::contract("model lacks a second vocabulary"))?
            .size();
        let needs_s1 = matches!(model.arch.kind, ArchKind::Cascade | ArchKind::Triangle);
        let s1_keys = if needs_s1 {
            Some(self.session.make_s1_keys(&candidate.states_trace)?)
        } else {
            None
        };
        let init = self.session.dec2_start()?;
        let session = &mut self.session;
        beam_search(
            init,
            |state, prev| {
                let step = session.dec2_step(s1_keys, state, prev)?;
                Ok(StepOutput {
                    state: step.state,
                    log_probs: step.log_probs,
                    state_vec: step.state_vec,
                    row_enc: step.row_enc,
                    row_s1: step.row_s1,
                })
            },
            vocab,
            cfg,
        )
    }
}

/// Beam-search the first decoder of `model` over one source sequence.
pub fn decode_single(
    model: &Model,
    src: &SourceData,
    cfg: &BeamConfig,
) -> Result<BeamResult<DecState>> {
    let mut session = model.start_inference(src)?;
    let vocab = model.y1_vocab.size();
    let init = session.dec1_start();
    beam_search(
        init,
        |state, prev| {
            let step = session.dec1_step(state, prev)?;
            Ok(StepOutput {
                state: step.state,
                log_probs: step.log_probs,
                state_vec: step.state_vec,
                row_enc: step.row_enc,
                row_s1: step.row_s1,
            })
        },
        vocab,
        cfg,
    )
}

/// Default output-length budget: 3x the source length for text, half the
/// frame count for speech.
pub fn default_max_len(model: &Model, src: &SourceData) -> usize {
    match (model.kind, src) {
        (crate::corpus::CorpusKind::Text, _) => (src.len() * 3).max(4),
        (crate::corpus::CorpusKind::Speech, _) => (src.len() / 2).max(4),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn length_penalty_hand_values() {
        assert_eq!(length_penalty(1, 0.8), 1.0);
        assert_eq!(length_penalty(1, 0.0), 1.0);
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-15);
        for len in 1..20 {
            assert_eq!(length_penalty(len, 0.0), 1.0);
        }
    }

    /// Table-driven toy decoder: log P(token | prefix) looked up by prefix.
    /// Unlisted prefixes fall back to a uniform distribution.
    #[derive(Clone)]
    struct ToyDecoder {
        vocab: usize,
        table: HashMap<Vec<u32>, Vec<f64>>,
    }

    impl ToyDecoder {
        fn step(&self, prefix: &[u32]) -> Vec<f64> {
            match self.table.get(prefix) {
                Some(row) => row.clone(),
                None => vec![(1.0 / self.vocab as f64).ln(); self.vocab],
            }
        }
    }

    /// Prefix state with an explicit start marker, so a content token equal to
    /// BOS_ID cannot be confused with the initial BOS feed.
    #[derive(Clone, Default)]
    struct ToyState {
        started: bool,
        prefix: Vec<u32>,
    }

    fn toy_step(decoder: &ToyDecoder, state: &ToyState, prev: u32) -> StepOutput<ToyState> {
        let mut next = state.clone();
        if next.started {
            next.prefix.push(prev);
        } else {
            next.started = true;
        }
        let log_probs = decoder.step(&next.prefix);
        StepOutput {
            state: next,
            log_probs,
            state_vec: vec![0.0],
            row_enc: None,
            row_s1: None,
        }
    }

    fn run_beam(decoder: &ToyDecoder, cfg: &BeamConfig) -> BeamResult<ToyState> {
        beam_search(
            ToyState::default(),
            |state: &ToyState, prev| Ok(toy_step(decoder, state, prev)),
            decoder.vocab,
            cfg,
        )
        .unwrap()
    }

    fn probs(entries: &[f64]) -> Vec<f64> {
        entries.iter().map(|p| p.ln()).collect()
    }

    /// Exhaustively enumerate all complete sequences (content tokens then
    /// EOS) up to max_len steps and rank them with the same contract.
    fn exhaustive(decoder: &ToyDecoder, cfg: &BeamConfig) -> Vec<(Vec<u32>, f64)> {
        let content: Vec<u32> = (0..decoder.vocab as u32).filter(|&t| t != EOS_ID).collect();
        let mut results: Vec<(Vec<u32>, f64, usize)> = Vec::new();
        // sequences of exactly L tokens where the last is EOS
        for total_len in 1..=cfg.max_len {
            let num_content = total_len - 1;
            let mut stack: Vec<Vec<u32>> = vec![Vec::new()];
            for _ in 0..num_content {
                let mut next = Vec::new();
                for s in &stack {
                    for &t in &content {
                        let mut s2 = s.clone();
                        s2.push(t);
                        next.push(s2);
                    }
                }
                stack = next;
            }
            for s in stack {
                let mut logp = 0.0;
                let mut prefix = Vec::new();
                for &t in &s {
                    logp += decoder.step(&prefix)[t as usize];
                    prefix.push(t);
                }
                logp += decoder.step(&prefix)[EOS_ID as usize];
                let mut tokens = s.clone();
                tokens.push(EOS_ID);
                let norm = logp / length_penalty(tokens.len(), cfg.alpha_len);
                results.push((tokens, norm, total_len));
            }
        }
        results.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then(a.2.cmp(&b.2))
                .then_with(|| a.0.cmp(&b.0))
        });
        results.into_iter().map(|(t, n, _)| (t, n)).collect()
    }

    fn uniform_toy() -> ToyDecoder {
        // vocab 3: EOS=2, content {0 -> never used, 1}; here tokens 0 and 1
        // are content, EOS_ID = 2
        let mut table = HashMap::new();
        table.insert(Vec::new(), probs(&[0.5, 0.2, 0.3]));
        table.insert(vec![0], probs(&[0.1, 0.6, 0.3]));
        table.insert(vec![1], probs(&[0.3, 0.3, 0.4]));
        table.insert(vec![0, 1], probs(&[0.2, 0.2, 0.6]));
        ToyDecoder { vocab: 3, table }
    }

    #[test]
    fn beam_one_is_greedy() {
        let toy = uniform_toy();
        let cfg = BeamConfig {
            beam: 1,
            alpha_len: 0.0,
            max_len: 4,
            ..Default::default()
        };
        let result = run_beam(&toy, &cfg);
        // greedy path: argmax at root = token 0 (0.5); then argmax = 1 (0.6);
        // then argmax = EOS (0.6)
        let best = result.best();
        assert_eq!(best.tokens, vec![0, 1, EOS_ID]);
    }

    #[test]
    fn huge_beam_matches_exhaustive_enumeration() {
        let toy = uniform_toy();
        let cfg = BeamConfig {
            beam: 27,
            alpha_len: 0.8,
            max_len: 3,
            ..Default::default()
        };
        let result = run_beam(&toy, &cfg);
        let oracle = exhaustive(&toy, &cfg);
        assert_eq!(result.hyps.len(), oracle.len());
        for (hyp, (tokens, norm)) in result.hyps.iter().zip(&oracle) {
            assert_eq!(&hyp.tokens, tokens);
            assert!((hyp.normalized - norm).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_alpha_reduces_to_raw_logprob() {
        let toy = uniform_toy();
        let cfg = BeamConfig {
            beam: 8,
            alpha_len: 0.0,
            max_len: 3,
            ..Default::default()
        };
        let result = run_beam(&toy, &cfg);
        for h in &result.hyps {
            assert!((h.normalized - h.log_prob).abs() < 1e-15);
        }
    }

    #[test]
    fn never_completing_decoder_returns_incomplete_with_warning() {
        let toy = ToyDecoder {
            vocab: 3,
            table: HashMap::from([(
                Vec::new(),
                vec![(0.5f64).ln(), (0.5f64).ln(), -1e18],
            )]),
        };
        // fallback rows are uniform, so EOS stays possible after step 1;
        // pin every prefix to avoid that
        let mut table = HashMap::new();
        let no_eos = vec![(0.5f64).ln(), (0.5f64).ln(), -1e18];
        table.insert(Vec::new(), no_eos.clone());
        for a in 0..2u32 {
            table.insert(vec![a], no_eos.clone());
            for b in 0..2u32 {
                table.insert(vec![a, b], no_eos.clone());
            }
        }
        let toy = ToyDecoder { vocab: 3, table: { let mut t = toy.table; t.extend(table); t } };
        let cfg = BeamConfig {
            beam: 2,
            alpha_len: 0.8,
            max_len: 3,
            ..Default::default()
        };
        let result = run_beam(&toy, &cfg);
        assert!(result.incomplete);
        assert_eq!(result.hyps.len(), 1);
        assert!(!result.best().complete);
        assert_eq!(result.best().tokens.len(), 3);
    }

    #[test]
    fn beam_search_is_deterministic() {
        let toy = uniform_toy();
        let cfg = BeamConfig {
            beam: 4,
            alpha_len: 0.8,
            max_len: 4,
            ..Default::default()
        };
        let a = run_beam(&toy, &cfg);
        let b = run_beam(&toy, &cfg);
        let toks = |r: &BeamResult<ToyState>| {
            r.hyps
                .iter()
                .map(|h| (h.tokens.clone(), h.normalized))
                .collect::<Vec<_>>()
        };
        assert_eq!(toks(&a), toks(&b));
    }

    /// Two-phase toy: phase-1 candidate "a" is locally best, but the pair
    /// (b, q) wins jointly. first-1best must miss it; joint must find it.
    struct TwoPhaseToy {
        phase1: ToyDecoder,
        // per phase-1 surface string, a second-phase decoder
        phase2: HashMap<Vec<u32>, ToyDecoder>,
    }

    impl JointStepper for TwoPhaseToy {
        type State = ToyState;

        fn phase1(&mut self, cfg: &BeamConfig) -> Result<BeamResult<ToyState>> {
            let dec = self.phase1.clone();
            beam_search(
                ToyState::default(),
                |state: &ToyState, prev| Ok(toy_step(&dec, state, prev)),
                dec.vocab,
                cfg,
            )
        }

        fn phase2(
            &mut self,
            candidate: &Hypothesis<ToyState>,
            cfg: &BeamConfig,
        ) -> Result<BeamResult<ToyState>> {
            // unknown candidates (e.g. the bare-EOS one) decode uniformly
            let dec = self
                .phase2
                .get(candidate.surface_tokens())
                .cloned()
                .unwrap_or(ToyDecoder {
                    vocab: 3,
                    table: HashMap::new(),
                });
            beam_search(
                ToyState::default(),
                |state: &ToyState, prev| Ok(toy_step(&dec, state, prev)),
                dec.vocab,
                cfg,
            )
        }
    }

    fn joint_fixture() -> TwoPhaseToy {
        // vocab 3, content tokens {0, 1}, EOS = 2; all sequences length <= 2
        // phase 1: P(0 then EOS) = 0.6 * 1.0, P(1 then EOS) = 0.4 * 1.0
        let mut p1 = HashMap::new();
        p1.insert(Vec::new(), probs(&[0.6, 0.4, 1e-12]));
        p1.insert(vec![0], probs(&[1e-12, 1e-12, 1.0]));
        p1.insert(vec![1], probs(&[1e-12, 1e-12, 1.0]));
        // phase 2 given [0]: every translation is low-confidence
        let mut p2_given_a = HashMap::new();
        p2_given_a.insert(Vec::new(), probs(&[0.35, 0.34, 0.31]));
        p2_given_a.insert(vec![0], probs(&[1e-12, 1e-12, 1.0]));
        p2_given_a.insert(vec![1], probs(&[1e-12, 1e-12, 1.0]));
        // phase 2 given [1]: one translation is near-certain
        let mut p2_given_b = HashMap::new();
        p2_given_b.insert(Vec::new(), probs(&[0.01, 0.98, 0.01]));
        p2_given_b.insert(vec![0], probs(&[1e-12, 1e-12, 1.0]));
        p2_given_b.insert(vec![1], probs(&[1e-12, 1e-12, 1.0]));
        TwoPhaseToy {
            phase1: ToyDecoder {
                vocab: 3,
                table: p1,
            },
            phase2: HashMap::from([
                (vec![0u32], ToyDecoder { vocab: 3, table: p2_given_a }),
                (vec![1u32], ToyDecoder { vocab: 3, table: p2_given_b }),
            ]),
        }
    }

    /// Enumerate every (Y1, Y2) pair of the fixture and return the best joint
    /// score under the same normalization.
    fn brute_force_joint(toy: &mut TwoPhaseToy, cfg: &BeamConfig, lambda: f64) -> (Vec<u32>, Vec<u32>, f64) {
        let p1 = toy.phase1(&BeamConfig { beam: 64, ..*cfg }).unwrap();
        let mut best = (Vec::new(), Vec::new(), f64::NEG_INFINITY);
        for c in &p1.hyps {
            let p2 = toy.phase2(c, &BeamConfig { beam: 64, ..*cfg }).unwrap();
            for h in &p2.hyps {
                let joint = lambda * c.normalized + (1.0 - lambda) * h.normalized;
                if joint > best.2 {
                    best = (c.tokens.clone(), h.tokens.clone(), joint);
                }
            }
        }
        best
    }

    #[test]
    fn joint_mode_beats_first_1best_on_constructed_fixture() {
        let cfg = BeamConfig {
            beam: 4,
            alpha_len: 0.8,
            max_len: 2,
            mode: DecodeMode::Joint,
            raw_joint: false,
        };
        let lambda = 0.5;

        let mut toy = joint_fixture();
        let joint = two_phase_decode(&mut toy, &cfg, lambda).unwrap();

        let mut toy = joint_fixture();
        let first = two_phase_decode(
            &mut toy,
            &BeamConfig {
                mode: DecodeMode::First1Best,
                ..cfg
            },
            lambda,
        )
        .unwrap();

        let mut toy = joint_fixture();
        let (best_y1, best_y2, best_score) = brute_force_joint(&mut toy, &cfg, lambda);

        // the constructed optimum pairs candidate [1] with translation [1]
        assert_eq!(best_y1, vec![1, EOS_ID]);
        assert_eq!(best_y2, vec![1, EOS_ID]);
        assert_eq!(joint.y1.tokens, best_y1);
        assert_eq!(joint.y2.tokens, best_y2);
        assert!((joint.joint_score - best_score).abs() < 1e-12);

        // first-1best is stuck on the locally best candidate [0]
        assert_eq!(first.y1.tokens, vec![0, EOS_ID]);
        assert!(first.joint_score < joint.joint_score);
    }

    #[test]
    fn k1_joint_equals_first_1best() {
        let lambda = 0.5;
        let base = BeamConfig {
            beam: 1,
            alpha_len: 0.8,
            max_len: 2,
            mode: DecodeMode::Joint,
            raw_joint: false,
        };
        let mut toy = joint_fixture();
        let joint = two_phase_decode(&mut toy, &base, lambda).unwrap();
        let mut toy = joint_fixture();
        let first = two_phase_decode(
            &mut toy,
            &BeamConfig {
                mode: DecodeMode::First1Best,
                ..base
            },
            lambda,
        )
        .unwrap();
        assert_eq!(joint.y1.tokens, first.y1.tokens);
        assert_eq!(joint.y2.tokens, first.y2.tokens);
        assert!((joint.joint_score - first.joint_score).abs() < 1e-15);
    }

    #[test]
    fn returned_joint_score_dominates_explored_pairs() {
        let cfg = BeamConfig {
            beam: 4,
            alpha_len: 0.8,
            max_len: 2,
            mode: DecodeMode::Joint,
            raw_joint: false,
        };
        let mut toy = joint_fixture();
        let joint = two_phase_decode(&mut toy, &cfg, 0.5).unwrap();
        assert!(!joint.explored.is_empty());
        for &score in &joint.explored {
            assert!(joint.joint_score >= score - 1e-15);
        }
    }
}
