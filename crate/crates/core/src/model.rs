//! The four architectures (single-task, multitask, cascade/reconstruction,
//! triangle), the interpolated joint score, and the transitivity and
//! invertibility attention regularizers.

use crate::attention::{AttentionLayer, AttentionMatrix};
use crate::corpus::{CorpusKind, Source, Utterance, Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::nn::{
    EmbeddingTable, LstmCell, SpeechEncoder, SpeechEncoderConfig, TextEncoder, TextEncoderConfig,
    VocabProjection,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Single,
    Multitask,
    Cascade,
    Triangle,
}

impl ArchKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ArchKind::Single),
            "multitask" => Ok(ArchKind::Multitask),
            "cascade" => Ok(ArchKind::Cascade),
            "triangle" => Ok(ArchKind::Triangle),
            other => Err(Error::config(format!("unknown architecture: {other}"))),
        }
    }

    pub fn has_second_decoder(self) -> bool {
        !matches!(self, ArchKind::Single)
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ArchKind::Single => "single",
            ArchKind::Multitask => "multitask",
            ArchKind::Cascade => "cascade",
            ArchKind::Triangle => "triangle",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub kind: ArchKind,
    /// Cascade with the second target equal to the input sequence.
    pub reconstruction: bool,
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reconstruction && self.kind != ArchKind::Cascade {
            return Err(Error::config(
                "reconstruction requires the cascade architecture",
            ));
        }
        Ok(())
    }
}

/// Joint-score interpolation weight and regularizer weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub lambda: f64,
    pub lambda_trans: f64,
    pub lambda_inv: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            lambda: 0.5,
            lambda_trans: 0.2,
            lambda_inv: 0.2,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.lambda_trans < 0.0 || self.lambda_inv < 0.0 {
            return Err(Error::config("regularizer weights must be >= 0"));
        }
        Ok(())
    }
}

/// Which attention regularizer the training objective applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    Transitivity,
    Invertibility,
}

/// Model hyperparameters that are not architecture-specific.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperConfig {
    pub src_embed: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_embed: usize,
    pub dec_hidden: usize,
    /// Stacked decoder depth (1 or 2); the top layer feeds attention queries
    /// and the vocabulary projection.
    #[serde(default = "default_dec_layers")]
    pub dec_layers: usize,
    pub att_dim: usize,
    /// Softmax temperature of every attention layer (1 = sharp; 10 smooths
    /// alignments for word discovery).
    pub att_temperature: f64,
    pub speech: SpeechEncoderConfig,
}

fn default_dec_layers() -> usize {
    1
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            src_embed: 32,
            enc_hidden: 64,
            enc_layers: 1,
            dec_embed: 64,
            dec_hidden: 64,
            dec_layers: 1,
            att_dim: 64,
            att_temperature: 1.0,
            speech: SpeechEncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Encoder {
    Text(TextEncoder),
    Speech(SpeechEncoder),
}

impl Encoder {
    fn output_dim(&self) -> usize {
        match self {
            Encoder::Text(e) => e.output_dim(),
            Encoder::Speech(e) => e.output_dim(),
        }
    }
}

/// One decoder with its attentions and output projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Decoder {
    embed: EmbeddingTable,
    /// Stacked LSTM layers; layer k+1 consumes layer k's hidden state.
    cells: Vec<LstmCell>,
    /// Attention over encoder states H.
    att_enc: Option<AttentionLayer>,
    /// Attention over the first decoder's output states S1.
    att_dec1: Option<AttentionLayer>,
    proj: VocabProjection,
    ctx_dim: usize,
}

/// A prepared training example: encoded source, targets ending in EOS.
#[derive(Debug, Clone)]
pub struct Triple {
    pub src: SourceData,
    pub y1: Vec<u32>,
    pub y2: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub enum SourceData {
    Tokens(Vec<u32>),
    Features(Tensor),
}

impl SourceData {
    pub fn len(&self) -> usize {
        match self {
            SourceData::Tokens(t) => t.len(),
            SourceData::Features(f) => f.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a forward pass produces; attention matrices stay on the tape so
/// regularizers can differentiate through them.
pub struct ForwardOutput {
    pub logp1: Var,
    pub logp2: Option<Var>,
    pub a1: Var,
    pub a2: Option<Var>,
    pub a12: Option<Var>,
    /// First decoder output states, one per target-1 step.
    pub s1_states: Vec<Var>,
}

impl ForwardOutput {
    pub fn a1_matrix(&self, tape: &Tape) -> AttentionMatrix {
        AttentionMatrix::from_tensor(tape.value(self.a1)).expect("a1 is 2-D")
    }

    pub fn a2_matrix(&self, tape: &Tape) -> Option<AttentionMatrix> {
        self.a2
            .map(|v| AttentionMatrix::from_tensor(tape.value(v)).expect("a2 is 2-D"))
    }

    pub fn a12_matrix(&self, tape: &Tape) -> Option<AttentionMatrix> {
        self.a12
            .map(|v| AttentionMatrix::from_tensor(tape.value(v)).expect("a12 is 2-D"))
    }
}

/// Dropout context for training-time forward passes.
pub struct DropoutCtx<'r> {
    pub prob: f64,
    pub rng: &'r mut StdRng,
}

/// The tied multitask model: encoder, decoders, attentions, vocabularies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub arch: ArchitectureConfig,
    pub score_cfg: ScoreConfig,
    pub regularizer: Regularizer,
    pub hyper: HyperConfig,
    pub kind: CorpusKind,
    pub src_vocab: Option<Vocabulary>,
    pub y1_vocab: Vocabulary,
    pub y2_vocab: Option<Vocabulary>,
    pub params: ParamStore,
    encoder: Encoder,
    dec1: Decoder,
    dec2: Option<Decoder>,
}

impl Model {
    /// Build a model with seeded Glorot initialization. The parameter draw
    /// order is encoder, first decoder, second decoder, so architectures that
    /// share a prefix initialize that prefix identically for a given seed.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: ArchitectureConfig,
        score_cfg: ScoreConfig,
        regularizer: Regularizer,
        hyper: HyperConfig,
        kind: CorpusKind,
        src_vocab: Option<Vocabulary>,
        y1_vocab: Vocabulary,
        y2_vocab: Option<Vocabulary>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        score_cfg.validate()?;
        validate_regularizer(regularizer, &arch)?;
        if kind == CorpusKind::Text && src_vocab.is_none() {
            return Err(Error::config("text models need a source vocabulary"));
        }
        if arch.kind.has_second_decoder() && !arch.reconstruction && y2_vocab.is_none() {
            return Err(Error::config(
                "two-target architectures need a second target vocabulary",
            ));
        }
        if arch.reconstruction && kind != CorpusKind::Text {
            return Err(Error::config(
                "reconstruction requires a text source (the second target is the input)",
            ));
        }

        let mut params = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(seed);

        let encoder = match kind {
            CorpusKind::Text => Encoder::Text(TextEncoder::new(
                &mut params,
                TextEncoderConfig {
                    vocab_size: src_vocab.as_ref().unwrap().size(),
                    embed_dim: hyper.src_embed,
                    hidden_size: hyper.enc_hidden,
                    layers: hyper.enc_layers,
                },
                &mut rng,
            )),
            CorpusKind::Speech => {
                Encoder::Speech(SpeechEncoder::new(&mut params, hyper.speech.clone(), &mut rng))
            }
        };
        let enc_dim = encoder.output_dim();

        let dec1 = build_decoder(
            &mut params,
            "dec1",
            y1_vocab.size(),
            &hyper,
            Some(enc_dim),
            None,
            &mut rng,
        );

        let dec2 = if arch.kind.has_second_decoder() {
            let vocab2_size = if arch.reconstruction {
                src_vocab.as_ref().unwrap().size()
            } else {
                y2_vocab.as_ref().unwrap().size()
            };
            let (enc_keys, s1_keys) = match arch.kind {
                ArchKind::Multitask => (Some(enc_dim), None),
                ArchKind::Cascade => (None, Some(hyper.dec_hidden)),
                ArchKind::Triangle => (Some(enc_dim), Some(hyper.dec_hidden)),
                ArchKind::Single => unreachable!(),
            };
            Some(build_decoder(
                &mut params,
                "dec2",
                vocab2_size,
                &hyper,
                enc_keys,
                s1_keys,
                &mut rng,
            ))
        } else {
            None
        };

        Ok(Model {
            arch,
            score_cfg,
            regularizer,
            hyper,
            kind,
            src_vocab,
            y1_vocab,
            y2_vocab,
            params,
            encoder,
            dec1,
            dec2,
        })
    }

    pub fn enc_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Vocabulary used by the second decoder (the source vocabulary when
    /// reconstructing).
    pub fn second_vocab(&self) -> Option<&Vocabulary> {
        if self.arch.reconstruction {
            self.src_vocab.as_ref()
        } else {
            self.y2_vocab.as_ref()
        }
    }

    /// Encode an utterance into id sequences. The text source gains a trailing
    /// EOS so that reconstruction targets line up with encoder states one to
    /// one; every target ends with EOS.
    pub fn prepare(&self, utt: &Utterance) -> Result<Triple> {
        let src = match (&utt.source, self.kind) {
            (Source::Text(toks), CorpusKind::Text) => {
                if toks.is_empty() {
                    return Err(Error::contract(format!(
                        "utterance {} has an empty source",
                        utt.id
                    )));
                }
                let vocab = self.src_vocab.as_ref().unwrap();
                let mut ids = vocab.encode(toks);
                ids.push(EOS_ID);
                SourceData::Tokens(ids)
            }
            (Source::Speech(frames), CorpusKind::Speech) => SourceData::Features(frames.clone()),
            _ => {
                return Err(Error::contract(format!(
                    "utterance {} source does not match model kind",
                    utt.id
                )))
            }
        };
        let mut y1 = self.y1_vocab.encode(&utt.target1);
        y1.push(EOS_ID);
        let y2 = if self.arch.kind.has_second_decoder() {
            if self.arch.reconstruction {
                match &src {
                    SourceData::Tokens(ids) => Some(ids.clone()),
                    SourceData::Features(_) => unreachable!("validated at construction"),
                }
            } else {
                let t2 = utt.target2.as_ref().ok_or_else(|| {
                    Error::contract(format!(
                        "utterance {} lacks the second target required by this architecture",
                        utt.id
                    ))
                })?;
                let vocab = self.y2_vocab.as_ref().unwrap();
                let mut ids = vocab.encode(t2);
                ids.push(EOS_ID);
                Some(ids)
            }
        } else {
            None
        };
        Ok(Triple { src, y1, y2 })
    }

    /// Encode the source side into attention keys (one state per position).
    pub fn encode_source(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        src: &SourceData,
        mut dropout: Option<&mut DropoutCtx>,
    ) -> Result<Vec<Var>> {
        match (&self.encoder, src) {
            (Encoder::Text(enc), SourceData::Tokens(toks)) => {
                let d = dropout.as_deref_mut().map(|d| (d.prob, &mut *d.rng));
                enc.encode(tape, bound, toks, d)
            }
            (Encoder::Speech(enc), SourceData::Features(frames)) => {
                let d = dropout.map(|d| (d.prob, &mut *d.rng));
                enc.encode(tape, bound, frames, d)
            }
            _ => Err(Error::contract("source does not match encoder kind")),
        }
    }

    /// Teacher-forced forward pass. Dispatches on the configured architecture
    /// and captures every attention matrix the architecture defines.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        triple: &Triple,
        mut dropout: Option<&mut DropoutCtx>,
        temp_override: Option<f64>,
    ) -> Result<ForwardOutput> {
        if triple.src.is_empty() {
            return Err(Error::contract("forward requires a nonempty source"));
        }
        if triple.y1.is_empty() {
            return Err(Error::contract("forward requires a nonempty Y1"));
        }
        let enc_states = self.encode_source(tape, bound, &triple.src, dropout.as_deref_mut())?;
        let enc_keys = tape.stack_rows(&enc_states)?;

        let u1 = unroll_teacher(
            tape,
            bound,
            &self.dec1,
            Some(enc_keys),
            None,
            &triple.y1,
            dropout.as_deref_mut(),
            temp_override,
        )?;
        let a1 = tape.stack_rows(&u1.rows_enc)?;

        let Some(dec2) = &self.dec2 else {
            return Ok(ForwardOutput {
                logp1: u1.logp,
                logp2: None,
                a1,
                a2: None,
                a12: None,
                s1_states: u1.states,
            });
        };
        let y2 = triple
            .y2
            .as_ref()
            .ok_or_else(|| Error::contract("architecture needs Y2 but none was prepared"))?;
        if y2.is_empty() {
            return Err(Error::contract("forward requires a nonempty Y2"));
        }

        let s1_keys = match self.arch.kind {
            ArchKind::Cascade | ArchKind::Triangle => Some(tape.stack_rows(&u1.states)?),
            _ => None,
        };
        let enc_keys2 = match self.arch.kind {
            ArchKind::Multitask | ArchKind::Triangle => Some(enc_keys),
            _ => None,
        };
        let u2 = unroll_teacher(
            tape,
            bound,
            dec2,
            enc_keys2,
            s1_keys,
            y2,
            dropout,
            temp_override,
        )?;
        let a2 = if u2.rows_enc.is_empty() {
            None
        } else {
            Some(tape.stack_rows(&u2.rows_enc)?)
        };
        let a12 = if u2.rows_s1.is_empty() {
            None
        } else {
            Some(tape.stack_rows(&u2.rows_s1)?)
        };
        Ok(ForwardOutput {
            logp1: u1.logp,
            logp2: Some(u2.logp),
            a1,
            a2,
            a12,
            s1_states: u1.states,
        })
    }

    /// The per-triple training objective (to be maximized): the joint score,
    /// minus the configured attention regularizer penalty.
    pub fn objective(&self, tape: &mut Tape, fwd: &ForwardOutput) -> Result<Var> {
        let score = match fwd.logp2 {
            Some(logp2) => score_triple(tape, fwd.logp1, logp2, &self.score_cfg)?,
            None => fwd.logp1,
        };
        match self.regularizer {
            Regularizer::None => Ok(score),
            Regularizer::Transitivity => {
                let a2 = fwd
                    .a2
                    .ok_or_else(|| Error::config("transitivity regularizer needs the A2 matrix"))?;
                let a12 = fwd
                    .a12
                    .ok_or_else(|| Error::config("transitivity regularizer needs the A12 matrix"))?;
                loss_transitivity(tape, score, fwd.a1, a2, a12, self.score_cfg.lambda_trans)
            }
            Regularizer::Invertibility => {
                let a12 = fwd
                    .a12
                    .ok_or_else(|| Error::config("invertibility regularizer needs the A12 matrix"))?;
                loss_invertibility(tape, score, fwd.a1, a12, self.score_cfg.lambda_inv)
            }
        }
    }

    // ---- inference -------------------------------------------------------

    /// Start an inference session over one source sequence: encodes it and
    /// exposes per-step decoding for beam search.
    pub fn start_inference(&self, src: &SourceData) -> Result<InferenceSession<'_>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let enc_states = self.encode_source(&mut tape, &bound, src, None)?;
        let enc_keys = tape.stack_rows(&enc_states)?;
        Ok(InferenceSession {
            model: self,
            tape,
            bound,
            enc_keys,
            src_len: src.len(),
        })
    }

    // ---- checkpoints -----------------------------------------------------

    /// Serialize to `path` via write-then-rename so a crash never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let envelope = CheckpointEnvelope {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string(&envelope)
            .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let envelope: CheckpointEnvelope = serde_json::from_str(&json)
            .map_err(|e| Error::Checkpoint(format!("{}: parse failed: {e}", path.display())))?;
        if envelope.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                envelope.version
            )));
        }
        let mut model = envelope.model;
        if let Some(v) = model.src_vocab.as_mut() {
            v.reindex();
        }
        model.y1_vocab.reindex();
        if let Some(v) = model.y2_vocab.as_mut() {
            v.reindex();
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointEnvelope {
    version: u32,
    model: Model,
}

pub fn validate_regularizer(reg: Regularizer, arch: &ArchitectureConfig) -> Result<()> {
    match reg {
        Regularizer::None => Ok(()),
        Regularizer::Transitivity => {
            if arch.kind != ArchKind::Triangle {
                Err(Error::config(
                    "the transitivity regularizer needs the triangle architecture (no A2 otherwise)",
                ))
            } else {
                Ok(())
            }
        }
        Regularizer::Invertibility => {
            if arch.kind != ArchKind::Cascade || !arch.reconstruction {
                Err(Error::config(
                    "the invertibility regularizer needs the reconstruction cascade",
                ))
            } else {
                Ok(())
            }
        }
    }
}

fn build_decoder(
    params: &mut ParamStore,
    prefix: &str,
    vocab_size: usize,
    hyper: &HyperConfig,
    enc_keys_dim: Option<usize>,
    s1_keys_dim: Option<usize>,
    rng: &mut StdRng,
) -> Decoder {
    let embed = EmbeddingTable::new(params, prefix, vocab_size, hyper.dec_embed, rng);
    let ctx_dim = s1_keys_dim.unwrap_or(0) + enc_keys_dim.unwrap_or(0);
    let mut cells = vec![LstmCell::new(
        params,
        &format!("{prefix}.cell"),
        ctx_dim + hyper.dec_embed,
        hyper.dec_hidden,
        rng,
    )];
    for layer in 1..hyper.dec_layers.max(1) {
        cells.push(LstmCell::new(
            params,
            &format!("{prefix}.cell{}", layer + 1),
            hyper.dec_hidden,
            hyper.dec_hidden,
            rng,
        ));
    }
    let att_enc = enc_keys_dim.map(|kd| {
        AttentionLayer::new(
            params,
            &format!("{prefix}.att_enc"),
            hyper.dec_hidden,
            kd,
            hyper.att_dim,
            hyper.att_temperature,
            rng,
        )
    });
    let att_dec1 = s1_keys_dim.map(|kd| {
        AttentionLayer::new(
            params,
            &format!("{prefix}.att_dec1"),
            hyper.dec_hidden,
            kd,
            hyper.att_dim,
            hyper.att_temperature,
            rng,
        )
    });
    let proj = VocabProjection::new(params, prefix, hyper.dec_hidden, vocab_size, rng);
    Decoder {
        embed,
        cells,
        att_enc,
        att_dec1,
        proj,
        ctx_dim,
    }
}

struct Unrolled {
    logp: Var,
    states: Vec<Var>,
    rows_enc: Vec<Var>,
    rows_s1: Vec<Var>,
}

struct StepVars {
    layers: Vec<(Var, Var)>,
    logprobs: Var,
    row_enc: Option<Var>,
    row_s1: Option<Var>,
}

impl StepVars {
    fn top_h(&self) -> Var {
        self.layers.last().expect("at least one layer").0
    }
}

/// One decoder step shared by teacher forcing and beam search. The context
/// is the concatenation [c12, c2] of whatever attentions the decoder owns, in
/// that order; stacked layers feed upward, the top layer queries attention
/// and the projection.
#[allow(clippy::too_many_arguments)]
fn decoder_step(
    tape: &mut Tape,
    bound: &Bound,
    dec: &Decoder,
    enc_keys: Option<Var>,
    s1_keys: Option<Var>,
    prev: &[(Var, Var)],
    prev_token: u32,
    mut dropout: Option<&mut DropoutCtx>,
    temp_override: Option<f64>,
) -> Result<StepVars> {
    let query = prev.last().expect("at least one layer").0;
    let mut ctx_parts = Vec::new();
    let mut row_s1 = None;
    let mut row_enc = None;
    if let (Some(att), Some(keys)) = (&dec.att_dec1, s1_keys) {
        let (cv, row) = att.attend(tape, bound, query, keys, temp_override)?;
        ctx_parts.push(cv);
        row_s1 = Some(row);
    }
    if let (Some(att), Some(keys)) = (&dec.att_enc, enc_keys) {
        let (cv, row) = att.attend(tape, bound, query, keys, temp_override)?;
        ctx_parts.push(cv);
        row_enc = Some(row);
    }
    let mut emb = dec.embed.lookup(tape, bound, prev_token)?;
    if let Some(d) = dropout.as_deref_mut() {
        emb = tape.dropout(emb, d.prob, d.rng)?;
    }
    let mut x_parts = ctx_parts;
    x_parts.push(emb);
    let mut x = tape.concat(&x_parts, 1)?;
    let mut layers = Vec::with_capacity(dec.cells.len());
    for (cell, &(h, c)) in dec.cells.iter().zip(prev) {
        let (nh, nc) = cell.step(tape, bound, h, c, x)?;
        layers.push((nh, nc));
        x = nh;
    }
    let mut proj_in = layers.last().expect("at least one layer").0;
    if let Some(d) = dropout {
        proj_in = tape.dropout(proj_in, d.prob, d.rng)?;
    }
    let logprobs = dec.proj.project(tape, bound, proj_in)?;
    Ok(StepVars {
        layers,
        logprobs,
        row_enc,
        row_s1,
    })
}

fn decoder_zero_state(tape: &mut Tape, dec: &Decoder) -> Vec<(Var, Var)> {
    dec.cells.iter().map(|c| c.zero_state(tape)).collect()
}

#[allow(clippy::too_many_arguments)]
fn unroll_teacher(
    tape: &mut Tape,
    bound: &Bound,
    dec: &Decoder,
    enc_keys: Option<Var>,
    s1_keys: Option<Var>,
    targets: &[u32],
    mut dropout: Option<&mut DropoutCtx>,
    temp_override: Option<f64>,
) -> Result<Unrolled> {
    let mut state = decoder_zero_state(tape, dec);
    let mut prev = BOS_ID;
    let mut nll_total: Option<Var> = None;
    let mut states = Vec::with_capacity(targets.len());
    let mut rows_enc = Vec::new();
    let mut rows_s1 = Vec::new();
    for &y in targets {
        let step = decoder_step(
            tape,
            bound,
            dec,
            enc_keys,
            s1_keys,
            &state,
            prev,
            dropout.as_deref_mut(),
            temp_override,
        )?;
        states.push(step.top_h());
        if let Some(r) = step.row_enc {
            rows_enc.push(r);
        }
        if let Some(r) = step.row_s1 {
            rows_s1.push(r);
        }
        let nll = tape.nll_pick(step.logprobs, y as usize)?;
        state = step.layers;
        nll_total = Some(match nll_total {
            Some(acc) => tape.add(acc, nll)?,
            None => nll,
        });
        prev = y;
    }
    let logp = tape.scale(nll_total.expect("targets nonempty"), -1.0);
    Ok(Unrolled {
        logp,
        states,
        rows_enc,
        rows_s1,
    })
}

/// Log-linear interpolation of the two decoders' log-probabilities:
/// lambda * logP1 + (1 - lambda) * logP2.
pub fn score_triple(tape: &mut Tape, logp1: Var, logp2: Var, cfg: &ScoreConfig) -> Result<Var> {
    let l1 = tape.value(logp1).scalar_value();
    let l2 = tape.value(logp2).scalar_value();
    if !l1.is_finite() || !l2.is_finite() {
        return Err(Error::Numeric(format!(
            "score_triple requires finite log-probabilities, got {l1} and {l2}"
        )));
    }
    let a = tape.scale(logp1, cfg.lambda);
    let b = tape.scale(logp2, 1.0 - cfg.lambda);
    tape.add(a, b)
}

/// Transitivity-regularized objective: score - w * ||A12 A1 - A2||_F^2.
pub fn loss_transitivity(
    tape: &mut Tape,
    score: Var,
    a1: Var,
    a2: Var,
    a12: Var,
    weight: f64,
) -> Result<Var> {
    let composed = tape.matmul(a12, a1)?;
    if tape.value(composed).shape() != tape.value(a2).shape() {
        return Err(Error::Shape {
            op: "loss_transitivity",
            lhs: tape.value(composed).shape().to_vec(),
            rhs: tape.value(a2).shape().to_vec(),
        });
    }
    let diff = tape.sub(composed, a2)?;
    let pen = tape.frobenius_norm_sq(diff)?;
    let weighted = tape.scale(pen, weight);
    tape.sub(score, weighted)
}

/// Invertibility-regularized objective: score - w * ||A1 A12 - I||_F^2.
pub fn loss_invertibility(
    tape: &mut Tape,
    score: Var,
    a1: Var,
    a12: Var,
    weight: f64,
) -> Result<Var> {
    let product = tape.matmul(a1, a12)?;
    let shape = tape.value(product).shape().to_vec();
    if shape[0] != shape[1] {
        return Err(Error::Shape {
            op: "loss_invertibility",
            lhs: shape.clone(),
            rhs: vec![shape[0], shape[0]],
        });
    }
    let eye = tape.leaf(Tensor::identity(shape[0]));
    let diff = tape.sub(product, eye)?;
    let pen = tape.frobenius_norm_sq(diff)?;
    let weighted = tape.scale(pen, weight);
    tape.sub(score, weighted)
}

// ---- inference session -----------------------------------------------------

/// Decoder state during beam search, one (h, c) pair per stacked layer.
#[derive(Debug, Clone)]
pub struct DecState {
    layers: Vec<(Var, Var)>,
}

/// Output of one inference decoder step.
pub struct InferStep {
    pub state: DecState,
    pub log_probs: Vec<f64>,
    /// Hidden state values, kept as the S1 trace for phase-2 attention.
    pub state_vec: Vec<f64>,
    /// Attention row over encoder states, if this decoder attends to them.
    pub row_enc: Option<Vec<f64>>,
    /// Attention row over first-decoder states, if applicable.
    pub row_s1: Option<Vec<f64>>,
}

/// Holds the tape of one utterance's inference; decoders grow it step by step.
pub struct InferenceSession<'m> {
    model: &'m Model,
    tape: Tape,
    bound: Bound,
    enc_keys: Var,
    src_len: usize,
}

impl<'m> InferenceSession<'m> {
    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn dec1_start(&mut self) -> DecState {
        DecState {
            layers: decoder_zero_state(&mut self.tape, &self.model.dec1),
        }
    }

    pub fn dec2_start(&mut self) -> Result<DecState> {
        let dec2 = self
            .model
            .dec2
            .as_ref()
            .ok_or_else(|| Error::contract("model has no second decoder"))?;
        Ok(DecState {
            layers: decoder_zero_state(&mut self.tape, dec2),
        })
    }

    pub fn dec1_step(&mut self, state: &DecState, prev_token: u32) -> Result<InferStep> {
        let step = decoder_step(
            &mut self.tape,
            &self.bound,
            &self.model.dec1,
            Some(self.enc_keys),
            None,
            &state.layers,
            prev_token,
            None,
            None,
        )?;
        Ok(self.to_infer_step(step))
    }

    /// Stack a phase-1 hypothesis' state trace into attention keys for the
    /// second decoder.
    pub fn make_s1_keys(&mut self, states: &[Vec<f64>]) -> Result<Var> {
        if states.is_empty() {
            return Err(Error::contract("empty S1 state trace"));
        }
        let dim = states[0].len();
        let data: Vec<f64> = states.iter().flatten().copied().collect();
        let t = Tensor::new(vec![states.len(), dim], data)?;
        Ok(self.tape.leaf(t))
    }

    pub fn dec2_step(
        &mut self,
        s1_keys: Option<Var>,
        state: &DecState,
        prev_token: u32,
    ) -> Result<InferStep> {
        let dec2 = self
            .model
            .dec2
            .as_ref()
            .ok_or_else(|| Error::contract("model has no second decoder"))?;
        let enc_keys = match self.model.arch.kind {
            ArchKind::Multitask | ArchKind::Triangle => Some(self.enc_keys),
            _ => None,
        };
        let step = decoder_step(
            &mut self.tape,
            &self.bound,
            dec2,
            enc_keys,
            s1_keys,
            &state.layers,
            prev_token,
            None,
            None,
        )?;
        Ok(self.to_infer_step(step))
    }

    fn to_infer_step(&self, step: StepVars) -> InferStep {
        let top = step.top_h();
        InferStep {
            state: DecState {
                layers: step.layers,
            },
            log_probs: self.tape.value(step.logprobs).data().to_vec(),
            state_vec: self.tape.value(top).data().to_vec(),
            row_enc: step.row_enc.map(|r| self.tape.value(r).data().to_vec()),
            row_s1: step.row_s1.map(|r| self.tape.value(r).data().to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn toy_vocab(symbols: &[&str]) -> Vocabulary {
        let lines: Vec<Vec<String>> = vec![symbols.iter().map(|s| s.to_string()).collect()];
        let refs: Vec<&[String]> = lines.iter().map(|l| l.as_slice()).collect();
        Vocabulary::build(refs)
    }

    fn tiny_hyper() -> HyperConfig {
        HyperConfig {
            src_embed: 3,
            enc_hidden: 4,
            enc_layers: 1,
            dec_embed: 3,
            dec_hidden: 4,
            dec_layers: 1,
            att_dim: 3,
            att_temperature: 1.0,
            speech: SpeechEncoderConfig {
                input_dim: 5,
                hidden1: 2,
                hidden2: 2,
                hidden3: 3,
                stride: 2,
            },
        }
    }

    fn text_model(kind: ArchKind, reconstruction: bool, seed: u64) -> Model {
        let src_vocab = toy_vocab(&["a", "b", "c"]);
        let y1_vocab = toy_vocab(&["x", "y"]);
        let y2_vocab = toy_vocab(&["p", "q", "r"]);
        Model::new(
            ArchitectureConfig {
                kind,
                reconstruction,
            },
            ScoreConfig::default(),
            Regularizer::None,
            tiny_hyper(),
            CorpusKind::Text,
            Some(src_vocab),
            y1_vocab,
            if kind.has_second_decoder() && !reconstruction {
                Some(y2_vocab)
            } else {
                None
            },
            seed,
        )
        .unwrap()
    }

    fn utt(src: &str, t1: &str, t2: Option<&str>) -> Utterance {
        let toks = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
        Utterance {
            id: "utt0".into(),
            source: Source::Text(toks(src)),
            target1: toks(t1),
            target2: t2.map(toks),
        }
    }

    fn zero_params(model: &mut Model) {
        for i in 0..model.params.len() {
            for v in model.params.get_mut(ParamId(i)).data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn zero_weight_single_task_is_uniform() {
        let mut model = text_model(ArchKind::Single, false, 3);
        zero_params(&mut model);
        let triple = model.prepare(&utt("a b", "x y", None)).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        let v = model.y1_vocab.size() as f64;
        let m1 = triple.y1.len() as f64;
        let expected = m1 * (1.0 / v).ln();
        let got = tape.value(out.logp1).scalar_value();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn log_probability_is_never_positive() {
        for seed in 0..5 {
            let model = text_model(ArchKind::Single, false, seed);
            let triple = model.prepare(&utt("a b c", "x y x", None)).unwrap();
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
            assert!(tape.value(out.logp1).scalar_value() <= 0.0);
        }
    }

    #[test]
    fn forward_single_matches_manual_unroll() {
        // Recompute a 2-token case step by step with plain f64 arithmetic.
        let model = text_model(ArchKind::Single, false, 17);
        let triple = model.prepare(&utt("a b", "x y", None)).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        let got = tape.value(out.logp1).scalar_value();

        let p = &model.params;
        let t = |name: &str| p.get(p.by_name(name).unwrap()).clone();
        let vecmat = |x: &[f64], w: &Tensor| -> Vec<f64> {
            let (r, c) = (w.rows(), w.cols());
            assert_eq!(x.len(), r);
            (0..c)
                .map(|j| (0..r).map(|i| x[i] * w.at(i, j)).sum())
                .collect()
        };
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        let lstm = |prefix: &str, x: &[f64], h: &[f64], cc: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut xh = x.to_vec();
            xh.extend_from_slice(h);
            let gate = |g: &str| -> Vec<f64> {
                let w = t(&format!("{prefix}.w_{g}"));
                let b = t(&format!("{prefix}.b_{g}"));
                add(&vecmat(&xh, &w), b.data())
            };
            let sig = |v: Vec<f64>| v.into_iter().map(crate::tensor::sigmoid).collect::<Vec<_>>();
            let th = |v: Vec<f64>| v.into_iter().map(f64::tanh).collect::<Vec<_>>();
            let i = sig(gate("i"));
            let f = sig(gate("f"));
            let o = sig(gate("o"));
            let g = th(gate("g"));
            let c_new: Vec<f64> = (0..i.len()).map(|k| f[k] * cc[k] + i[k] * g[k]).collect();
            let h_new: Vec<f64> = (0..i.len()).map(|k| o[k] * c_new[k].tanh()).collect();
            (h_new, c_new)
        };

        let SourceData::Tokens(src_ids) = &triple.src else {
            panic!()
        };
        let emb = t("enc.embed");
        let embs: Vec<Vec<f64>> = src_ids
            .iter()
            .map(|&id| (0..emb.cols()).map(|j| emb.at(id as usize, j)).collect())
            .collect();
        let hdim = 4;
        let (mut h, mut c) = (vec![0.0; hdim], vec![0.0; hdim]);
        let mut fwd = Vec::new();
        for e in &embs {
            let (nh, nc) = lstm("enc.fwd", e, &h, &c);
            h = nh;
            c = nc;
            fwd.push(h.clone());
        }
        let (mut h, mut c) = (vec![0.0; hdim], vec![0.0; hdim]);
        let mut bwd = vec![vec![]; embs.len()];
        for (i, e) in embs.iter().enumerate().rev() {
            let (nh, nc) = lstm("enc.bwd", e, &h, &c);
            h = nh;
            c = nc;
            bwd[i] = h.clone();
        }
        let keys: Vec<Vec<f64>> = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| {
                let mut v = f.clone();
                v.extend_from_slice(b);
                v
            })
            .collect();

        let attend = |q: &[f64]| -> Vec<f64> {
            let wq = t("dec1.att_enc.wq");
            let wk = t("dec1.att_enc.wk");
            let v = t("dec1.att_enc.v");
            let qp = vecmat(q, &wq);
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| {
                    let kp = vecmat(k, &wk);
                    let pre = add(&kp, &qp);
                    pre.iter()
                        .zip(0..v.rows())
                        .map(|(x, i)| x.tanh() * v.at(i, 0))
                        .sum()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let tot: f64 = exps.iter().sum();
            let w: Vec<f64> = exps.iter().map(|e| e / tot).collect();
            let mut ctx = vec![0.0; keys[0].len()];
            for (wn, k) in w.iter().zip(&keys) {
                for (ci, ki) in ctx.iter_mut().zip(k) {
                    *ci += wn * ki;
                }
            }
            ctx
        };

        let demb = t("dec1.embed");
        let dembed =
            |id: u32| -> Vec<f64> { (0..demb.cols()).map(|j| demb.at(id as usize, j)).collect() };
        let projw = t("dec1.proj_w");
        let projb = t("dec1.proj_b");
        let (mut h, mut c) = (vec![0.0; hdim], vec![0.0; hdim]);
        let mut prev = BOS_ID;
        let mut logp = 0.0;
        for &y in &triple.y1 {
            let ctx = attend(&h);
            let mut x = ctx.clone();
            x.extend(dembed(prev));
            let (nh, nc) = lstm("dec1.cell", &x, &h, &c);
            h = nh;
            c = nc;
            let logits = add(&vecmat(&h, &projw), projb.data());
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln() + mx;
            logp += logits[y as usize] - lse;
            prev = y;
        }
        assert!(
            (got - logp).abs() < 1e-10,
            "tape {got} vs manual unroll {logp}"
        );
    }

    #[test]
    fn multitask_with_tied_decoders_is_symmetric() {
        // same decoder params and Y1 = Y2 implies logP1 = logP2
        let src_vocab = toy_vocab(&["a", "b"]);
        let yv = toy_vocab(&["x", "y"]);
        let mut model = Model::new(
            ArchitectureConfig {
                kind: ArchKind::Multitask,
                reconstruction: false,
            },
            ScoreConfig::default(),
            Regularizer::None,
            tiny_hyper(),
            CorpusKind::Text,
            Some(src_vocab),
            yv.clone(),
            Some(yv),
            5,
        )
        .unwrap();
        // copy every dec1.* parameter into the matching dec2.* slot
        for i in 0..model.params.len() {
            let name = model.params.name(ParamId(i)).to_string();
            if let Some(rest) = name.strip_prefix("dec1") {
                let twin = format!("dec2{rest}");
                if let Some(dst) = model.params.by_name(&twin) {
                    let v = model.params.get(ParamId(i)).clone();
                    *model.params.get_mut(dst) = v;
                }
            }
        }
        let triple = model.prepare(&utt("a b a", "x y", Some("x y"))).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        let l1 = tape.value(out.logp1).scalar_value();
        let l2 = tape.value(out.logp2.unwrap()).scalar_value();
        assert!((l1 - l2).abs() < 1e-12, "{l1} vs {l2}");
    }

    #[test]
    fn multitask_encoder_gradient_is_sum_of_branch_gradients() {
        let model = text_model(ArchKind::Multitask, false, 11);
        let triple = model.prepare(&utt("a b", "x y", Some("p q"))).unwrap();

        let grad_of = |weight1: f64, weight2: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
            let s1 = tape.scale(out.logp1, weight1);
            let s2 = tape.scale(out.logp2.unwrap(), weight2);
            let obj = tape.add(s1, s2).unwrap();
            tape.backward(obj).unwrap();
            let id = model.params.by_name("enc.fwd.w_i").unwrap();
            tape.grad(bound.var(id)).unwrap().to_vec()
        };

        let both = grad_of(0.5, 0.5);
        let only1 = grad_of(0.5, 0.0);
        let only2 = grad_of(0.0, 0.5);
        let mut branch2_contributes = false;
        for ((b, o1), o2) in both.iter().zip(&only1).zip(&only2) {
            assert!((b - (o1 + o2)).abs() < 1e-10);
            if o2.abs() > 1e-12 {
                branch2_contributes = true;
            }
        }
        assert!(branch2_contributes, "second branch must reach the encoder");
    }

    #[test]
    fn cascade_second_decoder_ignores_encoder_states() {
        // with S1 fixed, perturbing H leaves logP2 unchanged
        let model = text_model(ArchKind::Cascade, false, 23);
        let triple = model.prepare(&utt("a b c", "x y", Some("p q"))).unwrap();

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        let logp2 = tape.value(out.logp2.unwrap()).scalar_value();
        let a12 = out.a12_matrix(&tape).unwrap();
        assert_eq!(a12.rows(), triple.y2.as_ref().unwrap().len());
        assert_eq!(a12.cols(), triple.y1.len());
        assert!(out.a2.is_none());

        // rerun dec2 on the same S1 trace; the session re-encodes H, which a
        // cascade's second decoder never touches
        let s1_vals: Vec<Vec<f64>> = out
            .s1_states
            .iter()
            .map(|v| tape.value(*v).data().to_vec())
            .collect();
        let mut session = model.start_inference(&triple.src).unwrap();
        let s1_keys = session.make_s1_keys(&s1_vals).unwrap();
        let mut state = session.dec2_start().unwrap();
        let mut prev = BOS_ID;
        let mut logp2_rerun = 0.0;
        for &y in triple.y2.as_ref().unwrap() {
            let step = session.dec2_step(Some(s1_keys), &state, prev).unwrap();
            logp2_rerun += step.log_probs[y as usize];
            state = step.state;
            prev = y;
        }
        assert!((logp2 - logp2_rerun).abs() < 1e-10);
    }

    #[test]
    fn reconstruction_a12_is_n_by_m1() {
        let model = text_model(ArchKind::Cascade, true, 29);
        let triple = model.prepare(&utt("a b c", "x y", None)).unwrap();
        let SourceData::Tokens(src) = &triple.src else {
            panic!()
        };
        assert_eq!(triple.y2.as_ref().unwrap(), src);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        let a12 = out.a12_matrix(&tape).unwrap();
        assert_eq!(a12.rows(), src.len()); // N rows (reconstruction: M2 = N)
        assert_eq!(a12.cols(), triple.y1.len()); // M1 cols
    }

    #[test]
    fn triangle_rows_are_stochastic_and_grads_reach_dec1() {
        let model = text_model(ArchKind::Triangle, false, 31);
        let triple = model.prepare(&utt("a b", "x y x", Some("p q"))).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        for m in [
            out.a2_matrix(&tape).unwrap(),
            out.a12_matrix(&tape).unwrap(),
        ] {
            for r in 0..m.rows() {
                let s: f64 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        // gradient of logP2 alone must flow into first-decoder parameters
        tape.backward(out.logp2.unwrap()).unwrap();
        let id = model.params.by_name("dec1.cell.w_i").unwrap();
        let g = tape.grad(bound.var(id)).unwrap();
        assert!(g.iter().any(|v| v.abs() > 1e-12));
    }

    #[test]
    fn triangle_with_zeroed_s1_rows_reduces_to_multitask() {
        let mut tri = text_model(ArchKind::Triangle, false, 37);
        let mut multi = text_model(ArchKind::Multitask, false, 37);
        let hyper = tiny_hyper();
        let ds = hyper.dec_hidden; // S1-side context width

        // zero the gate rows that consume the S1 context in the triangle
        for g in ["i", "f", "o", "g"] {
            let id = tri.params.by_name(&format!("dec2.cell.w_{g}")).unwrap();
            let t = tri.params.get_mut(id);
            let cols = t.cols();
            for r in 0..ds {
                for ccol in 0..cols {
                    t.data_mut()[r * cols + ccol] = 0.0;
                }
            }
        }
        // copy the remaining rows into the multitask decoder's gate weights
        for g in ["i", "f", "o", "g"] {
            let src_id = tri.params.by_name(&format!("dec2.cell.w_{g}")).unwrap();
            let src = tri.params.get(src_id).clone();
            let bsrc = tri.params.by_name(&format!("dec2.cell.b_{g}")).unwrap();
            let b = tri.params.get(bsrc).clone();
            let dst_id = multi.params.by_name(&format!("dec2.cell.w_{g}")).unwrap();
            let dst = multi.params.get_mut(dst_id);
            let cols = dst.cols();
            for r in 0..dst.rows() {
                for ccol in 0..cols {
                    dst.data_mut()[r * cols + ccol] = src.at(ds + r, ccol);
                }
            }
            let bdst = multi.params.by_name(&format!("dec2.cell.b_{g}")).unwrap();
            *multi.params.get_mut(bdst) = b;
        }
        // share everything else that both architectures have
        for i in 0..tri.params.len() {
            let name = tri.params.name(ParamId(i)).to_string();
            if name.starts_with("dec2.cell.") || name.starts_with("dec2.att_dec1.") {
                continue;
            }
            if let Some(dst) = multi.params.by_name(&name) {
                let v = tri.params.get(ParamId(i)).clone();
                *multi.params.get_mut(dst) = v;
            }
        }

        let utt0 = utt("a b c", "x y", Some("p q r"));
        let t_tri = tri.prepare(&utt0).unwrap();
        let t_multi = multi.prepare(&utt0).unwrap();
        let mut tape1 = Tape::new();
        let b1 = tri.params.bind(&mut tape1);
        let o1 = tri.forward(&mut tape1, &b1, &t_tri, None, None).unwrap();
        let mut tape2 = Tape::new();
        let b2 = multi.params.bind(&mut tape2);
        let o2 = multi.forward(&mut tape2, &b2, &t_multi, None, None).unwrap();
        let l1 = tape1.value(o1.logp2.unwrap()).scalar_value();
        let l2 = tape2.value(o2.logp2.unwrap()).scalar_value();
        assert!((l1 - l2).abs() < 1e-10, "{l1} vs {l2}");
    }

    #[test]
    fn score_triple_arithmetic() {
        let mut tape = Tape::new();
        let l1 = tape.leaf(Tensor::scalar(-2.0));
        let l2 = tape.leaf(Tensor::scalar(-4.0));
        let mk = |lambda: f64| ScoreConfig {
            lambda,
            ..ScoreConfig::default()
        };
        let s = score_triple(&mut tape, l1, l2, &mk(1.0)).unwrap();
        assert_eq!(tape.value(s).scalar_value(), -2.0);
        let s = score_triple(&mut tape, l1, l2, &mk(0.5)).unwrap();
        assert_eq!(tape.value(s).scalar_value(), -3.0);
        let s = score_triple(&mut tape, l1, l2, &mk(0.0)).unwrap();
        assert_eq!(tape.value(s).scalar_value(), -4.0);
    }

    #[test]
    fn transitivity_hand_cases() {
        let mut tape = Tape::new();
        let score = tape.leaf(Tensor::scalar(-1.5));
        // exact transitivity: A12 = I, A1 = A2
        let a1 = tape.leaf(Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]).unwrap());
        let a12 = tape.leaf(Tensor::identity(2));
        let obj = loss_transitivity(&mut tape, score, a1, a1, a12, 0.2).unwrap();
        assert!((tape.value(obj).scalar_value() - (-1.5)).abs() < 1e-12);

        // permutation case: penalty 4, objective = score - 0.8
        let a1 = tape.leaf(Tensor::identity(2));
        let a12 = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let a2 = tape.leaf(Tensor::identity(2));
        let obj = loss_transitivity(&mut tape, score, a1, a2, a12, 0.2).unwrap();
        assert!((tape.value(obj).scalar_value() - (-1.5 - 0.8)).abs() < 1e-12);
    }

    #[test]
    fn invertibility_hand_cases() {
        let mut tape = Tape::new();
        let score = tape.leaf(Tensor::scalar(0.0));
        // permutation and its transpose invert exactly
        let perm = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a1 = tape.leaf(perm.clone());
        let a12 = tape.leaf(perm.transposed());
        let obj = loss_invertibility(&mut tape, score, a1, a12, 0.2).unwrap();
        assert!(tape.value(obj).scalar_value().abs() < 1e-12);

        // identity vs swap: penalty 4 at weight 0.2 -> objective -0.8
        let a1 = tape.leaf(Tensor::identity(2));
        let a12 = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let obj = loss_invertibility(&mut tape, score, a1, a12, 0.2).unwrap();
        assert!((tape.value(obj).scalar_value() - (-0.8)).abs() < 1e-12);

        // uniform 2x2 matrices: product is uniform, penalty 1.0
        let u = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        let a1 = tape.leaf(u.clone());
        let a12 = tape.leaf(u);
        let obj = loss_invertibility(&mut tape, score, a1, a12, 1.0).unwrap();
        assert!((tape.value(obj).scalar_value() - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn regularizer_penalty_is_zero_iff_relation_holds() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(71);
        let stochastic = |rng: &mut StdRng, r: usize, c: usize| -> Tensor {
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                data.extend(raw.iter().map(|v| v / s));
            }
            Tensor::new(vec![r, c], data).unwrap()
        };
        for _ in 0..20 {
            let (m1, m2, n) = (3, 4, 5);
            let a1t = stochastic(&mut rng, m1, n);
            let a12t = stochastic(&mut rng, m2, m1);
            let mut tape = Tape::new();
            let zero = tape.leaf(Tensor::scalar(0.0));
            let a1 = tape.leaf(a1t.clone());
            let a12 = tape.leaf(a12t.clone());
            let composed = tape.matmul(a12, a1).unwrap();
            let a2_exact = tape.leaf(tape.value(composed).clone());
            let obj = loss_transitivity(&mut tape, zero, a1, a2_exact, a12, 1.0).unwrap();
            assert!(tape.value(obj).scalar_value().abs() < 1e-12);
            let mut perturbed = tape.value(composed).clone();
            perturbed.data_mut()[0] += 0.05;
            let a2_bad = tape.leaf(perturbed);
            let obj = loss_transitivity(&mut tape, zero, a1, a2_bad, a12, 1.0).unwrap();
            assert!(tape.value(obj).scalar_value() < -1e-6);
        }
    }

    #[test]
    fn transitivity_penalty_nonnegative_for_stochastic_inputs() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(73);
        for _ in 0..50 {
            let mk = |rng: &mut StdRng, r: usize, c: usize| {
                let mut data = Vec::new();
                for _ in 0..r {
                    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0) + 1e-6).collect();
                    let s: f64 = raw.iter().sum();
                    data.extend(raw.iter().map(|v| v / s));
                }
                Tensor::new(vec![r, c], data).unwrap()
            };
            let mut tape = Tape::new();
            let zero = tape.leaf(Tensor::scalar(0.0));
            let a1 = tape.leaf(mk(&mut rng, 2, 3));
            let a2 = tape.leaf(mk(&mut rng, 4, 3));
            let a12 = tape.leaf(mk(&mut rng, 4, 2));
            let obj = loss_transitivity(&mut tape, zero, a1, a2, a12, 1.0).unwrap();
            assert!(tape.value(obj).scalar_value() <= 0.0);
        }
    }

    #[test]
    fn regularizer_validation_rejects_bad_combinations() {
        assert!(validate_regularizer(
            Regularizer::Transitivity,
            &ArchitectureConfig {
                kind: ArchKind::Cascade,
                reconstruction: false
            }
        )
        .is_err());
        assert!(validate_regularizer(
            Regularizer::Invertibility,
            &ArchitectureConfig {
                kind: ArchKind::Triangle,
                reconstruction: false
            }
        )
        .is_err());
        assert!(validate_regularizer(
            Regularizer::Invertibility,
            &ArchitectureConfig {
                kind: ArchKind::Cascade,
                reconstruction: true
            }
        )
        .is_ok());
    }

    #[test]
    fn objective_with_zero_weight_equals_plain_score() {
        let mut model = text_model(ArchKind::Triangle, false, 41);
        model.regularizer = Regularizer::Transitivity;
        model.score_cfg.lambda_trans = 0.0;
        let triple = model.prepare(&utt("a b", "x y", Some("p q"))).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        let obj = model.objective(&mut tape, &out).unwrap();
        let plain =
            score_triple(&mut tape, out.logp1, out.logp2.unwrap(), &model.score_cfg).unwrap();
        assert!((tape.value(obj).scalar_value() - tape.value(plain).scalar_value()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trips_with_identical_outputs() {
        let dir = std::env::temp_dir().join(format!("triseq-ckpt-{}", std::process::id()));
        let _ = fs::create_dir_all(&dir);
        let path = dir.join("model.ckpt");
        let model = text_model(ArchKind::Triangle, false, 43);
        model.save(&path).unwrap();
        assert!(
            !path.with_extension("ckpt.tmp").exists(),
            "tmp must be renamed away"
        );
        let loaded = Model::load(&path).unwrap();

        let utt0 = utt("a b c", "x y", Some("p q"));
        let eval = |m: &Model| -> f64 {
            let triple = m.prepare(&utt0).unwrap();
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape);
            let out = m.forward(&mut tape, &bound, &triple, None, None).unwrap();
            let obj = m.objective(&mut tape, &out).unwrap();
            tape.value(obj).scalar_value()
        };
        assert_eq!(eval(&model), eval(&loaded));
    }

    #[test]
    fn stacked_decoder_gradients_match_finite_differences() {
        // depth-2 decoders: layer 2 consumes layer 1, top layer projects
        let src_vocab = toy_vocab(&["a", "b"]);
        let y1_vocab = toy_vocab(&["x", "y"]);
        let mut hyper = tiny_hyper();
        hyper.dec_layers = 2;
        let model = Model::new(
            ArchitectureConfig {
                kind: ArchKind::Single,
                reconstruction: false,
            },
            ScoreConfig::default(),
            Regularizer::None,
            hyper,
            CorpusKind::Text,
            Some(src_vocab),
            y1_vocab,
            None,
            53,
        )
        .unwrap();
        assert!(model.params.by_name("dec1.cell2.w_i").is_some());
        let triple = model.prepare(&utt("a b", "x y", None)).unwrap();

        let objective = |m: &Model| -> f64 {
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape);
            let out = m.forward(&mut tape, &bound, &triple, None, None).unwrap();
            tape.value(out.logp1).scalar_value()
        };
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        tape.backward(out.logp1).unwrap();
        let analytic = bound.grads(&tape, &model.params);

        let eps = 1e-5;
        let mut probe = model.clone();
        for (pi, grad) in analytic.iter().enumerate() {
            let id = ParamId(pi);
            for k in 0..grad.numel() {
                let orig = probe.params.get(id).data()[k];
                probe.params.get_mut(id).data_mut()[k] = orig + eps;
                let fp = objective(&probe);
                probe.params.get_mut(id).data_mut()[k] = orig - eps;
                let fm = objective(&probe);
                probe.params.get_mut(id).data_mut()[k] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = grad.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{}[{k}]: analytic {a} vs numeric {numeric}",
                    probe.params.name(id)
                );
            }
        }

        // inference path agrees with the teacher-forced log-probability
        let mut session = model.start_inference(&triple.src).unwrap();
        let mut state = session.dec1_start();
        let mut prev = BOS_ID;
        let mut logp = 0.0;
        for &y in &triple.y1 {
            let step = session.dec1_step(&state, prev).unwrap();
            logp += step.log_probs[y as usize];
            state = step.state;
            prev = y;
        }
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        assert!((logp - tape.value(out.logp1).scalar_value()).abs() < 1e-10);
    }

    #[test]
    fn speech_model_forward_has_downsampled_attention_width() {
        let y1_vocab = toy_vocab(&["x", "y"]);
        let model = Model::new(
            ArchitectureConfig {
                kind: ArchKind::Single,
                reconstruction: false,
            },
            ScoreConfig::default(),
            Regularizer::None,
            tiny_hyper(),
            CorpusKind::Speech,
            None,
            y1_vocab,
            None,
            47,
        )
        .unwrap();
        let frames = Tensor::new(vec![9, 5], (0..45).map(|i| (i as f64).sin()).collect()).unwrap();
        let utt0 = Utterance {
            id: "utt0".into(),
            source: Source::Speech(frames),
            target1: vec!["x".into(), "y".into()],
            target2: None,
        };
        let triple = model.prepare(&utt0).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &triple, None, None).unwrap();
        let a1 = out.a1_matrix(&tape);
        assert_eq!(a1.rows(), 3); // |y1| + EOS
        assert_eq!(a1.cols(), 3); // ceil(ceil(9/2)/2)
    }
}
