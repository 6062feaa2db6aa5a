//! Browser demo bindings: train tiny models in the page, inspect their
//! attention matrices, explore two-phase decoding, and run word discovery
//! with adjustable smoothing. All entry points return JSON strings so the
//! page needs no generated type glue.

use serde::Serialize;
use std::cell::RefCell;
use wasm_bindgen::prelude::*;

use triseq::corpus::{Corpus, CorpusKind, Source, Utterance, Vocabulary};
use triseq::decoding::{
    two_phase_decode, BeamConfig, DecodeMode, ModelJointDecoder,
};
use triseq::evaluation::word_discovery_prf;
use triseq::model::{
    ArchKind, ArchitectureConfig, HyperConfig, Model, Regularizer, ScoreConfig,
};
use triseq::nn::SpeechEncoderConfig;
use triseq::synth::{rotation_task, wordseg_task, SynthExample};
use triseq::tensor::Tape;
use triseq::training::{train, TrainConfig};
use triseq::worddisc::{discover, DiscoverOptions, Direction, Segmentation};

thread_local! {
    static TRAINED: RefCell<Option<DemoState>> = const { RefCell::new(None) };
}

struct DemoState {
    model: Model,
    arch: String,
    task: String,
    dev: Corpus,
    gold: Vec<Segmentation>,
}

fn corpus_from(examples: &[SynthExample], with_tgt2: bool, split: &str) -> Corpus {
    Corpus {
        split: split.to_string(),
        kind: CorpusKind::Text,
        utterances: examples
            .iter()
            .enumerate()
            .map(|(i, e)| Utterance {
                id: format!("utt{i:04}"),
                source: Source::Text(e.src.clone()),
                target1: e.tgt1.clone(),
                target2: if with_tgt2 { Some(e.tgt2.clone()) } else { None },
            })
            .collect(),
    }
}

fn demo_hyper(temp: f64) -> HyperConfig {
    HyperConfig {
        src_embed: 12,
        enc_hidden: 16,
        enc_layers: 1,
        dec_embed: 12,
        dec_hidden: 16,
        dec_layers: 1,
        att_dim: 12,
        att_temperature: temp,
        speech: SpeechEncoderConfig::default(),
    }
}

#[derive(Serialize)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
}

#[derive(Serialize)]
struct TrainReport {
    arch: String,
    epochs: usize,
    train_loss: Vec<f64>,
    dev_loss: Vec<f64>,
    penalty: Option<f64>,
    example_src: Vec<String>,
    example_tgt1: Vec<String>,
    example_tgt2: Option<Vec<String>>,
    a1: Option<Matrix>,
    a2: Option<Matrix>,
    a12: Option<Matrix>,
}

fn matrix_of(
    m: &triseq::attention::AttentionMatrix,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
) -> Matrix {
    Matrix {
        rows: m.rows(),
        cols: m.cols(),
        data: (0..m.rows()).flat_map(|r| m.row(r).to_vec()).collect(),
        row_labels,
        col_labels,
    }
}

fn with_eos(tokens: &[String]) -> Vec<String> {
    let mut v = tokens.to_vec();
    v.push("<eos>".into());
    v
}

fn err_json(e: impl std::fmt::Display) -> String {
    format!("{{\"error\":{}}}", serde_json::to_string(&e.to_string()).unwrap())
}

/// Train a small model on a synthetic task and return the loss curves plus
/// the attention matrices of one dev utterance.
///
/// `arch`: single | multitask | cascade | triangle;
/// `task`: rotate | wordseg (wordseg forces the reconstruction cascade);
/// `regularizer` weight of 0 disables the penalty.
#[wasm_bindgen]
pub fn demo_train(
    arch: &str,
    task: &str,
    epochs: u32,
    seed: u32,
    reg_weight: f64,
    temperature: f64,
) -> String {
    match demo_train_impl(arch, task, epochs as usize, seed as u64, reg_weight, temperature) {
        Ok(json) => json,
        Err(e) => err_json(e),
    }
}

fn demo_train_impl(
    arch: &str,
    task: &str,
    epochs: usize,
    seed: u64,
    reg_weight: f64,
    temperature: f64,
) -> triseq::Result<String> {
    let kind = ArchKind::parse(arch)?;
    let (train_examples, dev_examples, reconstruction) = match task {
        "rotate" => (rotation_task(seed, 160, 8), rotation_task(seed + 1, 30, 8), false),
        "wordseg" => (wordseg_task(seed, 160), wordseg_task(seed + 1, 30), true),
        other => return Err(triseq::Error::config(format!("unknown task: {other}"))),
    };
    let reconstruction = reconstruction && kind == ArchKind::Cascade;
    let with_tgt2 = kind.has_second_decoder() && !reconstruction;
    let train_set = corpus_from(&train_examples, with_tgt2, "train");
    let dev_set = corpus_from(&dev_examples, with_tgt2, "dev");

    let regularizer = if reg_weight > 0.0 {
        match kind {
            ArchKind::Triangle => Regularizer::Transitivity,
            ArchKind::Cascade if reconstruction => Regularizer::Invertibility,
            _ => Regularizer::None,
        }
    } else {
        Regularizer::None
    };
    let score = ScoreConfig {
        lambda: 0.5,
        lambda_trans: reg_weight,
        lambda_inv: reg_weight,
    };
    let src_vocab = Vocabulary::build(train_set.source_lines());
    let y1_vocab = Vocabulary::build(train_set.target1_lines());
    let y2_vocab = if with_tgt2 {
        Some(Vocabulary::build(train_set.target2_lines()))
    } else {
        None
    };
    let mut model = Model::new(
        ArchitectureConfig {
            kind,
            reconstruction,
        },
        score,
        regularizer,
        demo_hyper(temperature),
        CorpusKind::Text,
        Some(src_vocab),
        y1_vocab,
        y2_vocab,
        seed,
    )?;
    let cfg = TrainConfig {
        lr: 0.004,
        dropout: 0.0,
        epochs: epochs.clamp(1, 60),
        seed,
        ..Default::default()
    };
    let outcome = train(&mut model, &train_set, &dev_set, &cfg, None)?;
    let best = outcome.best;

    // attentions of the first dev utterance under teacher forcing
    let utt = &dev_set.utterances[0];
    let triple = best.prepare(utt)?;
    let mut tape = Tape::new();
    let bound = best.params.bind(&mut tape);
    let fwd = best.forward(&mut tape, &bound, &triple, None, None)?;
    let src_labels = with_eos(match &utt.source {
        Source::Text(t) => t,
        _ => unreachable!(),
    });
    let t1_labels = with_eos(&utt.target1);
    let t2_labels = if reconstruction {
        Some(src_labels.clone())
    } else {
        utt.target2.as_ref().map(|t| with_eos(t))
    };
    let a1 = Some(matrix_of(&fwd.a1_matrix(&tape), t1_labels.clone(), src_labels.clone()));
    let a2 = fwd
        .a2_matrix(&tape)
        .map(|m| matrix_of(&m, t2_labels.clone().unwrap_or_default(), src_labels.clone()));
    let a12 = fwd
        .a12_matrix(&tape)
        .map(|m| matrix_of(&m, t2_labels.clone().unwrap_or_default(), t1_labels.clone()));

    // mean transitivity penalty on dev, when the triangle captured both
    let penalty = if kind == ArchKind::Triangle {
        let mut total = 0.0;
        for utt in &dev_set.utterances {
            let triple = best.prepare(utt)?;
            let mut tape = Tape::new();
            let bound = best.params.bind(&mut tape);
            let fwd = best.forward(&mut tape, &bound, &triple, None, None)?;
            let a1 = fwd.a1_matrix(&tape);
            let a2 = fwd.a2_matrix(&tape).unwrap();
            let a12 = fwd.a12_matrix(&tape).unwrap();
            for i in 0..a12.rows() {
                for j in 0..a1.cols() {
                    let mut composed = 0.0;
                    for k in 0..a12.cols() {
                        composed += a12.at(i, k) * a1.at(k, j);
                    }
                    let d = composed - a2.at(i, j);
                    total += d * d;
                }
            }
        }
        Some(total / dev_set.len() as f64)
    } else {
        None
    };

    let report = TrainReport {
        arch: arch.to_string(),
        epochs: cfg.epochs,
        train_loss: outcome.log.iter().map(|e| e.train_objective).collect(),
        dev_loss: outcome.log.iter().map(|e| e.dev_objective).collect(),
        penalty,
        example_src: src_labels,
        example_tgt1: t1_labels,
        example_tgt2: t2_labels,
        a1,
        a2,
        a12,
    };
    let gold = dev_examples
        .iter()
        .map(|e| e.gold_segmentation())
        .collect::<triseq::Result<Vec<_>>>()
        .unwrap_or_default();
    let json = serde_json::to_string(&report)
        .map_err(|e| triseq::Error::config(format!("serialize: {e}")))?;
    TRAINED.with(|t| {
        *t.borrow_mut() = Some(DemoState {
            model: best,
            arch: arch.to_string(),
            task: task.to_string(),
            dev: dev_set,
            gold,
        })
    });
    Ok(json)
}

#[derive(Serialize)]
struct DecodeReport {
    src: Vec<String>,
    candidates: Vec<CandidateReport>,
    chosen: usize,
    mode: String,
}

#[derive(Serialize)]
struct CandidateReport {
    y1: Vec<String>,
    y1_score: f64,
    y2: Vec<String>,
    y2_score: f64,
    joint: f64,
}

/// Two-phase decode one dev utterance of the last-trained two-decoder model,
/// reporting every explored (Y1, Y2) pair and which one wins.
#[wasm_bindgen]
pub fn demo_decode(utterance: u32, beam: u32, alpha: f64, first_1best: bool) -> String {
    TRAINED.with(|t| {
        let state = t.borrow();
        let Some(state) = state.as_ref() else {
            return err_json("train a model first");
        };
        match demo_decode_impl(state, utterance as usize, beam as usize, alpha, first_1best) {
            Ok(json) => json,
            Err(e) => err_json(e),
        }
    })
}

fn demo_decode_impl(
    state: &DemoState,
    utterance: usize,
    beam: usize,
    alpha: f64,
    first_1best: bool,
) -> triseq::Result<String> {
    let model = &state.model;
    if !model.arch.kind.has_second_decoder() {
        return Err(triseq::Error::config(
            "two-phase decoding needs a two-decoder architecture (multitask, cascade, triangle)",
        ));
    }
    let utt = state
        .dev
        .utterances
        .get(utterance)
        .ok_or_else(|| triseq::Error::config("utterance index out of range"))?;
    let triple = model.prepare(utt)?;
    let cfg = BeamConfig {
        beam: beam.clamp(1, 8),
        alpha_len: alpha.clamp(0.0, 1.0),
        max_len: triple.src.len() * 3,
        mode: if first_1best {
            DecodeMode::First1Best
        } else {
            DecodeMode::Joint
        },
        raw_joint: false,
    };
    // run the phases by hand so every candidate can be reported
    let mut dec = ModelJointDecoder::new(model, &triple.src)?;
    use triseq::decoding::JointStepper;
    let phase1 = dec.phase1(&cfg)?;
    let n_cands = if first_1best { 1 } else { phase1.hyps.len() };
    let lambda = model.score_cfg.lambda;
    let mut candidates = Vec::new();
    let mut chosen = 0usize;
    let mut best_joint = f64::NEG_INFINITY;
    for (ci, cand) in phase1.hyps.iter().take(n_cands).enumerate() {
        let phase2 = dec.phase2(cand, &cfg)?;
        let top2 = phase2.best();
        let joint = lambda * cand.normalized + (1.0 - lambda) * top2.normalized;
        if joint > best_joint {
            best_joint = joint;
            chosen = ci;
        }
        candidates.push(CandidateReport {
            y1: model.y1_vocab.decode_clean(cand.surface_tokens()),
            y1_score: cand.normalized,
            y2: model
                .second_vocab()
                .map(|v| v.decode_clean(top2.surface_tokens()))
                .unwrap_or_default(),
            y2_score: top2.normalized,
            joint,
        });
    }
    // sanity: the library's own two-phase search agrees on the winning score
    let mut dec = ModelJointDecoder::new(model, &triple.src)?;
    let joint = two_phase_decode(&mut dec, &cfg, lambda)?;
    debug_assert!((joint.joint_score - best_joint).abs() < 1e-9);

    let report = DecodeReport {
        src: match &utt.source {
            Source::Text(tk) => tk.clone(),
            _ => unreachable!(),
        },
        candidates,
        chosen,
        mode: if first_1best { "first-1best" } else { "joint" }.into(),
    };
    serde_json::to_string(&report).map_err(|e| triseq::Error::config(format!("serialize: {e}")))
}

#[derive(Serialize)]
struct SegmentReport {
    utterances: Vec<SegmentLine>,
    token_f: f64,
    type_f: f64,
    smoothing: bool,
}

#[derive(Serialize)]
struct SegmentLine {
    hyp: String,
    gold: String,
}

/// Word discovery over the dev split of the last-trained model (single-task
/// base direction, or reconstruction with matrix combination).
#[wasm_bindgen]
pub fn demo_segment(smooth: bool, include_eos: bool, temp_override: f64) -> String {
    TRAINED.with(|t| {
        let state = t.borrow();
        let Some(state) = state.as_ref() else {
            return err_json("train a model first");
        };
        match demo_segment_impl(state, smooth, include_eos, temp_override) {
            Ok(json) => json,
            Err(e) => err_json(e),
        }
    })
}

fn demo_segment_impl(
    state: &DemoState,
    smooth: bool,
    include_eos: bool,
    temp_override: f64,
) -> triseq::Result<String> {
    if state.task != "wordseg" {
        return Err(triseq::Error::config(
            "word discovery needs the wordseg task (train with task=wordseg)",
        ));
    }
    let model = &state.model;
    let opts = DiscoverOptions {
        direction: Direction::Base,
        combine: model.arch.reconstruction,
        smooth,
        include_eos,
        temp_override: if temp_override > 0.0 {
            Some(temp_override)
        } else {
            None
        },
    };
    let segs = discover(model, &state.dev, &opts)?;
    let (tok, ty) = word_discovery_prf(&segs, &state.gold)?;
    let report = SegmentReport {
        utterances: segs
            .iter()
            .zip(&state.gold)
            .take(12)
            .map(|(h, g)| SegmentLine {
                hyp: h.to_line(),
                gold: g.to_line(),
            })
            .collect(),
        token_f: tok.f_score,
        type_f: ty.f_score,
        smoothing: smooth,
    };
    serde_json::to_string(&report).map_err(|e| triseq::Error::config(format!("serialize: {e}")))
}

/// Name of the architecture held in the demo slot, if any.
#[wasm_bindgen]
pub fn demo_status() -> String {
    TRAINED.with(|t| {
        t.borrow()
            .as_ref()
            .map(|s| s.arch.clone())
            .unwrap_or_else(|| "untrained".into())
    })
}
