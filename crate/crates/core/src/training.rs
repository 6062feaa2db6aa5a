//! Optimization loop: Adam updates with gradient clipping, per-utterance
//! training, dev-set model selection, and checkpointing.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{DropoutCtx, Model, Triple};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Write `epoch<k>.ckpt` every this many epochs (0 = best/final only).
    pub checkpoint_every: usize,
    /// Attention-temperature override during forward passes, if any.
    pub temp_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0002,
            dropout: 0.2,
            epochs: 500,
            seed: 1,
            clip_norm: 5.0,
            checkpoint_every: 0,
            temp_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epoch count must be at least 1"));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment accumulators with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        let v = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam step. The gradient's global L2 norm is clipped to `clip_norm`
/// before the moment updates.
pub fn adam_update(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    clip_norm: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::contract(format!(
            "adam_update got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut sq_norm = 0.0;
    for g in grads {
        for &x in g.data() {
            if !x.is_finite() {
                return Err(Error::Numeric("NaN or infinite gradient".into()));
            }
            sq_norm += x * x;
        }
    }
    let norm = sq_norm.sqrt();
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(crate::params::ParamId(i)).data_mut();
        for k in 0..g.data().len() {
            let gk = g.data()[k] * scale;
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= lr * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_objective: f64,
    pub dev_objective: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// The dev-best model (the trained model itself is left at its final state).
    pub best: Model,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub log: Vec<EpochLog>,
    pub updates: usize,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the concatenated parts
    let mut h = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Mean negative score over a corpus with dropout off (the dev objective).
pub fn evaluate_dev(model: &Model, triples: &[Triple]) -> Result<f64> {
    let mut total = 0.0;
    for triple in triples {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, triple, None, None)?;
        let score = match fwd.logp2 {
            Some(logp2) => {
                let s = crate::model::score_triple(&mut tape, fwd.logp1, logp2, &model.score_cfg)?;
                tape.value(s).scalar_value()
            }
            None => tape.value(fwd.logp1).scalar_value(),
        };
        total -= score;
    }
    Ok(total / triples.len().max(1) as f64)
}

/// Train `model` in place with per-utterance Adam updates, evaluating dev
/// after each epoch and retaining the best-dev checkpoint.
pub fn train(
    model: &mut Model,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    cfg: &TrainConfig,
    outdir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::corpus("training split is empty"));
    }
    if dev_corpus.is_empty() {
        return Err(Error::corpus("dev split is empty"));
    }
    let train_triples: Vec<Triple> = train_corpus
        .utterances
        .iter()
        .map(|u| model.prepare(u))
        .collect::<Result<_>>()?;
    let dev_triples: Vec<Triple> = dev_corpus
        .utterances
        .iter()
        .map(|u| model.prepare(u))
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new(&model.params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut updates = 0;
    let mut log_file = match outdir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train.log");
            Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)
        }
        None => None,
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_triples.len()).collect();
        let mut shuffle_rng = StdRng::seed_from_u64(mix_seed(&[cfg.seed, 1, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for &idx in &order {
            let triple = &train_triples[idx];
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let mut drop_rng =
                StdRng::seed_from_u64(mix_seed(&[cfg.seed, 2, epoch as u64, idx as u64]));
            let mut dropout_ctx = DropoutCtx {
                prob: cfg.dropout,
                rng: &mut drop_rng,
            };
            let dropout = if cfg.dropout > 0.0 {
                Some(&mut dropout_ctx)
            } else {
                None
            };
            let with_ctx = |e: Error| {
                Error::Numeric(format!(
                    "{e} at utterance index {idx} (id {}) in epoch {epoch}",
                    train_corpus.utterances[idx].id
                ))
            };
            let fwd = model
                .forward(&mut tape, &bound, triple, dropout, cfg.temp_override)
                .map_err(with_ctx)?;
            let objective = model.objective(&mut tape, &fwd).map_err(with_ctx)?;
            let loss = tape.scale(objective, -1.0);
            let loss_val = tape.value(loss).scalar_value();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at utterance index {idx} (id {}) in epoch {epoch}",
                    train_corpus.utterances[idx].id
                )));
            }
            epoch_loss += loss_val;
            tape.backward(loss)?;
            let grads = bound.grads(&tape, &model.params);
            adam_update(&mut model.params, &grads, &mut adam, cfg.lr, cfg.clip_norm).map_err(
                |e| {
                    Error::Numeric(format!(
                        "{e} at utterance index {idx} (id {}) in epoch {epoch}",
                        train_corpus.utterances[idx].id
                    ))
                },
            )?;
            updates += 1;
        }

        let dev_objective = evaluate_dev(model, &dev_triples)?;
        let entry = EpochLog {
            epoch,
            train_objective: epoch_loss / train_triples.len() as f64,
            dev_objective,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(
                f,
                "{}\t{:.6}\t{:.6}\t{:.3}",
                entry.epoch, entry.train_objective, entry.dev_objective, entry.seconds
            )
            .map_err(|e| Error::io(outdir.unwrap().join("train.log"), e))?;
        }
        log.push(entry);

        let improved = match &best {
            None => true,
            Some((_, dev, _)) => dev_objective < *dev,
        };
        if improved {
            best = Some((epoch, dev_objective, model.clone()));
            if let Some(dir) = outdir {
                model.save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = outdir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                model.save(&dir.join(format!("epoch{epoch}.ckpt")))?;
            }
        }
    }

    let (best_epoch, best_dev, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_dev,
        log,
        updates,
    })
}
