//! Command-line experiment runner: train, decode, eval, worddisc,
//! inspect-attn, and the bundled synthetic-corpus generator.
//!
//! Every hyperparameter is exposed as a flag; a `key = value` config file can
//! fill in anything not given on the command line (flags win). The resolved
//! configuration of a training run is written to `<outdir>/run.conf`, which
//! can be fed back via `--config` to reproduce the run bit for bit.

use crate::corpus::{self, Corpus, CorpusKind, SplitPaths, Vocabulary};
use crate::decoding::{
    two_phase_decode, BeamConfig, DecodeMode, ModelJointDecoder, decode_single, default_max_len,
};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::model::{
    ArchKind, ArchitectureConfig, HyperConfig, Model, Regularizer, ScoreConfig,
};
use crate::nn::SpeechEncoderConfig;
use crate::synth;
use crate::training::{train, TrainConfig};
use crate::worddisc::{self, Direction, DiscoverOptions, Segmentation};
use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const OUTDIR_ENV: &str = "TRISEQ_OUTDIR";

#[derive(Parser, Debug)]
#[command(
    name = "triseq",
    version,
    about = "Tied multitask sequence-to-sequence toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model and keep the best-dev checkpoint.
    Train(TrainArgs),
    /// Beam-decode a corpus with a trained checkpoint.
    Decode(DecodeArgs),
    /// Score hypothesis files against references.
    Eval(EvalArgs),
    /// Discover word boundaries from attention matrices.
    Worddisc(WorddiscArgs),
    /// Dump attention matrices for gold-forced utterances.
    InspectAttn(InspectArgs),
    /// Generate a synthetic corpus with known structure.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ModelFlags {
    /// Config file with `key = value` lines merged under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus kind: text | speech.
    #[arg(long)]
    kind: Option<String>,
    /// Architecture: single | multitask | cascade | triangle.
    #[arg(long)]
    arch: Option<String>,
    /// Cascade reconstruction mode (second target = input).
    #[arg(long)]
    reconstruct: bool,
    /// Joint-score interpolation weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Transitivity regularizer weight (triangle only).
    #[arg(long)]
    trans_reg: Option<f64>,
    /// Invertibility regularizer weight (reconstruction only).
    #[arg(long)]
    inv_reg: Option<f64>,
    #[arg(long)]
    src_embed: Option<usize>,
    #[arg(long)]
    enc_hidden: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_embed: Option<usize>,
    #[arg(long)]
    dec_hidden: Option<usize>,
    #[arg(long)]
    att_dim: Option<usize>,
    /// Attention softmax temperature (10 smooths alignments for discovery).
    #[arg(long)]
    att_temp: Option<f64>,
    /// Stacked decoder depth (1 or 2).
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Speech feature dimension.
    #[arg(long)]
    feat_dim: Option<usize>,
    /// Speech encoder layer-1 hidden size.
    #[arg(long)]
    speech_h1: Option<usize>,
    /// Speech encoder layer-2 hidden size.
    #[arg(long)]
    speech_l2: Option<usize>,
    /// Speech encoder layer-3 hidden size.
    #[arg(long)]
    speech_l3: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    train_src: Option<PathBuf>,
    #[arg(long)]
    train_tgt1: Option<PathBuf>,
    #[arg(long)]
    train_tgt2: Option<PathBuf>,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt1: Option<PathBuf>,
    #[arg(long)]
    dev_tgt2: Option<PathBuf>,
    /// Cross-validation fold manifest (tab-separated paths per fold).
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient L2-norm clip threshold.
    #[arg(long)]
    clip: Option<f64>,
    /// Write epoch<k>.ckpt every k epochs (0 = best/final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Config file with `key = value` lines merged under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Source file (token lines, or feature-path lines for speech).
    #[arg(long)]
    src: Option<PathBuf>,
    /// Output file (tab-separated: id, Y1, Y2, joint score).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Length-normalization weight.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// joint | first-1best.
    #[arg(long)]
    mode: Option<String>,
    /// Interpolate raw log-probabilities instead of normalized scores.
    #[arg(long)]
    raw_joint: bool,
    /// Directory for per-utterance attention matrix dumps.
    #[arg(long)]
    dump_attn: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Metric: cer | bleu | prf | seqacc.
    #[arg(long)]
    metric: String,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Tokenization: split (whitespace) | chars | chars-nospace.
    #[arg(long, default_value = "split")]
    tokenize: String,
}

#[derive(Args, Debug)]
struct WorddiscArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Trained checkpoint; without it a model is trained first.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Unsegmented-symbol side of the discovery corpus.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Word side of the discovery corpus.
    #[arg(long)]
    tgt1: Option<PathBuf>,
    /// base | reverse (reverse trains/reads the swapped direction).
    #[arg(long)]
    direction: Option<String>,
    /// Combine A1 with (A12)^T (reconstruction checkpoints).
    #[arg(long)]
    combine: bool,
    /// Disable the neighbor-average smoothing step.
    #[arg(long)]
    no_smooth: bool,
    /// Include the EOS column in the argmax.
    #[arg(long)]
    include_eos: bool,
    /// Re-extract attentions under this softmax temperature.
    #[arg(long)]
    extract_temp: Option<f64>,
    /// Segmentation output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gold segmentation file; when given, a PRF report is printed.
    #[arg(long)]
    gold: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt1: PathBuf,
    #[arg(long)]
    tgt2: Option<PathBuf>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Comma-separated subset of a1,a2,a12 (default: all captured).
    #[arg(long)]
    which: Option<String>,
    /// Re-extract attentions under this softmax temperature.
    #[arg(long)]
    extract_temp: Option<f64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Task: rotate | wordseg.
    #[arg(long)]
    task: String,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    dev: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Maximum sequence length (rotation task).
    #[arg(long, default_value_t = 12)]
    max_len: usize,
}

/// Parsed `key = value` config file; `#` starts a comment.
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    map: HashMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { map })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("config key {key}: cannot parse value `{raw}`"))
            }),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

macro_rules! resolve {
    ($flag:expr, $cfg:expr, $key:literal, $default:expr) => {
        match $flag.clone() {
            Some(v) => v,
            None => $cfg.get($key)?.unwrap_or($default),
        }
    };
}

/// Everything a training run needs, resolved from flags + config + defaults.
#[derive(Debug, Clone)]
pub struct ResolvedTrain {
    pub kind: CorpusKind,
    pub arch: ArchitectureConfig,
    pub score: ScoreConfig,
    pub regularizer: Regularizer,
    pub hyper: HyperConfig,
    pub train_cfg: TrainConfig,
    pub train_paths: SplitPaths,
    pub dev_paths: SplitPaths,
    pub outdir: PathBuf,
}

fn resolve_kind(model: &ModelFlags, cfg: &ConfigFile) -> Result<CorpusKind> {
    let kind = resolve!(model.kind, cfg, "kind", "text".to_string());
    match kind.as_str() {
        "text" => Ok(CorpusKind::Text),
        "speech" => Ok(CorpusKind::Speech),
        other => Err(Error::config(format!("unknown corpus kind: {other}"))),
    }
}

fn resolve_model(model: &ModelFlags, cfg: &ConfigFile) -> Result<(ArchitectureConfig, ScoreConfig, Regularizer, HyperConfig, CorpusKind)> {
    let kind = resolve_kind(model, cfg)?;
    let arch_name = resolve!(model.arch, cfg, "arch", "single".to_string());
    let arch = ArchitectureConfig {
        kind: ArchKind::parse(&arch_name)?,
        reconstruction: model.reconstruct || cfg.get_bool("reconstruct")?,
    };
    let defaults = ScoreConfig::default();
    let trans_reg: Option<f64> = match model.trans_reg {
        Some(v) => Some(v),
        None => cfg.get("trans_reg")?,
    };
    let inv_reg: Option<f64> = match model.inv_reg {
        Some(v) => Some(v),
        None => cfg.get("inv_reg")?,
    };
    if trans_reg.is_some() && inv_reg.is_some() {
        return Err(Error::config(
            "trans_reg and inv_reg are mutually exclusive (different architectures)",
        ));
    }
    let regularizer = if trans_reg.is_some() {
        Regularizer::Transitivity
    } else if inv_reg.is_some() {
        Regularizer::Invertibility
    } else {
        Regularizer::None
    };
    let score = ScoreConfig {
        lambda: resolve!(model.lambda, cfg, "lambda", defaults.lambda),
        lambda_trans: trans_reg.unwrap_or(defaults.lambda_trans),
        lambda_inv: inv_reg.unwrap_or(defaults.lambda_inv),
    };
    let dh = HyperConfig::default();
    let ds = SpeechEncoderConfig::default();
    let hyper = HyperConfig {
        src_embed: resolve!(model.src_embed, cfg, "src_embed", dh.src_embed),
        enc_hidden: resolve!(model.enc_hidden, cfg, "enc_hidden", dh.enc_hidden),
        enc_layers: resolve!(model.enc_layers, cfg, "enc_layers", dh.enc_layers),
        dec_embed: resolve!(model.dec_embed, cfg, "dec_embed", dh.dec_embed),
        dec_hidden: resolve!(model.dec_hidden, cfg, "dec_hidden", dh.dec_hidden),
        dec_layers: resolve!(model.dec_layers, cfg, "dec_layers", dh.dec_layers),
        att_dim: resolve!(model.att_dim, cfg, "att_dim", dh.att_dim),
        att_temperature: resolve!(model.att_temp, cfg, "att_temp", dh.att_temperature),
        speech: SpeechEncoderConfig {
            input_dim: resolve!(model.feat_dim, cfg, "feat_dim", ds.input_dim),
            hidden1: resolve!(model.speech_h1, cfg, "speech_h1", ds.hidden1),
            hidden2: resolve!(model.speech_l2, cfg, "speech_l2", ds.hidden2),
            hidden3: resolve!(model.speech_l3, cfg, "speech_l3", ds.hidden3),
            stride: 2,
        },
    };
    crate::model::validate_regularizer(regularizer, &arch)?;
    arch.validate()?;
    score.validate()?;
    Ok((arch, score, regularizer, hyper, kind))
}

fn resolve_path(flag: &Option<PathBuf>, cfg: &ConfigFile, key: &str) -> Result<Option<PathBuf>> {
    match flag {
        Some(p) => Ok(Some(p.clone())),
        None => Ok(cfg.get::<String>(key)?.map(PathBuf::from)),
    }
}

fn require_path(flag: &Option<PathBuf>, cfg: &ConfigFile, key: &str) -> Result<PathBuf> {
    resolve_path(flag, cfg, key)?
        .ok_or_else(|| Error::config(format!("missing required path: --{}", key.replace('_', "-"))))
}

fn resolve_outdir(flag: &Option<PathBuf>, cfg: &ConfigFile) -> Result<PathBuf> {
    if let Ok(env) = std::env::var(OUTDIR_ENV) {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    require_path(flag, cfg, "outdir")
}

fn resolve_train(args: &TrainArgs) -> Result<ResolvedTrain> {
    let cfg = load_config(&args.model.config)?;
    let (arch, score, regularizer, hyper, kind) = resolve_model(&args.model, &cfg)?;
    let dt = TrainConfig::default();
    let train_cfg = TrainConfig {
        lr: resolve!(args.train.lr, cfg, "lr", dt.lr),
        dropout: resolve!(args.train.dropout, cfg, "dropout", dt.dropout),
        epochs: resolve!(args.train.epochs, cfg, "epochs", dt.epochs),
        seed: resolve!(args.train.seed, cfg, "seed", dt.seed),
        clip_norm: resolve!(args.train.clip, cfg, "clip", dt.clip_norm),
        checkpoint_every: resolve!(
            args.train.checkpoint_every,
            cfg,
            "checkpoint_every",
            dt.checkpoint_every
        ),
        temp_override: None,
    };
    train_cfg.validate()?;
    let needs_tgt2 = arch.kind.has_second_decoder() && !arch.reconstruction;
    let train_paths = SplitPaths {
        source: require_path(&args.train.train_src, &cfg, "train_src")?,
        target1: require_path(&args.train.train_tgt1, &cfg, "train_tgt1")?,
        target2: if needs_tgt2 {
            Some(require_path(&args.train.train_tgt2, &cfg, "train_tgt2")?)
        } else {
            resolve_path(&args.train.train_tgt2, &cfg, "train_tgt2")?
        },
    };
    let dev_paths = SplitPaths {
        source: require_path(&args.train.dev_src, &cfg, "dev_src")?,
        target1: require_path(&args.train.dev_tgt1, &cfg, "dev_tgt1")?,
        target2: if needs_tgt2 {
            Some(require_path(&args.train.dev_tgt2, &cfg, "dev_tgt2")?)
        } else {
            resolve_path(&args.train.dev_tgt2, &cfg, "dev_tgt2")?
        },
    };
    let outdir = resolve_outdir(&args.train.outdir, &cfg)?;
    Ok(ResolvedTrain {
        kind,
        arch,
        score,
        regularizer,
        hyper,
        train_cfg,
        train_paths,
        dev_paths,
        outdir,
    })
}

/// The resolved configuration as `key = value` lines; feeding this file back
/// through `--config` reproduces the run.
fn manifest_lines(r: &ResolvedTrain) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(&format!("{k} = {v}\n"));
    };
    push(
        "kind",
        match r.kind {
            CorpusKind::Text => "text".into(),
            CorpusKind::Speech => "speech".into(),
        },
    );
    push("arch", r.arch.kind.to_string());
    push("reconstruct", r.arch.reconstruction.to_string());
    push("lambda", r.score.lambda.to_string());
    match r.regularizer {
        Regularizer::Transitivity => push("trans_reg", r.score.lambda_trans.to_string()),
        Regularizer::Invertibility => push("inv_reg", r.score.lambda_inv.to_string()),
        Regularizer::None => {}
    }
    push("src_embed", r.hyper.src_embed.to_string());
    push("enc_hidden", r.hyper.enc_hidden.to_string());
    push("enc_layers", r.hyper.enc_layers.to_string());
    push("dec_embed", r.hyper.dec_embed.to_string());
    push("dec_hidden", r.hyper.dec_hidden.to_string());
    push("dec_layers", r.hyper.dec_layers.to_string());
    push("att_dim", r.hyper.att_dim.to_string());
    push("att_temp", r.hyper.att_temperature.to_string());
    push("feat_dim", r.hyper.speech.input_dim.to_string());
    push("speech_h1", r.hyper.speech.hidden1.to_string());
    push("speech_l2", r.hyper.speech.hidden2.to_string());
    push("speech_l3", r.hyper.speech.hidden3.to_string());
    push("lr", r.train_cfg.lr.to_string());
    push("dropout", r.train_cfg.dropout.to_string());
    push("epochs", r.train_cfg.epochs.to_string());
    push("seed", r.train_cfg.seed.to_string());
    push("clip", r.train_cfg.clip_norm.to_string());
    push("checkpoint_every", r.train_cfg.checkpoint_every.to_string());
    push("train_src", r.train_paths.source.display().to_string());
    push("train_tgt1", r.train_paths.target1.display().to_string());
    if let Some(p) = &r.train_paths.target2 {
        push("train_tgt2", p.display().to_string());
    }
    push("dev_src", r.dev_paths.source.display().to_string());
    push("dev_tgt1", r.dev_paths.target1.display().to_string());
    if let Some(p) = &r.dev_paths.target2 {
        push("dev_tgt2", p.display().to_string());
    }
    push("outdir", r.outdir.display().to_string());
    out
}

/// Build a model from a resolved configuration and its loaded corpora.
pub fn build_model(r: &ResolvedTrain, train_corpus: &Corpus) -> Result<Model> {
    let src_vocab = match r.kind {
        CorpusKind::Text => Some(Vocabulary::build(train_corpus.source_lines())),
        CorpusKind::Speech => None,
    };
    let y1_vocab = Vocabulary::build(train_corpus.target1_lines());
    let y2_vocab = if r.arch.kind.has_second_decoder() && !r.arch.reconstruction {
        Some(Vocabulary::build(train_corpus.target2_lines()))
    } else {
        None
    };
    Model::new(
        r.arch,
        r.score,
        r.regularizer,
        r.hyper.clone(),
        r.kind,
        src_vocab,
        y1_vocab,
        y2_vocab,
        r.train_cfg.seed,
    )
}

fn run_train_once(r: &ResolvedTrain, outdir: &Path) -> Result<Model> {
    let train_corpus = corpus::load_parallel("train", &r.train_paths, r.kind)?;
    let dev_corpus = corpus::load_parallel("dev", &r.dev_paths, r.kind)?;
    let mut model = build_model(r, &train_corpus)?;
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    fs::write(outdir.join("run.conf"), manifest_lines(r))
        .map_err(|e| Error::io(outdir.join("run.conf"), e))?;
    let outcome = train(&mut model, &train_corpus, &dev_corpus, &r.train_cfg, Some(outdir))?;
    println!(
        "trained {} epochs, best dev objective {:.6} at epoch {}",
        outcome.log.len(),
        outcome.best_dev,
        outcome.best_epoch
    );
    Ok(outcome.best)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    if let Some(folds_path) = &args.train.folds {
        return cmd_train_folds(args, folds_path);
    }
    let resolved = resolve_train(args)?;
    run_train_once(&resolved, &resolved.outdir)?;
    Ok(())
}

/// Fold manifest: one fold per line, tab-separated paths
/// train_src train_tgt1 [train_tgt2] dev_src dev_tgt1 [dev_tgt2] test_src test_tgt1 [test_tgt2]
/// (6 or 9 fields). Test outputs are decoded per fold and concatenated.
fn cmd_train_folds(args: &TrainArgs, folds_path: &Path) -> Result<()> {
    // per-fold paths come from the manifest; placeholders satisfy resolution
    let mut base_args = TrainArgs {
        model: args.model.clone(),
        train: args.train.clone(),
    };
    for slot in [
        &mut base_args.train.train_src,
        &mut base_args.train.train_tgt1,
        &mut base_args.train.train_tgt2,
        &mut base_args.train.dev_src,
        &mut base_args.train.dev_tgt1,
        &mut base_args.train.dev_tgt2,
    ] {
        if slot.is_none() {
            *slot = Some(PathBuf::from("-"));
        }
    }
    let base = resolve_train(&base_args)?;
    let text = fs::read_to_string(folds_path).map_err(|e| Error::io(folds_path, e))?;
    let mut all_decodes = String::new();
    let mut fold_count = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (with_tgt2, per_split) = match fields.len() {
            6 => (false, 2),
            9 => (true, 3),
            n => {
                return Err(Error::config(format!(
                    "fold manifest line {}: expected 6 or 9 tab-separated paths, got {n}",
                    lineno + 1
                )))
            }
        };
        let dir = folds_path.parent().unwrap_or(Path::new("."));
        let split = |i: usize| SplitPaths {
            source: dir.join(fields[i * per_split]),
            target1: dir.join(fields[i * per_split + 1]),
            target2: with_tgt2.then(|| dir.join(fields[i * per_split + 2])),
        };
        let mut fold = base.clone();
        fold.train_paths = split(0);
        fold.dev_paths = split(1);
        let test_paths = split(2);
        let fold_dir = base.outdir.join(format!("fold{fold_count}"));
        let model = run_train_once(&fold, &fold_dir)?;
        let test_corpus = corpus::load_parallel("test", &test_paths, fold.kind)?;
        let decoded = decode_corpus(&model, &test_corpus, &BeamConfig::default(), None)?;
        all_decodes.push_str(&decoded);
        fold_count += 1;
    }
    if fold_count == 0 {
        return Err(Error::config("fold manifest names no folds"));
    }
    let cat = base.outdir.join("test.cat.txt");
    fs::write(&cat, all_decodes).map_err(|e| Error::io(&cat, e))?;
    println!("decoded test concatenation of {fold_count} folds -> {}", cat.display());
    Ok(())
}

/// Decode every utterance of `corpus`, returning the tab-separated report.
fn decode_corpus(
    model: &Model,
    corpus: &Corpus,
    beam_cfg: &BeamConfig,
    dump_attn: Option<&Path>,
) -> Result<String> {
    let mut out = String::new();
    for utt in &corpus.utterances {
        let triple = model.prepare(utt)?;
        let src = triple.src;
        let mut cfg = *beam_cfg;
        if cfg.max_len == 0 {
            cfg.max_len = default_max_len(model, &src);
        }
        let line = if model.arch.kind.has_second_decoder() {
            let mut dec = ModelJointDecoder::new(model, &src)?;
            let joint = two_phase_decode(&mut dec, &cfg, model.score_cfg.lambda)?;
            if let Some(dir) = dump_attn {
                dump_attention(dir, &utt.id, "a1", &joint.y1.rows_enc)?;
                dump_attention(dir, &utt.id, "a2", &joint.y2.rows_enc)?;
                dump_attention(dir, &utt.id, "a12", &joint.y2.rows_s1)?;
            }
            let y1 = model.y1_vocab.decode_clean(joint.y1.surface_tokens());
            let y2 = model
                .second_vocab()
                .map(|v| v.decode_clean(joint.y2.surface_tokens()))
                .unwrap_or_default();
            format!(
                "{}\t{}\t{}\t{:.6}{}",
                utt.id,
                y1.join(" "),
                y2.join(" "),
                joint.joint_score,
                if joint.incomplete { "\t#incomplete" } else { "" }
            )
        } else {
            let result = decode_single(model, &src, &cfg)?;
            let best = result.best();
            if let Some(dir) = dump_attn {
                dump_attention(dir, &utt.id, "a1", &best.rows_enc)?;
            }
            let y1 = model.y1_vocab.decode_clean(best.surface_tokens());
            format!(
                "{}\t{}\t-\t{:.6}{}",
                utt.id,
                y1.join(" "),
                best.normalized,
                if result.incomplete { "\t#incomplete" } else { "" }
            )
        };
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

fn dump_attention(dir: &Path, utt_id: &str, name: &str, rows: &[Vec<f64>]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let matrix = crate::attention::AttentionMatrix::from_rows(rows)?;
    let path = dir.join(format!("{utt_id}.{name}.txt"));
    let mut buf = Vec::new();
    matrix
        .write_text(&mut buf)
        .map_err(|e| Error::io(&path, e))?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let ckpt = require_path(&args.ckpt, &cfg, "ckpt")?;
    let src = require_path(&args.src, &cfg, "src")?;
    let out_path = require_path(&args.out, &cfg, "out")?;
    let model = Model::load(&ckpt)?;
    let defaults = BeamConfig::default();
    let mode_name = resolve!(args.mode, cfg, "mode", "joint".to_string());
    let beam_cfg = BeamConfig {
        beam: resolve!(args.beam, cfg, "beam", defaults.beam),
        alpha_len: resolve!(args.alpha, cfg, "alpha", defaults.alpha_len),
        max_len: resolve!(args.max_len, cfg, "max_len", 0), // 0 = per-utterance default
        mode: DecodeMode::parse(&mode_name)?,
        raw_joint: args.raw_joint || cfg.get_bool("raw_joint")?,
    };
    // source-only corpus: reuse the loader with the source standing in for
    // the (unused) target column
    let corpus = corpus::load_parallel(
        "decode",
        &SplitPaths {
            source: src.clone(),
            target1: src,
            target2: None,
        },
        model.kind,
    )?;
    let report = decode_corpus(&model, &corpus, &beam_cfg, args.dump_attn.as_deref())?;
    fs::write(&out_path, report).map_err(|e| Error::io(&out_path, e))?;
    println!("decoded {} utterances -> {}", corpus.len(), out_path.display());
    Ok(())
}

fn tokenize_line(line: &str, mode: &str) -> Result<Vec<String>> {
    match mode {
        "split" => Ok(line
            .split_whitespace()
            .map(str::to_string)
            .collect()),
        "chars" => Ok(line.chars().map(|c| c.to_string()).collect()),
        "chars-nospace" => Ok(line
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect()),
        other => Err(Error::config(format!("unknown tokenize mode: {other}"))),
    }
}

fn read_tokenized(path: &Path, mode: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(|l| tokenize_line(l, mode)).collect()
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    match args.metric.as_str() {
        "cer" => {
            let hyps = read_tokenized(&args.hyp, &args.tokenize)?;
            let refs = read_tokenized(&args.reference, &args.tokenize)?;
            if hyps.len() != refs.len() {
                return Err(Error::contract(format!(
                    "hyp has {} lines, ref has {}",
                    hyps.len(),
                    refs.len()
                )));
            }
            let mut edits = 0.0;
            let mut total = 0.0;
            for (h, r) in hyps.iter().zip(&refs) {
                edits += evaluation::cer(h, r)? * r.len() as f64 / 100.0;
                total += r.len() as f64;
            }
            println!("cer\t{:.2}", 100.0 * edits / total);
        }
        "bleu" => {
            let hyps = read_tokenized(&args.hyp, &args.tokenize)?;
            let refs = read_tokenized(&args.reference, &args.tokenize)?;
            let bleu = evaluation::char_bleu(&hyps, &refs)?;
            println!("bleu\t{bleu:.2}");
        }
        "seqacc" => {
            let hyps = read_tokenized(&args.hyp, &args.tokenize)?;
            let refs = read_tokenized(&args.reference, &args.tokenize)?;
            let acc = evaluation::sequence_accuracy(&hyps, &refs)?;
            println!("seqacc\t{acc:.2}");
        }
        "prf" => {
            let hyp = read_segmentations(&args.hyp)?;
            let gold = read_segmentations(&args.reference)?;
            let (tok, ty) = evaluation::word_discovery_prf(&hyp, &gold)?;
            println!("token_precision\t{:.2}", tok.precision);
            println!("token_recall\t{:.2}", tok.recall);
            println!("token_f\t{:.2}", tok.f_score);
            println!("type_precision\t{:.2}", ty.precision);
            println!("type_recall\t{:.2}", ty.recall);
            println!("type_f\t{:.2}", ty.f_score);
        }
        other => return Err(Error::config(format!("unknown metric: {other}"))),
    }
    Ok(())
}

fn read_segmentations(path: &Path) -> Result<Vec<Segmentation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(Segmentation::from_line).collect()
}

fn cmd_worddisc(args: &WorddiscArgs) -> Result<()> {
    let cfg = load_config(&args.model.config)?;
    let direction_name = resolve!(args.direction, cfg, "direction", "base".to_string());
    let direction = Direction::parse(&direction_name)?;
    let src = require_path(&args.src, &cfg, "src")?;
    let tgt1 = require_path(&args.tgt1, &cfg, "tgt1")?;

    // in the reverse direction the model consumes the word side as its input
    let (model_src, model_tgt) = match direction {
        Direction::Base => (src.clone(), tgt1.clone()),
        Direction::Reverse => (tgt1.clone(), src.clone()),
    };

    let model = match &args.ckpt {
        Some(ckpt) => Model::load(ckpt)?,
        None => {
            // train from scratch on the discovery corpus
            let mut train_args = TrainArgs {
                model: args.model.clone(),
                train: args.train.clone(),
            };
            if args.combine || cfg.get_bool("combine")? {
                // reconstruction cascade, the A1 + (A12)^T recipe
                if train_args.model.arch.is_none() {
                    train_args.model.arch = Some("cascade".into());
                }
                train_args.model.reconstruct = true;
            } else if train_args.model.arch.is_none() {
                train_args.model.arch = Some("single".into());
            }
            if train_args.train.train_src.is_none() {
                train_args.train.train_src = Some(model_src.clone());
                train_args.train.train_tgt1 = Some(model_tgt.clone());
            }
            if train_args.train.dev_src.is_none() {
                train_args.train.dev_src = train_args.train.train_src.clone();
                train_args.train.dev_tgt1 = train_args.train.train_tgt1.clone();
            }
            let resolved = resolve_train(&train_args)?;
            run_train_once(&resolved, &resolved.outdir)?
        }
    };

    let corpus = corpus::load_parallel(
        "discover",
        &SplitPaths {
            source: model_src,
            target1: model_tgt,
            target2: None,
        },
        CorpusKind::Text,
    )?;
    let opts = DiscoverOptions {
        direction,
        combine: args.combine || cfg.get_bool("combine")?,
        smooth: !(args.no_smooth || cfg.get_bool("no_smooth")?),
        include_eos: args.include_eos || cfg.get_bool("include_eos")?,
        temp_override: match args.extract_temp {
            Some(t) => Some(t),
            None => cfg.get("extract_temp")?,
        },
    };
    worddisc::validate_discover_config(&model, &opts)?;
    let segmentations = worddisc::discover(&model, &corpus, &opts)?;

    let lines: String = segmentations
        .iter()
        .map(|s| s.to_line() + "\n")
        .collect();
    if let Some(out) = &args.out {
        fs::write(out, &lines).map_err(|e| Error::io(out, e))?;
        println!("wrote {} segmentations -> {}", segmentations.len(), out.display());
    } else {
        print!("{lines}");
    }

    if let Some(gold_path) = &args.gold {
        let gold = read_segmentations(gold_path)?;
        let (tok, ty) = evaluation::word_discovery_prf(&segmentations, &gold)?;
        println!("token_precision\t{:.2}", tok.precision);
        println!("token_recall\t{:.2}", tok.recall);
        println!("token_f\t{:.2}", tok.f_score);
        println!("type_precision\t{:.2}", ty.precision);
        println!("type_recall\t{:.2}", ty.recall);
        println!("type_f\t{:.2}", ty.f_score);
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let model = Model::load(&args.ckpt)?;
    let needs_tgt2 = model.arch.kind.has_second_decoder() && !model.arch.reconstruction;
    if needs_tgt2 && args.tgt2.is_none() {
        return Err(Error::config(
            "this checkpoint needs --tgt2 for gold-forced inspection",
        ));
    }
    let corpus = corpus::load_parallel(
        "inspect",
        &SplitPaths {
            source: args.src.clone(),
            target1: args.tgt1.clone(),
            target2: args.tgt2.clone(),
        },
        model.kind,
    )?;
    let which: Vec<String> = match &args.which {
        Some(w) => w.split(',').map(|s| s.trim().to_string()).collect(),
        None => vec!["a1".into(), "a2".into(), "a12".into()],
    };
    for w in &which {
        if !["a1", "a2", "a12"].contains(&w.as_str()) {
            return Err(Error::config(format!("unknown matrix name: {w}")));
        }
    }
    let outdir = match &args.outdir {
        Some(d) => d.clone(),
        None => std::env::var(OUTDIR_ENV)
            .map(PathBuf::from)
            .map_err(|_| Error::config("missing --outdir"))?,
    };
    fs::create_dir_all(&outdir).map_err(|e| Error::io(&outdir, e))?;
    let mut wrote = 0;
    for utt in &corpus.utterances {
        let triple = model.prepare(utt)?;
        let mut tape = crate::tensor::Tape::new();
        let bound = model.params.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &triple, None, args.extract_temp)?;
        let mut matrices = vec![("a1", Some(fwd.a1_matrix(&tape)))];
        matrices.push(("a2", fwd.a2_matrix(&tape)));
        matrices.push(("a12", fwd.a12_matrix(&tape)));
        for (name, matrix) in matrices {
            if !which.iter().any(|w| w == name) {
                continue;
            }
            let Some(m) = matrix else { continue };
            let path = outdir.join(format!("{}.{name}.txt", utt.id));
            let mut buf = Vec::new();
            m.write_text(&mut buf).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            wrote += 1;
        }
    }
    println!("wrote {wrote} matrices -> {}", outdir.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let outdir = match &args.outdir {
        Some(d) => d.clone(),
        None => std::env::var(OUTDIR_ENV)
            .map(PathBuf::from)
            .map_err(|_| Error::config("missing --outdir"))?,
    };
    let gen = |seed: u64, n: usize| -> Result<Vec<synth::SynthExample>> {
        match args.task.as_str() {
            "rotate" => Ok(synth::rotation_task(seed, n, args.max_len)),
            "wordseg" => Ok(synth::wordseg_task(seed, n)),
            other => Err(Error::config(format!("unknown synth task: {other}"))),
        }
    };
    synth::write_split(&outdir, "train", &gen(args.seed, args.train)?)?;
    synth::write_split(&outdir, "dev", &gen(args.seed.wrapping_add(1), args.dev)?)?;
    synth::write_split(&outdir, "test", &gen(args.seed.wrapping_add(2), args.test)?)?;
    println!(
        "wrote {} train / {} dev / {} test examples -> {}",
        args.train,
        args.dev,
        args.test,
        outdir.display()
    );
    Ok(())
}

/// Entry point: parse argv, dispatch, and map errors to exit codes
/// (0 success, 1 runtime failure, 2 usage/configuration error).
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own message; --help/--version are successes
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Worddisc(a) => cmd_worddisc(a),
        Cmd::InspectAttn(a) => cmd_inspect(a),
        Cmd::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("usage error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
