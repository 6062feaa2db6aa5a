//! Attention-based word discovery: turn alignment matrices into word
//! segmentations of unsegmented source text.

use crate::attention::AttentionMatrix;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{ArchKind, Model, Regularizer};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Soft alignment between source symbols (rows) and target words (columns).
#[derive(Debug, Clone)]
pub struct SoftAlignment {
    /// Rows = source symbols, columns = target words.
    pub matrix: Tensor,
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// Column of the target-side EOS step, excluded from argmax by default.
    pub eos_col: Option<usize>,
}

/// Word boundaries over a source symbol sequence: cut positions are
/// between-symbol indices, strictly increasing, in (0, len).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    symbols: Vec<String>,
    cuts: Vec<usize>,
}

impl Segmentation {
    pub fn new(symbols: Vec<String>, cuts: Vec<usize>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::contract("segmentation needs at least one symbol"));
        }
        for (i, &c) in cuts.iter().enumerate() {
            if c == 0 || c >= symbols.len() {
                return Err(Error::contract(format!(
                    "cut position {c} outside (0, {})",
                    symbols.len()
                )));
            }
            if i > 0 && cuts[i - 1] >= c {
                return Err(Error::contract("cut positions must strictly increase"));
            }
        }
        Ok(Segmentation { symbols, cuts })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn cuts(&self) -> &[usize] {
        &self.cuts
    }

    /// Word spans as half-open (start, end) pairs covering the sequence.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.cuts.len() + 1);
        let mut start = 0;
        for &c in &self.cuts {
            spans.push((start, c));
            start = c;
        }
        spans.push((start, self.symbols.len()));
        spans
    }

    pub fn words(&self) -> Vec<Vec<String>> {
        self.spans()
            .into_iter()
            .map(|(s, e)| self.symbols[s..e].to_vec())
            .collect()
    }

    /// One line: symbols with "|" inserted at cuts.
    pub fn to_line(&self) -> String {
        let mut parts = Vec::with_capacity(self.symbols.len() + self.cuts.len());
        let mut next_cut = 0;
        for (i, s) in self.symbols.iter().enumerate() {
            if next_cut < self.cuts.len() && self.cuts[next_cut] == i {
                parts.push("|".to_string());
                next_cut += 1;
            }
            parts.push(s.clone());
        }
        parts.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut cuts = Vec::new();
        for tok in line.split(' ').filter(|t| !t.is_empty()) {
            if tok == "|" {
                cuts.push(symbols.len());
            } else {
                symbols.push(tok.to_string());
            }
        }
        Segmentation::new(symbols, cuts)
    }
}

/// Combine the forward and reconstruction attentions of a reconstruction
/// model: A = A1 + (A12)^T, oriented so rows are source symbols. A1 is
/// M1 x N (target steps x source states), A12 is N x M1.
pub fn combine_matrices(a1: &AttentionMatrix, a12: &AttentionMatrix) -> Result<Tensor> {
    if a12.cols() != a1.rows() || a12.rows() != a1.cols() {
        return Err(Error::Shape {
            op: "combine_matrices",
            lhs: vec![a1.rows(), a1.cols()],
            rhs: vec![a12.rows(), a12.cols()],
        });
    }
    let (n, m1) = (a12.rows(), a12.cols());
    let mut out = Tensor::zeros(vec![n, m1]);
    for i in 0..n {
        for j in 0..m1 {
            out.data_mut()[i * m1 + j] = a1.at(j, i) + a12.at(i, j);
        }
    }
    Ok(out)
}

/// Neighbor-average each row with window 3; boundary cells average the two
/// available values, and single-column matrices pass through unchanged.
pub fn post_smooth(a: &Tensor) -> Tensor {
    let (rows, cols) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(vec![rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            let get = |j: usize| a.at(r, j);
            out.data_mut()[r * cols + c] = if cols == 1 {
                get(0)
            } else if c == 0 {
                (get(0) + get(1)) / 2.0
            } else if c == cols - 1 {
                (get(cols - 2) + get(cols - 1)) / 2.0
            } else {
                (get(c - 1) + get(c) + get(c + 1)) / 3.0
            };
        }
    }
    out
}

/// Assign each source symbol to its argmax target word (ties toward the
/// lower index) and cut wherever consecutive symbols change words.
pub fn project_boundaries(alignment: &SoftAlignment, include_eos: bool) -> Result<Segmentation> {
    let m = &alignment.matrix;
    let (rows, cols) = (m.rows(), m.cols());
    if rows != alignment.source.len() {
        return Err(Error::contract(format!(
            "alignment has {rows} rows for {} source symbols",
            alignment.source.len()
        )));
    }
    let mut assignment = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut best = None;
        let mut best_val = f64::NEG_INFINITY;
        for c in 0..cols {
            if !include_eos && alignment.eos_col == Some(c) {
                continue;
            }
            let v = m.at(r, c);
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite alignment weight at ({r}, {c})"
                )));
            }
            if v > best_val {
                best_val = v;
                best = Some(c);
            }
        }
        assignment.push(best.ok_or_else(|| Error::contract("alignment row has no columns"))?);
    }
    let mut cuts = Vec::new();
    for i in 1..rows {
        if assignment[i] != assignment[i - 1] {
            cuts.push(i);
        }
    }
    Segmentation::new(alignment.source.clone(), cuts)
}

/// Which attention matrices feed the segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Source-to-target model: transpose A1 so rows become source symbols.
    Base,
    /// Target-to-source model: decoder steps are the source symbols.
    Reverse,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Direction::Base),
            "reverse" => Ok(Direction::Reverse),
            other => Err(Error::config(format!("unknown direction: {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscoverOptions {
    pub direction: Direction,
    /// Combine A1 with (A12)^T (reconstruction checkpoints only).
    pub combine: bool,
    /// Apply the neighbor-average post-smoothing step.
    pub smooth: bool,
    /// Include the EOS target column in the argmax.
    pub include_eos: bool,
    /// Re-extract attentions under a different softmax temperature.
    pub temp_override: Option<f64>,
}

impl Default for DiscoverOptions {
    fn default() -> Self {
        DiscoverOptions {
            direction: Direction::Base,
            combine: false,
            smooth: true,
            include_eos: false,
            temp_override: None,
        }
    }
}

/// Build the soft alignment for one utterance from captured matrices.
///
/// The neighbor smoothing runs over each matrix's second index in its
/// as-computed orientation (base and reconstruction matrices come out as
/// target words x source symbols, the reverse direction as symbols x words);
/// only afterwards is the matrix oriented so rows are source symbols. The
/// source side's trailing EOS row is then dropped: in the base direction it
/// is the encoder's appended EOS state, in the reverse direction the
/// decoder's EOS step.
fn alignment_from_matrices(
    a1: &AttentionMatrix,
    a12: Option<&AttentionMatrix>,
    source_symbols: &[String],
    target_words: &[String],
    opts: &DiscoverOptions,
) -> Result<SoftAlignment> {
    // smoothing always runs in the as-computed orientation: first-decoder
    // steps as rows, encoder states as columns (the combined matrix comes
    // back encoder-major, so it flips once here)
    let as_computed: Tensor = if let Some(a12) = a12 {
        combine_matrices(a1, a12)?.transposed()
    } else {
        a1.to_tensor()
    };
    // the unsegmented side is the encoder in the base direction and the
    // first decoder in the reverse direction
    let needs_transpose = opts.direction == Direction::Base;
    let smoothed = if opts.smooth {
        post_smooth(&as_computed)
    } else {
        as_computed
    };
    let combined = if needs_transpose {
        smoothed.transposed()
    } else {
        smoothed
    };
    // rows now = source-symbol axis (+ its EOS row), cols = target words
    let (rows, cols) = (combined.rows(), combined.cols());
    if rows != source_symbols.len() + 1 {
        return Err(Error::contract(format!(
            "alignment has {rows} rows for {} source symbols (+1 EOS)",
            source_symbols.len()
        )));
    }
    let mut trimmed = Tensor::zeros(vec![rows - 1, cols]);
    for r in 0..rows - 1 {
        for c in 0..cols {
            trimmed.data_mut()[r * cols + c] = combined.at(r, c);
        }
    }
    // the EOS column exists where the target axis is a decoder (base and
    // reconstruction) or the encoder with its appended EOS state (reverse)
    let eos_col = Some(cols - 1);
    Ok(SoftAlignment {
        matrix: trimmed,
        source: source_symbols.to_vec(),
        target: target_words.to_vec(),
        eos_col,
    })
}

/// Run the trained model over a corpus under teacher forcing and project word
/// boundaries from its attention matrices.
pub fn discover(model: &Model, corpus: &Corpus, opts: &DiscoverOptions) -> Result<Vec<Segmentation>> {
    if opts.combine {
        if model.arch.kind != ArchKind::Cascade || !model.arch.reconstruction {
            return Err(Error::config(
                "matrix combination needs a reconstruction checkpoint (no A12 otherwise)",
            ));
        }
    } else if model.arch.kind != ArchKind::Single {
        return Err(Error::config(
            "plain word discovery expects a single-task checkpoint (use --combine for reconstruction)",
        ));
    }
    let mut out = Vec::with_capacity(corpus.len());
    for utt in &corpus.utterances {
        let triple = model.prepare(utt)?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &triple, None, opts.temp_override)?;
        let a1 = fwd.a1_matrix(&tape);
        let a12 = fwd.a12_matrix(&tape);

        let (source_symbols, target_words) = match opts.direction {
            Direction::Base => (
                match &utt.source {
                    crate::corpus::Source::Text(t) => t.clone(),
                    _ => {
                        return Err(Error::config(
                            "word discovery runs on text corpora (speech is out of scope)",
                        ))
                    }
                },
                utt.target1.clone(),
            ),
            Direction::Reverse => (
                utt.target1.clone(),
                match &utt.source {
                    crate::corpus::Source::Text(t) => t.clone(),
                    _ => {
                        return Err(Error::config(
                            "word discovery runs on text corpora (speech is out of scope)",
                        ))
                    }
                },
            ),
        };
        let alignment = alignment_from_matrices(
            &a1,
            if opts.combine { a12.as_ref() } else { None },
            &source_symbols,
            &target_words,
            opts,
        )?;
        out.push(project_boundaries(&alignment, opts.include_eos)?);
    }
    Ok(out)
}

/// The varieties of [`discover`] runs the experiments use, validated against
/// the checkpoint's architecture and regularizer.
pub fn validate_discover_config(model: &Model, opts: &DiscoverOptions) -> Result<()> {
    if opts.combine && model.regularizer == Regularizer::Transitivity {
        return Err(Error::config(
            "matrix combination pairs with the invertibility regularizer, not transitivity",
        ));
    }
    Ok(())
}
