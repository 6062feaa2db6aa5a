//! Corpus ingestion, vocabulary construction, and the binary feature-file
//! format for precomputed acoustic frames.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Symbol <-> id map with reserved ids 0..4, built from the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from token sequences, keeping first-seen order for determinism.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        for line in lines {
            for tok in line {
                if !index.contains_key(tok) {
                    index.insert(tok.clone(), symbols.len() as u32);
                    symbols.push(tok.clone());
                }
            }
        }
        Vocabulary { symbols, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn encode_symbol(&self, sym: &str) -> u32 {
        self.index.get(sym).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, toks: &[String]) -> Vec<u32> {
        toks.iter().map(|t| self.encode_symbol(t)).collect()
    }

    pub fn decode_symbol(&self, id: u32) -> &str {
        self.symbols
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.decode_symbol(i).to_string()).collect()
    }

    /// Decode, dropping reserved symbols (used when printing hypotheses).
    pub fn decode_clean(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len() as u32)
            .map(|&i| self.decode_symbol(i).to_string())
            .collect()
    }
}

/// Source side of one utterance.
#[derive(Debug, Clone)]
pub enum Source {
    Text(Vec<String>),
    /// Feature matrix loaded from a feature file, N x dim.
    Speech(Tensor),
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub source: Source,
    pub target1: Vec<String>,
    pub target2: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusKind {
    Text,
    Speech,
}

/// One split of line-aligned parallel data.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub split: String,
    pub kind: CorpusKind,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Token lines of the text source side (speech corpora have none).
    pub fn source_lines(&self) -> Vec<&[String]> {
        self.utterances
            .iter()
            .filter_map(|u| match &u.source {
                Source::Text(t) => Some(t.as_slice()),
                Source::Speech(_) => None,
            })
            .collect()
    }

    pub fn target1_lines(&self) -> Vec<&[String]> {
        self.utterances.iter().map(|u| u.target1.as_slice()).collect()
    }

    pub fn target2_lines(&self) -> Vec<&[String]> {
        self.utterances
            .iter()
            .filter_map(|u| u.target2.as_deref())
            .collect()
    }
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect())
        .collect())
}

/// Paths making up one split. `target2` is optional; for speech corpora the
/// source file lists one feature-file path per line, resolved relative to the
/// listing file's directory.
#[derive(Debug, Clone)]
pub struct SplitPaths {
    pub source: PathBuf,
    pub target1: PathBuf,
    pub target2: Option<PathBuf>,
}

/// Load a line-aligned parallel corpus.
pub fn load_parallel(split: &str, paths: &SplitPaths, kind: CorpusKind) -> Result<Corpus> {
    let tgt1 = read_token_lines(&paths.target1)?;
    let tgt2 = match &paths.target2 {
        Some(p) => Some(read_token_lines(p)?),
        None => None,
    };
    let src_lines = read_token_lines(&paths.source)?;

    if let Some(t2) = &tgt2 {
        if t2.len() != tgt1.len() {
            return Err(Error::corpus(format!(
                "line count mismatch: {} has {} lines, {} has {}",
                paths.target1.display(),
                tgt1.len(),
                paths.target2.as_ref().unwrap().display(),
                t2.len()
            )));
        }
    }
    if src_lines.len() != tgt1.len() {
        return Err(Error::corpus(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            paths.source.display(),
            src_lines.len(),
            paths.target1.display(),
            tgt1.len()
        )));
    }

    let base = paths.source.parent().map(Path::to_path_buf).unwrap_or_default();
    let width = src_lines.len().to_string().len().max(4);
    let mut utterances = Vec::with_capacity(src_lines.len());
    for (i, src) in src_lines.into_iter().enumerate() {
        let source = match kind {
            CorpusKind::Text => Source::Text(src),
            CorpusKind::Speech => {
                if src.len() != 1 {
                    return Err(Error::corpus(format!(
                        "{} line {}: expected one feature-file path, got {} tokens",
                        paths.source.display(),
                        i + 1,
                        src.len()
                    )));
                }
                let p = base.join(&src[0]);
                Source::Speech(read_feature_file(&p)?)
            }
        };
        utterances.push(Utterance {
            id: format!("utt{:0width$}", i, width = width),
            source,
            target1: tgt1[i].clone(),
            target2: tgt2.as_ref().map(|t| t[i].clone()),
        });
    }
    Ok(Corpus {
        split: split.to_string(),
        kind,
        utterances,
    })
}

/// Build a vocabulary from one side of the training split.
pub fn build_vocab<'a>(lines: impl IntoIterator<Item = &'a [String]>) -> Vocabulary {
    Vocabulary::build(lines)
}

// ---- feature files --------------------------------------------------------

pub const FEATURE_MAGIC: &[u8; 4] = b"TSQF";
pub const FEATURE_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 20;

/// Write frames (N x dim, float32 payload, little-endian).
pub fn write_feature_file(path: &Path, frames: &Tensor) -> Result<()> {
    let n = frames.rows() as u32;
    let d = frames.cols() as u32;
    let mut buf = Vec::with_capacity(HEADER_LEN + frames.numel() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &v in frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a feature file, rejecting any payload whose size disagrees with the
/// header. Values are widened to float64.
pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::corpus(format!(
            "{}: truncated header, {} bytes at offset 0 (need {HEADER_LEN})",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::corpus(format!(
            "{}: bad magic at byte offset 0",
            path.display()
        )));
    }
    let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::corpus(format!(
            "{}: unsupported version {version} at byte offset 4",
            path.display()
        )));
    }
    let n = word(8) as usize;
    let d = word(12) as usize;
    let dtype = word(16);
    if dtype != DTYPE_F32 {
        return Err(Error::corpus(format!(
            "{}: unsupported dtype {dtype} at byte offset 16",
            path.display()
        )));
    }
    let expected = HEADER_LEN + n * d * 4;
    if bytes.len() != expected {
        return Err(Error::corpus(format!(
            "{}: payload size mismatch at byte offset {HEADER_LEN}: header implies {expected} bytes total, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let o = HEADER_LEN + i * 4;
        data.push(f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64);
    }
    Tensor::new(vec![n, d], data)
}
