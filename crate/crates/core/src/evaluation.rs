//! Scoring: character error rate, corpus-level character BLEU, and
//! token/type precision-recall-F for discovered segmentations.

use crate::error::{Error, Result};
use crate::worddisc::Segmentation;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// Precision/recall/F triple in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl Prf {
    /// F = 2PR / (P + R), 0 when both are 0.
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f_score,
        }
    }

    fn from_counts(matched: usize, hyp_total: usize, gold_total: usize) -> Self {
        let p = if hyp_total > 0 {
            100.0 * matched as f64 / hyp_total as f64
        } else {
            0.0
        };
        let r = if gold_total > 0 {
            100.0 * matched as f64 / gold_total as f64
        } else {
            0.0
        };
        Prf::from_pr(p, r)
    }
}

/// Character error rate: unit-cost edit distance over reference length, in
/// percent.
pub fn cer(hyp: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("cer requires a nonempty reference"));
    }
    Ok(100.0 * levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-level BLEU over symbol tokens: up to 4-grams, geometric mean,
/// brevity penalty, no smoothing. Returns a percentage.
pub fn char_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.is_empty() || refs.is_empty() {
        return Err(Error::contract("char_bleu requires a nonempty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "char_bleu got {} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(Error::contract("char_bleu references must be nonempty"));
    }
    const MAX_ORDER: usize = 4;
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=MAX_ORDER {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
            if rf.len() >= n {
                for gram in rf.windows(n) {
                    *ref_counts.entry(gram).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
            for gram in hyp.windows(n) {
                *hyp_counts.entry(gram).or_insert(0) += 1;
            }
            for (gram, count) in hyp_counts {
                total[n - 1] += count;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }
    let mut log_precision = 0.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0);
        }
        log_precision += (matched[n] as f64 / total[n] as f64).ln();
    }
    log_precision /= MAX_ORDER as f64;
    let brevity = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        return Ok(0.0);
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * log_precision.exp())
}

/// Discovered-word scoring at the token level (exact span match) and the
/// type level (distinct word strings).
pub fn word_discovery_prf(hyp: &[Segmentation], gold: &[Segmentation]) -> Result<(Prf, Prf)> {
    if hyp.len() != gold.len() {
        return Err(Error::contract(format!(
            "word_discovery_prf got {} hypothesis utterances for {} gold",
            hyp.len(),
            gold.len()
        )));
    }
    let mut matched_tokens = 0usize;
    let mut hyp_tokens = 0usize;
    let mut gold_tokens = 0usize;
    let mut hyp_types: HashSet<String> = HashSet::new();
    let mut gold_types: HashSet<String> = HashSet::new();
    for (h, g) in hyp.iter().zip(gold) {
        if h.symbols() != g.symbols() {
            return Err(Error::contract(format!(
                "segmentations disagree on the symbol sequence: {:?} vs {:?}",
                h.symbols(),
                g.symbols()
            )));
        }
        let hs: HashSet<(usize, usize)> = h.spans().into_iter().collect();
        let gs: HashSet<(usize, usize)> = g.spans().into_iter().collect();
        matched_tokens += hs.intersection(&gs).count();
        hyp_tokens += hs.len();
        gold_tokens += gs.len();
        hyp_types.extend(h.words().into_iter().map(|w| w.join(" ")));
        gold_types.extend(g.words().into_iter().map(|w| w.join(" ")));
    }
    let token = Prf::from_counts(matched_tokens, hyp_tokens, gold_tokens);
    let matched_types = hyp_types.intersection(&gold_types).count();
    let ty = Prf::from_counts(matched_types, hyp_types.len(), gold_types.len());
    Ok((token, ty))
}

/// Fraction of utterances decoded exactly (in percent).
pub fn sequence_accuracy(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "sequence_accuracy got {} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::contract("sequence_accuracy requires utterances"));
    }
    let exact = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(100.0 * exact as f64 / hyps.len() as f64)
}

/// 100 - corpus CER, clamped below at 0 (CER can exceed 100).
pub fn char_accuracy(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "char_accuracy got {} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut edits = 0usize;
    let mut ref_total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        if r.is_empty() {
            return Err(Error::contract("char_accuracy references must be nonempty"));
        }
        edits += levenshtein(h, r);
        ref_total += r.len();
    }
    Ok((100.0 * (1.0 - edits as f64 / ref_total as f64)).max(0.0))
}
