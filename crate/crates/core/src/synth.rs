//! Deterministic synthetic transduction tasks with known alignments and word
//! boundaries. The real corpora are not redistributable, so these generators
//! provide seed-fixed data for tests, the acceptance suite, and demos.

use crate::error::{Error, Result};
use crate::worddisc::Segmentation;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::fs;
use std::path::Path;

/// One generated example: space-joinable token sequences plus, for the
/// segmentation task, gold cut positions over the source symbols.
#[derive(Debug, Clone)]
pub struct SynthExample {
    pub src: Vec<String>,
    pub tgt1: Vec<String>,
    pub tgt2: Vec<String>,
    pub gold_cuts: Vec<usize>,
}

const ROTATION_ALPHABET: [&str; 10] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];

fn rotate(sym: &str, by: usize) -> String {
    let idx = ROTATION_ALPHABET.iter().position(|&s| s == sym).unwrap();
    ROTATION_ALPHABET[(idx + by) % ROTATION_ALPHABET.len()].to_string()
}

/// Symbol-rotation task: Y1 rotates each source symbol by one alphabet
/// position and Y2 by two, so the alignments are exactly diagonal and the
/// translation relation is perfectly transitive.
pub fn rotation_task(seed: u64, count: usize, max_len: usize) -> Vec<SynthExample> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            let src: Vec<String> = (0..len)
                .map(|_| ROTATION_ALPHABET[rng.gen_range(0..ROTATION_ALPHABET.len())].to_string())
                .collect();
            let tgt1 = src.iter().map(|s| rotate(s, 1)).collect();
            let tgt2 = src.iter().map(|s| rotate(s, 2)).collect();
            SynthExample {
                src,
                tgt1,
                tgt2,
                gold_cuts: Vec::new(),
            }
        })
        .collect()
}

/// Lexicon for the segmentation task: every word uses characters no other
/// word shares, so the character-to-word alignment is unambiguous.
const SEG_LEXICON: [(&str, &str); 6] = [
    ("w0", "a b"),
    ("w1", "c d e"),
    ("w2", "f g"),
    ("w3", "h i j"),
    ("w4", "k l"),
    ("w5", "m n o"),
];

/// Word-segmentation task: each sentence concatenates 2-4 lexicon words into
/// an unsegmented character sequence; the first target is the word-token
/// sequence and the gold cuts mark the word joins.
pub fn wordseg_task(seed: u64, count: usize) -> Vec<SynthExample> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n_words = rng.gen_range(2..=4);
            let mut src = Vec::new();
            let mut tgt1 = Vec::new();
            let mut gold_cuts = Vec::new();
            for k in 0..n_words {
                let (word, chars) = SEG_LEXICON[rng.gen_range(0..SEG_LEXICON.len())];
                if k > 0 {
                    gold_cuts.push(src.len());
                }
                src.extend(chars.split(' ').map(str::to_string));
                tgt1.push(word.to_string());
            }
            let tgt2 = src.clone();
            SynthExample {
                src,
                tgt1,
                tgt2,
                gold_cuts,
            }
        })
        .collect()
}

impl SynthExample {
    pub fn gold_segmentation(&self) -> Result<Segmentation> {
        Segmentation::new(self.src.clone(), self.gold_cuts.clone())
    }
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let body = lines.map(|l| l + "\n").collect::<String>();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Write one split (src/tgt1/tgt2 plus gold segmentations when present).
pub fn write_split(dir: &Path, split: &str, examples: &[SynthExample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_lines(
        &dir.join(format!("{split}.src")),
        examples.iter().map(|e| e.src.join(" ")),
    )?;
    write_lines(
        &dir.join(format!("{split}.tgt1")),
        examples.iter().map(|e| e.tgt1.join(" ")),
    )?;
    write_lines(
        &dir.join(format!("{split}.tgt2")),
        examples.iter().map(|e| e.tgt2.join(" ")),
    )?;
    if examples.iter().any(|e| !e.gold_cuts.is_empty()) {
        let golds: Result<Vec<String>> = examples
            .iter()
            .map(|e| e.gold_segmentation().map(|s| s.to_line()))
            .collect();
        write_lines(&dir.join(format!("{split}.gold")), golds?.into_iter())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_deterministic_and_bounded() {
        let a = rotation_task(42, 50, 12);
        let b = rotation_task(42, 50, 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.src, y.src);
            assert_eq!(x.tgt1, y.tgt1);
        }
        for e in &a {
            assert!(!e.src.is_empty() && e.src.len() <= 12);
            assert_eq!(e.src.len(), e.tgt1.len());
            // rot(rot(x, 1), 1) = rot(x, 2)
            for (s, (t1, t2)) in e.src.iter().zip(e.tgt1.iter().zip(&e.tgt2)) {
                assert_eq!(&rotate(s, 1), t1);
                assert_eq!(&rotate(t1, 1), t2);
            }
        }
    }

    #[test]
    fn wordseg_cuts_line_up_with_words() {
        let examples = wordseg_task(7, 40);
        for e in &examples {
            assert_eq!(e.gold_cuts.len() + 1, e.tgt1.len());
            let seg = e.gold_segmentation().unwrap();
            let words = seg.words();
            // each span spells out the lexicon entry for its word token
            for (word_tok, span) in e.tgt1.iter().zip(words) {
                let expected = SEG_LEXICON
                    .iter()
                    .find(|(w, _)| w == word_tok)
                    .unwrap()
                    .1;
                assert_eq!(span.join(" "), expected);
            }
        }
    }

    #[test]
    fn split_files_are_line_aligned() {
        let dir = std::env::temp_dir().join(format!("triseq-synth-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let examples = wordseg_task(3, 10);
        write_split(&dir, "train", &examples).unwrap();
        let src = fs::read_to_string(dir.join("train.src")).unwrap();
        let tgt = fs::read_to_string(dir.join("train.tgt1")).unwrap();
        let gold = fs::read_to_string(dir.join("train.gold")).unwrap();
        assert_eq!(src.lines().count(), 10);
        assert_eq!(tgt.lines().count(), 10);
        assert_eq!(gold.lines().count(), 10);
    }
}
