//! Synthetic desk-scale tasks.
//!
//! The grounding task stands in for pointing benchmarks: the "image" is a
//! symbolic token grid with one marked cell, and the answer is a single-line
//! point string encoded in the synthetic vocabulary. The pure-text task is
//! tiny digit arithmetic with no visual span at all.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TokenLayout};
use crate::rng;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("sequence length {len} exceeds max_seq {max}")]
    Capacity { len: usize, max: usize },
    #[error("vocab size {vocab} too small, the synthetic vocabulary needs {need}")]
    VocabTooSmall { vocab: usize, need: usize },
    #[error("grid dimensions must be positive")]
    EmptyGrid,
    #[error(transparent)]
    Layout(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset line: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

/// Fixed synthetic vocabulary ids.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    /// System-prompt filler token; repeated to control the text length.
    pub const SYS: usize = 2;
    pub const QUERY_LOCATE: usize = 3;
    pub const QUERY_TARGET: usize = 4;
    pub const VISION_START: usize = 5;
    pub const VISION_END: usize = 6;
    pub const GRID_BG: usize = 7;
    pub const GRID_MARK: usize = 8;
    /// Opens the answer string ("point_2d:[").
    pub const POINT_PREFIX: usize = 9;
    pub const COMMA: usize = 10;
    pub const RBRACKET: usize = 11;
    pub const PLUS: usize = 12;
    pub const EQUALS: usize = 13;
    const DIGIT0: usize = 14;
    /// Smallest vocab that fits every synthetic id.
    pub const MIN_VOCAB: usize = DIGIT0 + 10;

    pub fn digit(d: usize) -> usize {
        debug_assert!(d < 10);
        DIGIT0 + d
    }

    pub fn digit_value(id: usize) -> Option<usize> {
        (DIGIT0..DIGIT0 + 10).contains(&id).then(|| id - DIGIT0)
    }
}

fn push_decimal(out: &mut Vec<usize>, value: usize) {
    let digits = format!("{value}");
    for ch in digits.chars() {
        out.push(vocab::digit(ch.to_digit(10).unwrap() as usize));
    }
}

/// Answer token string `point_2d:[x,y]` for a cell, with x = column and
/// y = row, each in decimal.
pub fn encode_point(row: usize, col: usize) -> Vec<usize> {
    let mut out = vec![vocab::POINT_PREFIX];
    push_decimal(&mut out, col);
    out.push(vocab::COMMA);
    push_decimal(&mut out, row);
    out.push(vocab::RBRACKET);
    out
}

/// Parses an answer token string back to `(x, y)`; `None` when malformed.
pub fn parse_point(tokens: &[usize]) -> Option<(usize, usize)> {
    let mut it = tokens.iter().copied();
    if it.next()? != vocab::POINT_PREFIX {
        return None;
    }
    let mut x = None;
    let mut y = None;
    let mut current = 0usize;
    let mut digits_seen = 0usize;
    let mut closed = false;
    for tok in it {
        if closed {
            return None;
        }
        if let Some(d) = vocab::digit_value(tok) {
            current = current.checked_mul(10)?.checked_add(d)?;
            digits_seen += 1;
        } else if tok == vocab::COMMA {
            if digits_seen == 0 || x.is_some() {
                return None;
            }
            x = Some(current);
            current = 0;
            digits_seen = 0;
        } else if tok == vocab::RBRACKET {
            if digits_seen == 0 || x.is_none() {
                return None;
            }
            y = Some(current);
            closed = true;
        } else {
            return None;
        }
    }
    if !closed {
        return None;
    }
    Some((x?, y?))
}

/// One grounding example: prompt followed by the answer span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingExample {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    pub layout: TokenLayout,
    /// (row, col) of the marked grid cell.
    pub target: (usize, usize),
    /// Binary mask over the visual tokens: 1 on the target cell.
    pub gt_mask: Vec<u8>,
}

impl GroundingExample {
    pub fn answer_range(&self) -> Range<usize> {
        self.prompt_len..self.tokens.len()
    }

    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }

    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

/// A pure-text example (digit addition); the layout has no visual span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextExample {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    pub layout: TokenLayout,
}

impl TextExample {
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }
}

/// Uniform view of an example for training and probing: full token sequence,
/// layout, and where the supervised answer span starts.
#[derive(Debug, Clone)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub layout: TokenLayout,
    pub answer_start: usize,
}

impl Sample {
    /// `(logits_row, target)` pairs: the token at position p is predicted
    /// from the logits row at p - 1.
    pub fn loss_pairs(&self) -> Vec<(usize, usize)> {
        (self.answer_start..self.tokens.len())
            .map(|p| (p - 1, self.tokens[p]))
            .collect()
    }
}

impl From<&GroundingExample> for Sample {
    fn from(ex: &GroundingExample) -> Sample {
        Sample {
            tokens: ex.tokens.clone(),
            layout: ex.layout.clone(),
            answer_start: ex.prompt_len,
        }
    }
}

impl From<&TextExample> for Sample {
    fn from(ex: &TextExample) -> Sample {
        Sample {
            tokens: ex.tokens.clone(),
            layout: ex.layout.clone(),
            answer_start: ex.prompt_len,
        }
    }
}

/// Text padding needed so input text : visual tokens is close to `ratio`.
/// The fixed prompt scaffolding (BOS, markers, query) counts as text.
pub fn text_pad_for_ratio(ratio: f64, t_v: usize) -> usize {
    let fixed = 5; // BOS + two markers + two query tokens
    let want = (ratio * t_v as f64).round() as i64 - fixed;
    want.max(0) as usize
}

/// Generates `n` grounding examples on a `grid = (rows, cols)` cell grid.
/// Reproducible from the seed; the marked cell is uniform over the grid.
pub fn gen_grounding(
    seed: u64,
    n: usize,
    grid: (usize, usize),
    text_pad: usize,
    vocab_size: usize,
    max_seq: usize,
) -> Result<Vec<GroundingExample>> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(TaskError::EmptyGrid);
    }
    if vocab_size < vocab::MIN_VOCAB {
        return Err(TaskError::VocabTooSmall {
            vocab: vocab_size,
            need: vocab::MIN_VOCAB,
        });
    }
    let mut rng = rng::stream(seed, "grounding");
    let cells = rows * cols;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = rng.random_range(0..cells);
        let (row, col) = (cell / cols, cell % cols);

        let mut tokens = Vec::new();
        tokens.push(vocab::BOS);
        tokens.extend(std::iter::repeat(vocab::SYS).take(text_pad));
        let start_marker = tokens.len();
        tokens.push(vocab::VISION_START);
        for c in 0..cells {
            tokens.push(if c == cell { vocab::GRID_MARK } else { vocab::GRID_BG });
        }
        let end_marker = tokens.len();
        tokens.push(vocab::VISION_END);
        tokens.push(vocab::QUERY_LOCATE);
        tokens.push(vocab::QUERY_TARGET);
        let prompt_len = tokens.len();
        tokens.extend(encode_point(row, col));

        if tokens.len() > max_seq {
            return Err(TaskError::Capacity {
                len: tokens.len(),
                max: max_seq,
            });
        }
        let layout = TokenLayout::with_span(tokens.len(), start_marker, end_marker)?;
        let mut gt_mask = vec![0u8; cells];
        gt_mask[cell] = 1;
        out.push(GroundingExample {
            tokens,
            prompt_len,
            layout,
            target: (row, col),
            gt_mask,
        });
    }
    Ok(out)
}

/// Generates `n` digit-addition examples with empty visual spans.
pub fn gen_puretext(seed: u64, n: usize) -> Vec<TextExample> {
    let mut rng = rng::stream(seed, "puretext");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.random_range(0..10usize);
        let b = rng.random_range(0..10usize);
        let mut tokens = vec![
            vocab::BOS,
            vocab::digit(a),
            vocab::PLUS,
            vocab::digit(b),
            vocab::EQUALS,
        ];
        let prompt_len = tokens.len();
        push_decimal(&mut tokens, a + b);
        let layout = TokenLayout::pure_text(tokens.len());
        out.push(TextExample {
            tokens,
            prompt_len,
            layout,
        });
    }
    out
}

/// Fraction of predictions whose decoded point lands in the target cell box;
/// malformed outputs count as misses. Also returns the per-example hits.
pub fn accuracy(predictions: &[Vec<usize>], examples: &[GroundingExample]) -> (f64, Vec<bool>) {
    assert_eq!(predictions.len(), examples.len(), "prediction count mismatch");
    let hits: Vec<bool> = predictions
        .iter()
        .zip(examples)
        .map(|(pred, ex)| {
            // The unit cell box of (row, col) contains exactly the integer
            // point (x = col, y = row).
            parse_point(pred) == Some((ex.target.1, ex.target.0))
        })
        .collect();
    let acc = if hits.is_empty() {
        0.0
    } else {
        hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
    };
    (acc, hits)
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut file, item)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_roundtrip_over_all_cells() {
        for row in 0..12 {
            for col in 0..12 {
                let enc = encode_point(row, col);
                assert_eq!(parse_point(&enc), Some((col, row)), "cell ({row},{col})");
            }
        }
    }

    #[test]
    fn parse_rejects_malformed_strings() {
        assert_eq!(parse_point(&[]), None);
        assert_eq!(parse_point(&[vocab::POINT_PREFIX]), None);
        assert_eq!(
            parse_point(&[vocab::POINT_PREFIX, vocab::COMMA, vocab::RBRACKET]),
            None
        );
        // Trailing garbage after the bracket.
        let mut enc = encode_point(1, 2);
        enc.push(vocab::digit(3));
        assert_eq!(parse_point(&enc), None);
        // Missing bracket.
        let enc = encode_point(1, 2);
        assert_eq!(parse_point(&enc[..enc.len() - 1]), None);
    }

    #[test]
    fn grounding_generation_is_reproducible_and_well_formed() {
        let a = gen_grounding(7, 20, (4, 4), 6, 64, 512).unwrap();
        let b = gen_grounding(7, 20, (4, 4), 6, 64, 512).unwrap();
        assert_eq!(a, b);
        let c = gen_grounding(8, 20, (4, 4), 6, 64, 512).unwrap();
        assert_ne!(a, c);

        for ex in &a {
            assert_eq!(ex.layout.visual_len(), 16);
            assert_eq!(ex.gt_mask.iter().map(|&m| m as usize).sum::<usize>(), 1);
            let span = ex.layout.visual_range().unwrap();
            let marked: Vec<usize> = span
                .clone()
                .filter(|&p| ex.tokens[p] == vocab::GRID_MARK)
                .collect();
            assert_eq!(marked.len(), 1);
            let cell = marked[0] - span.start;
            assert_eq!((cell / 4, cell % 4), ex.target);
            assert_eq!(parse_point(ex.answer()), Some((ex.target.1, ex.target.0)));
        }
    }

    #[test]
    fn grounding_respects_capacity() {
        assert!(matches!(
            gen_grounding(1, 1, (8, 8), 0, 64, 32),
            Err(TaskError::Capacity { .. })
        ));
    }

    #[test]
    fn puretext_has_no_visual_span() {
        let xs = gen_puretext(3, 50);
        assert_eq!(xs.len(), 50);
        for ex in &xs {
            assert_eq!(ex.layout.visual_len(), 0);
            assert!(ex.layout.visual.is_none());
        }
        assert_eq!(xs, gen_puretext(3, 50));
    }

    #[test]
    fn accuracy_scoring() {
        let examples = gen_grounding(11, 3, (3, 3), 2, 64, 512).unwrap();
        // Oracle predictions score 1.0.
        let oracle: Vec<Vec<usize>> = examples.iter().map(|e| e.answer().to_vec()).collect();
        assert_eq!(accuracy(&oracle, &examples).0, 1.0);

        // One hit out of three.
        let mut one = oracle.clone();
        one[1] = vec![vocab::PAD];
        one[2] = encode_point(99, 99);
        let (acc, hits) = accuracy(&one, &examples);
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(hits, vec![true, false, false]);
    }

    #[test]
    fn ratio_pad_hits_requested_ratio() {
        let t_v = 36;
        for ratio in [0.5, 1.0, 2.0, 5.0] {
            let pad = text_pad_for_ratio(ratio, t_v);
            let ex = &gen_grounding(1, 1, (6, 6), pad, 64, 512).unwrap()[0];
            let text = ex.prompt_len - ex.layout.visual_len();
            assert!(
                ((text as f64 / t_v as f64) - ratio).abs() * t_v as f64 <= 1.0,
                "ratio {ratio}: text {text}"
            );
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = std::env::temp_dir().join(format!("ilra-tasks-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grounding.jsonl");
        let xs = gen_grounding(5, 8, (3, 4), 3, 64, 512).unwrap();
        write_jsonl(&path, &xs).unwrap();
        let back: Vec<GroundingExample> = read_jsonl(&path).unwrap();
        assert_eq!(xs, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
