//! Parallel corpora, token-budget batching and synthetic tasks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::byte_codec::{ByteSequence, Vocab};
use crate::error::{Error, Result};
use crate::model::PaddedIds;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub src: String,
    pub tgt: String,
    pub lang: Option<String>,
}

/// Sentence pairs with non-empty sides.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pairs: Vec<Pair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        if let Some(i) = pairs
            .iter()
            .position(|p| p.src.trim().is_empty() || p.tgt.trim().is_empty())
        {
            return Err(Error::Corpus(format!("pair {i} has an empty side")));
        }
        Ok(ParallelCorpus { pairs })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.src.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.tgt.as_str())
    }

    /// Writes one segment per line to each file.
    pub fn write(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        for (path, side) in [(src_path, true), (tgt_path, false)] {
            let mut text = String::new();
            for p in &self.pairs {
                text.push_str(if side { &p.src } else { &p.tgt });
                text.push('\n');
            }
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// What [`load_corpus`] kept and discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LoadReport {
    pub kept: usize,
    pub too_long: usize,
    pub empty: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    if bytes.is_empty() {
        return Ok(lines);
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    for (n, line) in body.split(|&b| b == b'\n').enumerate() {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        let text = std::str::from_utf8(line).map_err(|e| {
            Error::Corpus(format!(
                "{}:{}: invalid UTF-8 at byte {}",
                path.display(),
                n + 1,
                e.valid_up_to()
            ))
        })?;
        lines.push(text.trim().to_string());
    }
    Ok(lines)
}

/// Reads line-aligned source and target files. Pairs whose encoded length
/// including bos and eos exceeds `max_len` on either side are dropped, as
/// are pairs with a blank side; both are counted in the report.
pub fn load_corpus(
    src_path: &Path,
    tgt_path: &Path,
    max_len: usize,
) -> Result<(ParallelCorpus, LoadReport)> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Corpus(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let mut report = LoadReport::default();
    let mut pairs = Vec::new();
    for (s, t) in src.into_iter().zip(tgt) {
        if s.is_empty() || t.is_empty() {
            report.empty += 1;
        } else if s.len() + 2 > max_len || t.len() + 2 > max_len {
            report.too_long += 1;
        } else {
            pairs.push(Pair {
                src: s,
                tgt: t,
                lang: None,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!(
            "no usable pairs in {} / {}",
            src_path.display(),
            tgt_path.display()
        )));
    }
    report.kept = pairs.len();
    Ok((ParallelCorpus { pairs }, report))
}

/// Teacher-forcing batch. Source rows are `bos .. eos`; `tgt_in` is the
/// target without its final eos and `tgt_out` the target without its
/// leading bos.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: PaddedIds,
    pub tgt_in: PaddedIds,
    pub tgt_out: PaddedIds,
    /// Corpus positions of the rows.
    pub indices: Vec<usize>,
    /// Non-pad source tokens plus non-pad `tgt_out` tokens.
    pub tokens: usize,
}

struct Encoded {
    src: ByteSequence,
    tgt: ByteSequence,
}

impl Encoded {
    fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len() - 1
    }
}

impl Batch {
    fn from_rows(rows: &[(usize, &Encoded)], vocab: &Vocab) -> Batch {
        let src: Vec<_> = rows.iter().map(|(_, e)| e.src.clone()).collect();
        let tin: Vec<_> = rows
            .iter()
            .map(|(_, e)| ByteSequence::new(e.tgt.ids[..e.tgt.len() - 1].to_vec()))
            .collect();
        let tout: Vec<_> = rows
            .iter()
            .map(|(_, e)| ByteSequence::new(e.tgt.ids[1..].to_vec()))
            .collect();
        Batch {
            src: PaddedIds::from_sequences(&src, vocab.pad_id),
            tgt_in: PaddedIds::from_sequences(&tin, vocab.pad_id),
            tgt_out: PaddedIds::from_sequences(&tout, vocab.pad_id),
            indices: rows.iter().map(|(i, _)| *i).collect(),
            tokens: rows.iter().map(|(_, e)| e.tokens()).sum(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Groups pairs of similar length into batches of at most `budget` tokens.
/// A pair that alone exceeds the budget becomes a singleton batch. Batch
/// order is shuffled with `seed`; rows inside a batch are ordered by
/// source length, longest first.
pub fn make_batches(
    corpus: &ParallelCorpus,
    vocab: &Vocab,
    budget: usize,
    seed: u64,
) -> Vec<Batch> {
    let encoded: Vec<Encoded> = corpus
        .pairs
        .iter()
        .map(|p| Encoded {
            src: vocab.encode(&p.src, true),
            tgt: vocab.encode(&p.tgt, true),
        })
        .collect();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.sort_by_key(|&i| (encoded[i].src.len(), encoded[i].tgt.len(), i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let cost = encoded[i].tokens();
        if cost > budget {
            log::warn!(
                "pair {i} has {cost} tokens, over the budget of {budget}; using a singleton batch"
            );
            groups.push(vec![i]);
            continue;
        }
        if used + cost > budget {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += cost;
    }
    if !current.is_empty() {
        groups.push(current);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    groups
        .into_iter()
        .map(|mut g| {
            g.sort_by_key(|&i| (std::cmp::Reverse(encoded[i].src.len()), i));
            let rows: Vec<_> = g.iter().map(|&i| (i, &encoded[i])).collect();
            Batch::from_rows(&rows, vocab)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Cipher,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "cipher" => Ok(Task::Cipher),
            _ => Err(Error::Config(format!(
                "unknown task {s:?}; expected copy, reverse or cipher"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Cipher => "cipher",
        })
    }
}

/// Alphabet blocks whose letters take one, two and three UTF-8 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Latin,
    Cyrillic,
    Cjk,
}

impl Script {
    pub const ALL: [Script; 3] = [Script::Latin, Script::Cyrillic, Script::Cjk];

    fn block(self) -> (u32, u32) {
        match self {
            Script::Latin => ('a' as u32, 26),
            Script::Cyrillic => (0x0430, 32),
            Script::Cjk => (0x4E00, 128),
        }
    }

    /// UTF-8 width of every letter.
    pub fn group(self) -> usize {
        match self {
            Script::Latin => 1,
            Script::Cyrillic => 2,
            Script::Cjk => 3,
        }
    }

    pub fn letter(self, i: u32) -> char {
        let (start, len) = self.block();
        char::from_u32(start + i % len).expect("block is inside the BMP")
    }

    /// Next letter of the block, wrapping at the end. Other characters are
    /// returned unchanged.
    pub fn shift(self, c: char) -> char {
        let (start, len) = self.block();
        let code = c as u32;
        if (start..start + len).contains(&code) {
            self.letter(code - start + 1)
        } else {
            c
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Script::Latin => "latin",
            Script::Cyrillic => "cyrillic",
            Script::Cjk => "cjk",
        }
    }
}

impl FromStr for Script {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Script::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown script {s:?}; expected latin, cyrillic or cjk"
                ))
            })
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A sentence of 3 to 12 codepoints: words of 1 to 4 letters separated by
/// single spaces.
fn sentence(script: Script, rng: &mut ChaCha8Rng) -> String {
    let (_, letters) = script.block();
    let total = rng.gen_range(3..=12usize);
    let mut out = String::new();
    let mut remaining = total;
    loop {
        // A single leftover slot could only hold a trailing space.
        let choices: Vec<usize> = (1..=remaining.min(4))
            .filter(|&w| remaining - w != 1)
            .collect();
        let w = choices[rng.gen_range(0..choices.len())];
        for _ in 0..w {
            out.push(script.letter(rng.gen_range(0..letters)));
        }
        remaining -= w;
        if remaining == 0 {
            return out;
        }
        out.push(' ');
        remaining -= 1;
    }
}

pub fn apply_task(task: Task, script: Script, src: &str) -> String {
    match task {
        Task::Copy => src.to_string(),
        Task::Reverse => src.chars().rev().collect(),
        Task::Cipher => src.chars().map(|c| script.shift(c)).collect(),
    }
}

pub fn gen_synthetic(task: Task, script: Script, size: usize, seed: u64) -> Result<ParallelCorpus> {
    if size == 0 {
        return Err(Error::Config(
            "synthetic corpus size must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..size)
        .map(|_| {
            let src = sentence(script, &mut rng);
            let tgt = apply_task(task, script, &src);
            Pair {
                src,
                tgt,
                lang: Some(script.name().to_string()),
            }
        })
        .collect();
    Ok(ParallelCorpus { pairs })
}
