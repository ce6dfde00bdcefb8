//! UTF-8 byte tokenization.
//!
//! Token ids 0..=255 are raw byte values; the special ids sit above them.
//! Every valid UTF-8 string therefore encodes without unknown tokens.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 256;
pub const EOS_ID: usize = 257;
pub const BOS_ID: usize = 258;

/// Byte vocabulary with three special ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub pad_id: usize,
    pub eos_id: usize,
    pub bos_id: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            size: 259,
            pad_id: PAD_ID,
            eos_id: EOS_ID,
            bos_id: BOS_ID,
        }
    }
}

impl Vocab {
    pub fn validate(&self) -> Result<()> {
        let specials = [self.pad_id, self.eos_id, self.bos_id];
        if specials.iter().any(|&s| s < 256 || s >= self.size) {
            return Err(Error::Config(format!(
                "special ids {specials:?} must lie in 256..{}",
                self.size
            )));
        }
        if self.pad_id == self.eos_id || self.pad_id == self.bos_id || self.eos_id == self.bos_id {
            return Err(Error::Config(format!(
                "special ids {specials:?} must be distinct"
            )));
        }
        if self.size != 256 + specials.len() {
            return Err(Error::Config(format!(
                "vocabulary size {} must equal 256 + 3 specials",
                self.size
            )));
        }
        Ok(())
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad_id || id == self.eos_id || id == self.bos_id
    }

    /// Encodes a string that is already known to be valid UTF-8.
    pub fn encode(&self, text: &str, add_bounds: bool) -> ByteSequence {
        let mut ids = Vec::with_capacity(text.len() + 2);
        if add_bounds {
            ids.push(self.bos_id);
        }
        ids.extend(text.bytes().map(usize::from));
        if add_bounds {
            ids.push(self.eos_id);
        }
        ByteSequence { ids }
    }

    /// Encodes raw bytes, rejecting anything that is not valid UTF-8.
    pub fn encode_text(&self, text: &[u8], add_bounds: bool) -> Result<ByteSequence> {
        let s = std::str::from_utf8(text).map_err(|e| Error::InvalidUtf8 {
            position: e.valid_up_to(),
        })?;
        Ok(self.encode(s, add_bounds))
    }

    /// Strips specials and decodes the remaining bytes, replacing each
    /// maximal invalid subsequence with U+FFFD. Returns the text and the
    /// number of replacements made.
    pub fn decode_tokens(&self, seq: &ByteSequence) -> (String, usize) {
        let bytes: Vec<u8> = seq
            .ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        decode_lossy(&bytes)
    }

    /// Checks that every id is inside the vocabulary and that bos/eos only
    /// appear at the boundaries.
    pub fn check(&self, seq: &ByteSequence) -> Result<()> {
        let n = seq.ids.len();
        for (pos, &id) in seq.ids.iter().enumerate() {
            if id >= self.size {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.size,
                });
            }
            if id == self.bos_id && pos != 0 {
                return Err(Error::Config(format!("bos id at interior position {pos}")));
            }
            if id == self.eos_id && pos + 1 != n {
                return Err(Error::Config(format!("eos id at interior position {pos}")));
            }
        }
        Ok(())
    }
}

pub fn encode_text(text: &[u8], add_bounds: bool) -> Result<ByteSequence> {
    Vocab::default().encode_text(text, add_bounds)
}

pub fn decode_tokens(seq: &ByteSequence) -> (String, usize) {
    Vocab::default().decode_tokens(seq)
}

/// An ordered sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ByteSequence {
    pub ids: Vec<usize>,
}

impl ByteSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        ByteSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Parses a whitespace-separated line of decimal ids.
    pub fn parse_dump(line: &str) -> Result<Self> {
        let ids = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Corpus(format!("bad token id {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ByteSequence { ids })
    }
}

/// Token dump format: whitespace-separated decimal ids.
impl fmt::Display for ByteSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, id) in self.ids.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{id}")?;
        }
        Ok(())
    }
}

/// Length of the sequence starting with `lead`, and the accepted range of
/// the first continuation byte. `None` if `lead` can never start a sequence.
fn lead_class(lead: u8) -> Option<(usize, u8, u8)> {
    match lead {
        0x00..=0x7F => Some((1, 0, 0)),
        0xC2..=0xDF => Some((2, 0x80, 0xBF)),
        0xE0 => Some((3, 0xA0, 0xBF)),
        0xE1..=0xEC | 0xEE..=0xEF => Some((3, 0x80, 0xBF)),
        0xED => Some((3, 0x80, 0x9F)),
        0xF0 => Some((4, 0x90, 0xBF)),
        0xF1..=0xF3 => Some((4, 0x80, 0xBF)),
        0xF4 => Some((4, 0x80, 0x8F)),
        _ => None,
    }
}

/// Lossy UTF-8 decoding using the maximal-subpart replacement rule.
pub fn decode_lossy(bytes: &[u8]) -> (String, usize) {
    let mut out = String::with_capacity(bytes.len());
    let mut invalid = 0;
    let mut i = 0;
    while i < bytes.len() {
        let Some((len, lo, hi)) = lead_class(bytes[i]) else {
            out.push(char::REPLACEMENT_CHARACTER);
            invalid += 1;
            i += 1;
            continue;
        };
        if len == 1 {
            out.push(bytes[i] as char);
            i += 1;
            continue;
        }
        let mut cp = u32::from(bytes[i]) & (0x7F >> len);
        let mut taken = 1;
        while taken < len {
            let Some(&b) = bytes.get(i + taken) else {
                break;
            };
            let (min, max) = if taken == 1 { (lo, hi) } else { (0x80, 0xBF) };
            if b < min || b > max {
                break;
            }
            cp = (cp << 6) | u32::from(b & 0x3F);
            taken += 1;
        }
        if taken == len {
            // The lead/second-byte ranges exclude overlongs, surrogates and
            // values past U+10FFFF, so this cannot fail.
            out.push(char::from_u32(cp).unwrap_or(char::REPLACEMENT_CHARACTER));
        } else {
            out.push(char::REPLACEMENT_CHARACTER);
            invalid += 1;
        }
        i += taken;
    }
    (out, invalid)
}

/// Number of UTF-8 bytes needed for `c`.
pub fn byte_group_of(c: char) -> usize {
    match u32::from(c) {
        0..=0x7F => 1,
        0x80..=0x7FF => 2,
        0x800..=0xFFFF => 3,
        _ => 4,
    }
}

/// Codepoint counts by UTF-8 width; index `g` holds width `g`, index 0 is
/// unused. ASCII whitespace is not counted.
pub fn byte_group_histogram(text: &str) -> [usize; 5] {
    let mut counts = [0usize; 5];
    for c in text.chars().filter(|c| !c.is_ascii_whitespace()) {
        counts[byte_group_of(c)] += 1;
    }
    counts
}

/// Most frequent group of a histogram, ties going to the larger group, or
/// `None` when it is empty.
pub fn dominant_group(counts: &[usize; 5]) -> Option<usize> {
    if counts[1..].iter().all(|&n| n == 0) {
        return None;
    }
    let mut best = 1;
    for group in 2..=4 {
        if counts[group] >= counts[best] {
            best = group;
        }
    }
    Some(best)
}

/// Modal byte group over the non-whitespace codepoints of `text`. Ties go to
/// the larger group.
pub fn classify_text_scale(text: &str) -> Result<usize> {
    dominant_group(&byte_group_histogram(text))
        .ok_or_else(|| Error::Empty("text has no non-whitespace characters".into()))
}
