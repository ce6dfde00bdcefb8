//! Greedy and beam search over the decoder. Each step reruns the decoder
//! over the whole prefix; encoder states are computed once.

use std::cmp::Ordering;

use super::transformer::{Model, PaddedIds};
use crate::autodiff::{Tape, Tensor};
use crate::byte_codec::ByteSequence;
use crate::error::{Error, Result};

struct Encoded {
    memory: Tensor,
    src: PaddedIds,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
}

impl Model {
    fn encode_source(&self, src: &ByteSequence) -> Result<Encoded> {
        let ids = PaddedIds::from_sequences(std::slice::from_ref(src), self.config().vocab.pad_id);
        let mut tape = Tape::new();
        let out = self.encode(&mut tape, &ids, None)?;
        Ok(Encoded {
            memory: tape.value(out).clone(),
            src: ids,
        })
    }

    /// Log-probabilities of the next token after each prefix. All prefixes
    /// share one length and one source.
    fn next_log_probs(&self, enc: &Encoded, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let cfg = self.config();
        let n = prefixes.len();
        let len = prefixes[0].len();
        let mut tape = Tape::new();
        let d = cfg.d_model;
        let src_len = enc.src.len;
        let mut memory = Vec::with_capacity(n * src_len * d);
        let mut src_ids = Vec::with_capacity(n * src_len);
        for _ in 0..n {
            memory.extend_from_slice(enc.memory.data());
            src_ids.extend_from_slice(&enc.src.ids);
        }
        let memory = tape.constant(Tensor::new(vec![n, src_len, d], memory)?);
        let src = PaddedIds {
            ids: src_ids,
            batch: n,
            len: src_len,
            pad_id: cfg.vocab.pad_id,
        };
        let tgt = PaddedIds {
            ids: prefixes.concat(),
            batch: n,
            len,
            pad_id: cfg.vocab.pad_id,
        };
        let logits = self.decode_with(&mut tape, self.store(), memory, &src, &tgt, None)?;
        let v = cfg.vocab.size;
        let data = tape.value(logits).data();
        Ok((0..n)
            .map(|b| {
                let row = &data[(b * len + len - 1) * v..(b * len + len) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                row.iter().map(|z| z - lse).collect()
            })
            .collect())
    }

    fn generation_limit(&self, max_len: usize) -> Result<usize> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        // bos occupies the first decoder position.
        Ok(max_len.min(self.config().max_positions - 1))
    }

    fn can_emit(&self, id: usize) -> bool {
        let v = &self.config().vocab;
        id != v.pad_id && id != v.bos_id
    }

    /// Picks the most probable token at every step until eos or `max_len`
    /// generated tokens. The result excludes bos and eos.
    pub fn greedy_decode(&self, src: &ByteSequence, max_len: usize) -> Result<ByteSequence> {
        let limit = self.generation_limit(max_len)?;
        let eos = self.config().vocab.eos_id;
        let enc = self.encode_source(src)?;
        let mut prefix = vec![self.config().vocab.bos_id];
        for _ in 0..limit {
            let lp = self.next_log_probs(&enc, std::slice::from_ref(&prefix))?;
            let next = argmax(&lp[0], |id| self.can_emit(id));
            if next == eos {
                break;
            }
            prefix.push(next);
        }
        Ok(ByteSequence::new(prefix[1..].to_vec()))
    }

    /// Beam search. Finished hypotheses are ranked by
    /// `log p / length^length_penalty`, where length counts generated tokens
    /// including eos. With `beam == 1` this is exactly greedy decoding.
    pub fn beam_decode(
        &self,
        src: &ByteSequence,
        beam: usize,
        max_len: usize,
        length_penalty: f64,
    ) -> Result<ByteSequence> {
        if beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        let limit = self.generation_limit(max_len)?;
        let cfg = self.config();
        let (bos, eos) = (cfg.vocab.bos_id, cfg.vocab.eos_id);
        let enc = self.encode_source(src)?;
        let normalize = |h: &Hypothesis| h.score / (h.tokens.len() as f64).powf(length_penalty);

        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
        }];
        let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
        for _ in 0..limit {
            let prefixes: Vec<Vec<usize>> = live
                .iter()
                .map(|h| {
                    std::iter::once(bos)
                        .chain(h.tokens.iter().copied())
                        .collect()
                })
                .collect();
            let lps = self.next_log_probs(&enc, &prefixes)?;
            let mut candidates: Vec<(usize, usize, f64)> =
                Vec::with_capacity(live.len() * cfg.vocab.size);
            for (h, lp) in lps.iter().enumerate() {
                for (id, &l) in lp.iter().enumerate() {
                    if self.can_emit(id) {
                        candidates.push((h, id, live[h].score + l));
                    }
                }
            }
            candidates.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap_or(Ordering::Equal)
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            let mut next = Vec::with_capacity(beam);
            for (rank, &(h, id, score)) in candidates.iter().enumerate() {
                if next.len() == beam && rank >= beam {
                    break;
                }
                let mut tokens = live[h].tokens.clone();
                tokens.push(id);
                let hyp = Hypothesis { tokens, score };
                if id == eos {
                    if rank < beam {
                        finished.push((normalize(&hyp), hyp.tokens));
                    }
                } else if next.len() < beam {
                    next.push(hyp);
                }
            }
            live = next;
            if finished.len() >= beam || live.is_empty() {
                break;
            }
        }
        if finished.len() < beam {
            for h in &live {
                finished.push((normalize(h), h.tokens.clone()));
            }
        }
        let best = finished
            .into_iter()
            .fold(None::<(f64, Vec<usize>)>, |best, cand| match best {
                Some(b) if b.0 >= cand.0 => Some(b),
                _ => Some(cand),
            })
            .map(|(_, t)| t)
            .unwrap_or_default();
        Ok(ByteSequence::new(
            best.into_iter().filter(|&id| id != eos).collect(),
        ))
    }
}

/// Index of the largest allowed entry; ties go to the lowest index.
fn argmax(values: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = None;
    for (i, &v) in values.iter().enumerate() {
        if !allowed(i) {
            continue;
        }
        match best {
            Some((_, bv)) if bv >= v => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}
