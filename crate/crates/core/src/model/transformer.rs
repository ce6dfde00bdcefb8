use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::checkpoint::{load_params, save_params};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::byte_codec::ByteSequence;
use crate::error::{Error, Result};
use crate::msc::MscLayer;

pub const CONFIG_FILE: &str = "config.json";

/// Additive score for masked attention entries. Large enough that its
/// exponential underflows to exactly zero.
const MASKED: f64 = -1e9;

/// A batch of id sequences padded on the right to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub pad_id: usize,
}

impl PaddedIds {
    pub fn from_sequences(seqs: &[ByteSequence], pad_id: usize) -> Self {
        let len = seqs.iter().map(ByteSequence::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat_n(pad_id, len - s.len()));
        }
        PaddedIds {
            ids,
            batch: seqs.len(),
            len,
            pad_id,
        }
    }

    /// One flag per position, false at padding.
    pub fn keep(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != self.pad_id).collect()
    }

    /// Number of non-pad tokens.
    pub fn tokens(&self) -> usize {
        self.ids.iter().filter(|&&id| id != self.pad_id).count()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layer = Self::without_bias(store, name, fan_in, fan_out, rng);
        layer.bias = Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        layer
    }

    fn without_bias(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Xavier-uniform.
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound, rng);
        Linear { weight, bias: None }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w, false)?;
        match self.bias {
            Some(bias) => {
                let b = tape.param(store, bias);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            // A key bias shifts every score of a query row equally, which the
            // softmax cancels; it would only ever receive a zero gradient.
            k: Linear::without_bias(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    fn split_heads(
        &self,
        tape: &mut Tape,
        x: Var,
        batch: usize,
        len: usize,
        d: usize,
    ) -> Result<Var> {
        let dh = d / self.heads;
        let x = tape.reshape(x, &[batch, len, self.heads, dh])?;
        let x = tape.swap_middle(x)?;
        tape.reshape(x, &[batch * self.heads, len, dh])
    }

    /// `query` is `[batch, lq, d]`, `memory` is `[batch, lk, d]` and `mask`
    /// is an additive constant of shape `[batch * heads, lq, lk]`.
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        memory: Var,
        mask: Var,
    ) -> Result<Var> {
        let (batch, lq, d) = dims3(tape, query)?;
        let (_, lk, _) = dims3(tape, memory)?;
        let dh = d / self.heads;
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, memory)?;
        let v = self.v.forward(tape, store, memory)?;
        let q = self.split_heads(tape, q, batch, lq, d)?;
        let k = self.split_heads(tape, k, batch, lk, d)?;
        let v = self.split_heads(tape, v, batch, lk, d)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add(scores, mask)?;
        let probs = tape.softmax(scores);
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[batch, self.heads, lq, dh])?;
        let ctx = tape.swap_middle(ctx)?;
        let ctx = tape.reshape(ctx, &[batch, lq, d])?;
        self.out.forward(tape, store, ctx)
    }
}

fn dims3(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::shape(
            "attention",
            format!("expected 3-D input, got {s:?}"),
        )),
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        p: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, p, rng);
        self.down.forward(tape, store, h)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    msc: Option<MscLayer>,
    attn: Attention,
    attn_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    self_norm: LayerNorm,
    cross_attn: Attention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

/// Post-norm encoder-decoder transformer over byte tokens with one
/// embedding table shared by encoder input, decoder input and the output
/// projection.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    positions: Vec<f64>,
}

fn sinusoid(max_positions: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_positions * d];
    for pos in 0..max_positions {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            pe[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    pe
}

impl Model {
    /// Deterministic construction from `seed`. MSC parameters draw from a
    /// separate random stream, so the remaining weights match those of the
    /// MSC-free baseline built from the same seed.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut msc_rng = ChaCha8Rng::seed_from_u64(seed);
        msc_rng.set_stream(1);
        let mut store = ParamStore::new();

        // Half the usual d^-1/2 scale keeps the tied output logits of an
        // untrained model close to uniform.
        let std = 0.5 * (d as f64).powf(-0.5);
        let bound = std * 3f64.sqrt();
        let mut table: Vec<f64> = (0..cfg.vocab.size * d)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        table[cfg.vocab.pad_id * d..(cfg.vocab.pad_id + 1) * d].fill(0.0);
        let embed = store.insert("embed", Tensor::new(vec![cfg.vocab.size, d], table)?);

        let mut encoder = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            let name = format!("encoder.{l}");
            let msc = if cfg.msc_layers.contains(&l) {
                Some(MscLayer::new(
                    &mut store,
                    &format!("{name}.msc"),
                    d,
                    &cfg.k_series,
                    &mut msc_rng,
                )?)
            } else {
                None
            };
            encoder.push(EncoderLayer {
                msc,
                attn: Attention::new(&mut store, &format!("{name}.attn"), d, cfg.heads, &mut rng),
                attn_norm: LayerNorm::new(&mut store, &format!("{name}.attn_norm"), d),
                ffn: FeedForward {
                    up: Linear::new(
                        &mut store,
                        &format!("{name}.ffn.up"),
                        d,
                        cfg.ffn_dim,
                        &mut rng,
                    ),
                    down: Linear::new(
                        &mut store,
                        &format!("{name}.ffn.down"),
                        cfg.ffn_dim,
                        d,
                        &mut rng,
                    ),
                },
                ffn_norm: LayerNorm::new(&mut store, &format!("{name}.ffn_norm"), d),
            });
        }
        let mut decoder = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let name = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                self_attn: Attention::new(
                    &mut store,
                    &format!("{name}.self_attn"),
                    d,
                    cfg.heads,
                    &mut rng,
                ),
                self_norm: LayerNorm::new(&mut store, &format!("{name}.self_norm"), d),
                cross_attn: Attention::new(
                    &mut store,
                    &format!("{name}.cross_attn"),
                    d,
                    cfg.heads,
                    &mut rng,
                ),
                cross_norm: LayerNorm::new(&mut store, &format!("{name}.cross_norm"), d),
                ffn: FeedForward {
                    up: Linear::new(
                        &mut store,
                        &format!("{name}.ffn.up"),
                        d,
                        cfg.ffn_dim,
                        &mut rng,
                    ),
                    down: Linear::new(
                        &mut store,
                        &format!("{name}.ffn.down"),
                        cfg.ffn_dim,
                        d,
                        &mut rng,
                    ),
                },
                ffn_norm: LayerNorm::new(&mut store, &format!("{name}.ffn_norm"), d),
            });
        }
        let positions = sinusoid(cfg.max_positions, d);
        Ok(Model {
            cfg,
            store,
            embed,
            encoder,
            decoder,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameters belonging to MSC layers.
    pub fn msc_param_ids(&self) -> Vec<ParamId> {
        self.encoder
            .iter()
            .filter_map(|l| l.msc.as_ref())
            .flat_map(MscLayer::param_ids)
            .collect()
    }

    fn embed_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &PaddedIds,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        if ids.len > self.cfg.max_positions {
            return Err(Error::TooLong {
                len: ids.len,
                max: self.cfg.max_positions,
            });
        }
        if let Some(&bad) = ids.ids.iter().find(|&&id| id >= self.cfg.vocab.size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.cfg.vocab.size,
            });
        }
        let table = tape.param(store, self.embed);
        let x = tape.embedding(table, &ids.ids)?;
        let x = tape.scale(x, (d as f64).sqrt());
        let mut pe = Vec::with_capacity(ids.batch * ids.len * d);
        for _ in 0..ids.batch {
            pe.extend_from_slice(&self.positions[..ids.len * d]);
        }
        let pe = tape.constant(Tensor::new(vec![ids.batch * ids.len, d], pe)?);
        let x = tape.add(x, pe)?;
        let x = tape.reshape(x, &[ids.batch, ids.len, d])?;
        Ok(tape.dropout(x, self.cfg.dropout, rng))
    }

    fn key_mask(&self, tape: &mut Tape, keys: &PaddedIds, lq: usize, causal: bool) -> Result<Var> {
        let h = self.cfg.heads;
        let lk = keys.len;
        let mut mask = vec![0.0; keys.batch * h * lq * lk];
        for b in 0..keys.batch {
            let row = keys.row(b);
            for head in 0..h {
                let base = (b * h + head) * lq * lk;
                for q in 0..lq {
                    for k in 0..lk {
                        if row[k] == keys.pad_id || (causal && k > q) {
                            mask[base + q * lk + k] = MASKED;
                        }
                    }
                }
            }
        }
        Ok(tape.constant(Tensor::new(vec![keys.batch * h, lq, lk], mask)?))
    }

    /// Encoder states `[batch, length, d_model]` for `src`, with an explicit
    /// parameter store. Dropout is active only when `rng` is given.
    pub fn encode_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src: &PaddedIds,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let p = self.cfg.dropout;
        let keep = src.keep();
        let mut x = self.embed_tokens(tape, store, src, rng.as_deref_mut())?;
        let mask = self.key_mask(tape, src, src.len, false)?;
        for layer in &self.encoder {
            if let Some(msc) = &layer.msc {
                x = msc.forward(tape, store, x, &keep)?;
            }
            let a = layer.attn.forward(tape, store, x, x, mask)?;
            let a = tape.dropout(a, p, rng.as_deref_mut());
            let h = tape.add(x, a)?;
            x = layer.attn_norm.forward(tape, store, h)?;
            let f = layer.ffn.forward(tape, store, x, p, rng.as_deref_mut())?;
            let f = tape.dropout(f, p, rng.as_deref_mut());
            let h = tape.add(x, f)?;
            x = layer.ffn_norm.forward(tape, store, h)?;
        }
        Ok(x)
    }

    /// Decoder logits `[batch, tgt_len, vocab]` given encoder states.
    pub fn decode_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        src: &PaddedIds,
        tgt_in: &PaddedIds,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if src.batch != tgt_in.batch {
            return Err(Error::shape(
                "forward_train",
                format!("{} sources for {} targets", src.batch, tgt_in.batch),
            ));
        }
        let p = self.cfg.dropout;
        let d = self.cfg.d_model;
        let mut x = self.embed_tokens(tape, store, tgt_in, rng.as_deref_mut())?;
        let self_mask = self.key_mask(tape, tgt_in, tgt_in.len, true)?;
        let cross_mask = self.key_mask(tape, src, tgt_in.len, false)?;
        for layer in &self.decoder {
            let a = layer.self_attn.forward(tape, store, x, x, self_mask)?;
            let a = tape.dropout(a, p, rng.as_deref_mut());
            let h = tape.add(x, a)?;
            x = layer.self_norm.forward(tape, store, h)?;
            let c = layer
                .cross_attn
                .forward(tape, store, x, memory, cross_mask)?;
            let c = tape.dropout(c, p, rng.as_deref_mut());
            let h = tape.add(x, c)?;
            x = layer.cross_norm.forward(tape, store, h)?;
            let f = layer.ffn.forward(tape, store, x, p, rng.as_deref_mut())?;
            let f = tape.dropout(f, p, rng.as_deref_mut());
            let h = tape.add(x, f)?;
            x = layer.ffn_norm.forward(tape, store, h)?;
        }
        let table = tape.param(store, self.embed);
        let x = tape.reshape(x, &[tgt_in.batch * tgt_in.len, d])?;
        let logits = tape.matmul(x, table, true)?;
        tape.reshape(logits, &[tgt_in.batch, tgt_in.len, self.cfg.vocab.size])
    }

    /// Teacher-forced logits. `tgt_in` rows start with bos.
    pub fn forward_train_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src: &PaddedIds,
        tgt_in: &PaddedIds,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if let Some(b) = (0..tgt_in.batch)
            .find(|&b| tgt_in.len == 0 || tgt_in.row(b)[0] != self.cfg.vocab.bos_id)
        {
            return Err(Error::Config(format!(
                "target row {b} does not start with bos"
            )));
        }
        let memory = self.encode_with(tape, store, src, rng.as_deref_mut())?;
        self.decode_with(tape, store, memory, src, tgt_in, rng)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        src: &PaddedIds,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.encode_with(tape, &self.store, src, rng)
    }

    pub fn forward_train(
        &self,
        tape: &mut Tape,
        src: &PaddedIds,
        tgt_in: &PaddedIds,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.forward_train_with(tape, &self.store, src, tgt_in, rng)
    }

    /// Evaluation-mode encoder output for a batch of sequences.
    pub fn encode_batch(&self, src: &[ByteSequence]) -> Result<Tensor> {
        let ids = PaddedIds::from_sequences(src, self.cfg.vocab.pad_id);
        let mut tape = Tape::new();
        let out = self.encode(&mut tape, &ids, None)?;
        Ok(tape.value(out).clone())
    }

    /// Writes parameters, manifest and config into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_params_as(dir, &self.store)
    }

    /// Writes `store`, which must match this model's parameters, as a
    /// checkpoint of this model's config.
    pub fn save_params_as(&self, dir: &Path, store: &ParamStore) -> Result<()> {
        let hash = self.cfg.hash();
        save_params(dir, store, Some(&hash))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self.cfg)?)
            .map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint directory written by [`Model::save`], refusing it
    /// when the stored config hash does not match the config file.
    pub fn load(dir: &Path) -> Result<Model> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let (params, manifest) = load_params(dir)?;
        if manifest.config_hash.as_deref() != Some(cfg.hash().as_str()) {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: manifest has {:?}, config hashes to {}",
                manifest.config_hash,
                cfg.hash()
            )));
        }
        let mut model = Model::build(cfg, 0)?;
        model.store.load_values(&params)?;
        Ok(model)
    }
}
