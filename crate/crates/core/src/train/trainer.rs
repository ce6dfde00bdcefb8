use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bleu::corpus_bleu;
use super::config::TrainConfig;
use super::optim::{lr_at, Adam};
use crate::autodiff::{ParamStore, Tape};
use crate::byte_codec::Vocab;
use crate::data::{make_batches, Batch, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::Model;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_DIR: &str = "final";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the training log, written after every validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Token-weighted mean of the optimized loss since the last record.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    MaxSteps,
}

/// Counts validations since the best one.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records a validation loss and returns true when training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The average of the last `avg_last` checkpoints.
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub steps: usize,
    pub best_valid: f64,
    pub stop: StopReason,
}

/// Mean per-token negative log-likelihood without dropout.
pub fn batch_loss(model: &Model, batches: &[Batch]) -> Result<f64> {
    let v = model.config().vocab;
    let (mut total, mut tokens) = (0.0, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let logits = model.forward_train(&mut tape, &b.src, &b.tgt_in, None)?;
        let flat = tape.reshape(logits, &[b.tgt_in.batch * b.tgt_in.len, v.size])?;
        let loss = tape.label_smoothed_ce(flat, &b.tgt_out.ids, 0.0, v.pad_id)?;
        let n = b.tgt_out.tokens();
        total += tape.scalar(loss) * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Empty("no target tokens to score".into()));
    }
    Ok(total / tokens as f64)
}

/// Per-token NLL of `corpus` under `model`.
pub fn corpus_loss(model: &Model, corpus: &ParallelCorpus, token_budget: usize) -> Result<f64> {
    batch_loss(
        model,
        &make_batches(corpus, &model.config().vocab, token_budget, 0),
    )
}

/// Decoding limit for a source of `src_bytes` bytes.
pub fn default_max_len(src_bytes: usize) -> usize {
    2 * src_bytes + 10
}

/// Translates each line; beam 1 is greedy search.
pub fn translate_lines<S: AsRef<str>>(
    model: &Model,
    lines: &[S],
    beam: usize,
) -> Result<Vec<String>> {
    let vocab: Vocab = model.config().vocab;
    let lp = model.config().length_penalty;
    lines
        .iter()
        .map(|line| {
            let line = line.as_ref();
            let src = vocab.encode(line, true);
            let max_len = default_max_len(line.len());
            let out = if beam == 1 {
                model.greedy_decode(&src, max_len)?
            } else {
                model.beam_decode(&src, beam, max_len, lp)?
            };
            Ok(vocab.decode_tokens(&out).0)
        })
        .collect()
}

/// Corpus BLEU of the model's translations of `corpus` sources.
pub fn evaluate_bleu(model: &Model, corpus: &ParallelCorpus, beam: usize) -> Result<f64> {
    let sources: Vec<&str> = corpus.sources().collect();
    let refs: Vec<&str> = corpus.targets().collect();
    let hyps = translate_lines(model, &sources, beam)?;
    corpus_bleu(&hyps, &refs)
}

/// Trains with early stopping on the loss of `valid`.
pub fn train(
    model: Model,
    corpus: &ParallelCorpus,
    valid: &ParallelCorpus,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if valid.is_empty() {
        return Err(Error::Empty("validation corpus".into()));
    }
    let valid_batches = make_batches(valid, &model.config().vocab, cfg.token_budget, 0);
    train_with_validator(model, corpus, cfg, out_dir, |m| {
        batch_loss(m, &valid_batches)
    })
}

struct Checkpoints {
    ring: VecDeque<(usize, ParamStore)>,
    capacity: usize,
    dir: Option<PathBuf>,
}

impl Checkpoints {
    fn push(&mut self, model: &Model, index: usize) -> Result<()> {
        if let Some(dir) = &self.dir {
            model.save_params_as(&dir.join(format!("checkpoint{index:04}")), model.store())?;
        }
        self.ring.push_back((index, model.store().clone()));
        if self.ring.len() > self.capacity {
            let (old, _) = self.ring.pop_front().expect("non-empty");
            if let Some(dir) = &self.dir {
                let path = dir.join(format!("checkpoint{old:04}"));
                std::fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    fn average(&self) -> Result<ParamStore> {
        let stores: Vec<&ParamStore> = self.ring.iter().map(|(_, s)| s).collect();
        ParamStore::average(&stores)
    }
}

/// Training loop with a caller-supplied validation loss. Validation and a
/// checkpoint follow every epoch, and the epoch cut short by `max_steps`.
/// With `out_dir`, checkpoints, the final model and a JSON-lines log are
/// written there.
pub fn train_with_validator<V>(
    mut model: Model,
    corpus: &ParallelCorpus,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut validate: V,
) -> Result<TrainOutcome>
where
    V: FnMut(&Model) -> Result<f64>,
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    let vocab = model.config().vocab;
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, file))
        }
        None => None,
    };
    let mut checkpoints = Checkpoints {
        ring: VecDeque::new(),
        capacity: cfg.avg_last,
        dir: out_dir.map(|d| d.join(CHECKPOINT_DIR)),
    };

    let start = Instant::now();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut adam = Adam::from_config(cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = Vec::new();
    let mut step = 0;
    let mut stop = StopReason::MaxEpochs;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(
            corpus,
            &vocab,
            cfg.token_budget,
            cfg.seed.wrapping_add(epoch as u64),
        );
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        let mut lr = lr_at(step.max(1), cfg);
        for b in &batches {
            if step >= max_steps {
                break;
            }
            step += 1;
            lr = lr_at(step, cfg);
            let mut tape = Tape::new();
            let logits =
                model.forward_train(&mut tape, &b.src, &b.tgt_in, Some(&mut dropout_rng))?;
            let flat = tape.reshape(logits, &[b.tgt_in.batch * b.tgt_in.len, vocab.size])?;
            let loss =
                tape.label_smoothed_ce(flat, &b.tgt_out.ids, cfg.label_smoothing, vocab.pad_id)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let grads = tape.backward(loss)?;
            grads.write_to(model.store_mut());
            adam.step(model.store_mut(), lr)?;
            let n = b.tgt_out.tokens();
            loss_sum += value * n as f64;
            tokens += n;
        }

        let valid_loss = validate(&model)?;
        checkpoints.push(&model, log.len() + 1)?;
        let record = LogRecord {
            step,
            epoch,
            lr,
            train_loss: if tokens > 0 {
                loss_sum / tokens as f64
            } else {
                f64::NAN
            },
            valid_loss,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} step {step} lr {lr:.3e} train {:.4} valid {valid_loss:.4}",
            record.train_loss
        );
        if let Some((path, file)) = &mut log_file {
            writeln!(file, "{}", serde_json::to_string(&record)?)
                .map_err(|e| Error::io(&*path, e))?;
        }
        log.push(record);
        if stopper.update(valid_loss) {
            stop = StopReason::EarlyStop;
            break;
        }
        if step >= max_steps {
            stop = StopReason::MaxSteps;
            break;
        }
    }

    let averaged = checkpoints.average()?;
    model.store_mut().load_values(&averaged)?;
    model.store_mut().zero_grad();
    if let Some(dir) = out_dir {
        model.save(&dir.join(FINAL_DIR))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        steps: step,
        best_valid: stopper.best(),
        stop,
    })
}
