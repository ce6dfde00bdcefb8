//! Optimization, training loop, BLEU scoring and the scales grid.

pub mod bleu;
mod config;
mod optim;
pub mod scales;
mod trainer;

pub use bleu::{corpus_bleu, corpus_bleu_stats, tokenize_13a, BleuStats};
pub use config::TrainConfig;
pub use optim::{lr_at, Adam};
pub use scales::{scales_experiment, ScalesConfig, ScoreMatrix};
pub use trainer::{
    batch_loss, corpus_loss, default_max_len, evaluate_bleu, train, train_with_validator,
    translate_lines, EarlyStopping, LogRecord, StopReason, TrainOutcome, CHECKPOINT_DIR, FINAL_DIR,
    LOG_FILE,
};
