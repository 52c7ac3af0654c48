use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("phoneme id {id} outside vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("unknown phoneme symbol `{0}`")]
    UnknownPhoneme(String),

    #[error("unknown emotion label `{0}`")]
    UnknownEmotion(String),

    #[error("alignment impossible: {frames} frames for {phonemes} phonemes")]
    Alignment { phonemes: usize, frames: usize },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),

    #[error("emotion backend: {0}")]
    Backend(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config hash mismatch: checkpoint {found:016x}, model {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },

    #[error("corrupt feature cache: {0}")]
    CorruptCache(String),

    #[error("training diverged at step {step}: non-finite `{component}`")]
    Diverged { step: usize, component: String },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("missing pair: {0}")]
    MissingPair(String),
}
