use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TtaError>;

#[derive(Error, Debug)]
pub enum TtaError {
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("length mismatch: clean has {clean} samples, noise has {noise}")]
    LengthMismatch { clean: usize, noise: usize },
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("noise has zero energy")]
    ZeroEnergyNoise,
    #[error("signal has zero energy, noise scale is undefined")]
    ZeroEnergySignal,
    #[error("requested clip of {requested} samples from a source of {available}")]
    ClipTooLong { requested: usize, available: usize },
    #[error("gaussian level {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("no noise recording for source {0}")]
    UnknownNoiseSource(String),
    #[error("corruption spec: {0}")]
    InvalidCorruptionSpec(String),

    #[error("waveform of {len} samples is shorter than n_fft = {n_fft}")]
    TooShort { len: usize, n_fft: usize },
    #[error("invalid feature config: {0}")]
    InvalidFeatureConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model has no {0} head")]
    HeadUnavailable(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss diverged (non-finite value {0}) at step {1}")]
    DivergedLoss(f64, usize),
    #[error("model has no batch-norm layers")]
    NoBnLayers,
    #[error("batch of {0} samples is too small for batch statistics")]
    BatchTooSmall(usize),
    #[error("weight array has {got} entries, expected {expected}")]
    WeightLengthMismatch { got: usize, expected: usize },
    #[error("every STDA loss term is disabled")]
    AllLossesDisabled,
    #[error("multi-target distillation needs at least two target domains, got {0}")]
    FewerThanTwoDomains(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash {found} does not match model config hash {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("checkpoint missing: {0}")]
    CheckpointMissing(PathBuf),

    #[error("dataset not found at {0}")]
    MissingDataset(PathBuf),
    #[error("label vocabulary mismatch: {0}")]
    LabelVocabularyMismatch(String),
    #[error("incomplete grid, missing cells: {0:?}")]
    IncompleteGrid(Vec<String>),
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error("plot: {0}")]
    Plot(String),
}
