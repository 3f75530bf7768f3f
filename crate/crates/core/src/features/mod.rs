//! Waveform to spectrogram conversion and the augmentations the adapters use.

pub mod augment;
pub mod cache;
pub mod mel;

pub use augment::{
    roll, roll_frames, shift_amount, strong_augment, time_shift, weak_augment, AugmentConfig, ShiftClass,
};
pub use mel::{mel_spectrogram, FeatureConfig, MelExtractor, SpectrogramImage};
