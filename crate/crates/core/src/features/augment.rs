use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mel::SpectrogramImage;
use crate::audio::Waveform;
use crate::seed::Rng;

/// Pretext classes for the time-shift prediction task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShiftClass {
    NoShift = 0,
    LeftShift = 1,
    RightShift = 2,
}

impl ShiftClass {
    pub const ALL: [ShiftClass; 3] = [ShiftClass::NoShift, ShiftClass::LeftShift, ShiftClass::RightShift];

    pub fn label(self) -> usize {
        self as usize
    }
}

/// Circular rotation of `values` by `k` positions to the right (negative
/// `k` rotates left).
pub fn roll<T: Copy>(values: &[T], k: isize) -> Vec<T> {
    let n = values.len() as isize;
    if n == 0 {
        return Vec::new();
    }
    let k = k.rem_euclid(n) as usize;
    let mut out = Vec::with_capacity(values.len());
    out.extend_from_slice(&values[values.len() - k..]);
    out.extend_from_slice(&values[..values.len() - k]);
    out
}

/// Number of positions a shifted class rotates a sequence of `len` items.
pub fn shift_amount(len: usize, fraction: f64) -> usize {
    (fraction * len as f64).round() as usize
}

/// Rotates the waveform left or right by `round(fraction * len)` samples.
pub fn time_shift(x: &Waveform, cls: ShiftClass, fraction: f64) -> Waveform {
    let k = shift_amount(x.len(), fraction) as isize;
    let rotated = match cls {
        ShiftClass::NoShift => return x.clone(),
        ShiftClass::LeftShift => roll(x.samples(), -k),
        ShiftClass::RightShift => roll(x.samples(), k),
    };
    Waveform::from_parts_unchecked(rotated, x.sample_rate())
}

/// Rotates every mel row of a spectrogram by `k` frames.
pub fn roll_frames(s: &SpectrogramImage, k: isize) -> SpectrogramImage {
    let frames = s.frames();
    let values: Vec<f64> = s.values().chunks(frames).flat_map(|row| roll(row, k)).collect();
    SpectrogramImage::new(values, s.mel_bins(), frames).expect("rotation preserves shape")
}

/// Weak/strong augmentation knobs. Both operate on spectrograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Largest weak time shift as a fraction of the frame count.
    pub weak_max_shift: f64,
    /// Number of masked time bands is drawn from `1..=max_time_bands`.
    pub max_time_bands: usize,
    pub max_freq_bands: usize,
    /// Largest band width as a fraction of the frame / mel-bin count.
    pub max_band_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { weak_max_shift: 0.05, max_time_bands: 2, max_freq_bands: 2, max_band_fraction: 0.075 }
    }
}

pub fn weak_augment(s: &SpectrogramImage, cfg: &AugmentConfig, rng: &mut Rng) -> SpectrogramImage {
    let max_shift = (cfg.weak_max_shift * s.frames() as f64).floor() as i64;
    let k = if max_shift > 0 { rng.random_range(-max_shift..=max_shift) as isize } else { 0 };
    roll_frames(s, k)
}

/// Weak augmentation followed by time and frequency band masking. Masked
/// cells are set to the image mean (zero after mean subtraction).
pub fn strong_augment(s: &SpectrogramImage, cfg: &AugmentConfig, rng: &mut Rng) -> SpectrogramImage {
    let mut out = weak_augment(s, cfg, rng);
    let mask = draw_mask(out.mel_bins(), out.frames(), cfg, rng);
    let mean = out.values().iter().sum::<f64>() / out.values().len() as f64;
    for (v, &m) in out.values_mut().iter_mut().zip(&mask) {
        if m {
            *v = mean;
        }
    }
    out
}

/// Boolean mask (`true` = masked), row-major by mel bin.
pub fn draw_mask(mel_bins: usize, frames: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<bool> {
    let mut mask = vec![false; mel_bins * frames];
    let time_w = ((cfg.max_band_fraction * frames as f64).floor() as usize).max(1);
    let freq_w = ((cfg.max_band_fraction * mel_bins as f64).floor() as usize).max(1);
    let n_time = rng.random_range(1..=cfg.max_time_bands.max(1));
    for _ in 0..n_time {
        let w = rng.random_range(1..=time_w.min(frames));
        let start = rng.random_range(0..=frames - w);
        for row in 0..mel_bins {
            mask[row * frames + start..row * frames + start + w].iter_mut().for_each(|m| *m = true);
        }
    }
    let n_freq = rng.random_range(1..=cfg.max_freq_bands.max(1));
    for _ in 0..n_freq {
        let w = rng.random_range(1..=freq_w.min(mel_bins));
        let start = rng.random_range(0..=mel_bins - w);
        mask[start * frames..(start + w) * frames].iter_mut().for_each(|m| *m = true);
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn image(m: usize, f: usize) -> SpectrogramImage {
        SpectrogramImage::new((0..m * f).map(|i| (i as f64 * 0.37).sin()).collect(), m, f).unwrap()
    }

    #[test]
    fn time_shift_contract() {
        let x = Waveform::new((1..=16000).map(|i| i as f64).collect(), 16000).unwrap();
        assert_eq!(time_shift(&x, ShiftClass::NoShift, 0.1), x);
        let left = time_shift(&x, ShiftClass::LeftShift, 0.1);
        // Rotation by 1600 positions.
        assert_eq!(left.samples()[0], 1601.0);
        let right = time_shift(&x, ShiftClass::RightShift, 0.1);
        assert_eq!(right.samples()[1600], 1.0);
        assert_eq!(time_shift(&left, ShiftClass::RightShift, 0.1), x);
    }

    #[test]
    fn zero_weak_shift_is_identity() {
        let s = image(8, 20);
        assert_eq!(roll_frames(&s, 0), s);
        let cfg = AugmentConfig { weak_max_shift: 0.0, ..AugmentConfig::default() };
        assert_eq!(weak_augment(&s, &cfg, &mut rng_from_seed(1)), s);
    }

    #[test]
    fn strong_preserves_shape_and_finiteness() {
        let s = image(32, 32);
        let cfg = AugmentConfig::default();
        for seed in 0..50 {
            let out = strong_augment(&s, &cfg, &mut rng_from_seed(seed));
            assert_eq!(out.shape(), s.shape());
            assert!(out.values().iter().all(|v| v.is_finite()));
        }
    }
}
