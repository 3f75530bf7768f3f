//! Background-noise and Gaussian corruption of clean test audio.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Result, TtaError};
use crate::seed::{rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseSource {
    /// "doing the dishes"
    #[serde(rename = "dd")]
    DoingDishes,
    /// "exercise bike"
    #[serde(rename = "eb")]
    ExerciseBike,
    /// "running tap"
    #[serde(rename = "rt")]
    RunningTap,
    #[serde(rename = "gauss")]
    Gaussian,
}

impl NoiseSource {
    pub const BACKGROUND: [NoiseSource; 3] =
        [NoiseSource::DoingDishes, NoiseSource::ExerciseBike, NoiseSource::RunningTap];

    pub fn code(self) -> &'static str {
        match self {
            NoiseSource::DoingDishes => "dd",
            NoiseSource::ExerciseBike => "eb",
            NoiseSource::RunningTap => "rt",
            NoiseSource::Gaussian => "gauss",
        }
    }

    /// File stem of the matching recording in SpeechCommands' `_background_noise_`.
    pub fn recording_stem(self) -> Option<&'static str> {
        match self {
            NoiseSource::DoingDishes => Some("doing_the_dishes"),
            NoiseSource::ExerciseBike => Some("exercise_bike"),
            NoiseSource::RunningTap => Some("running_tap"),
            NoiseSource::Gaussian => None,
        }
    }
}

impl fmt::Display for NoiseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for NoiseSource {
    type Err = TtaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dd" => Ok(NoiseSource::DoingDishes),
            "eb" => Ok(NoiseSource::ExerciseBike),
            "rt" => Ok(NoiseSource::RunningTap),
            "gauss" | "gaussian" => Ok(NoiseSource::Gaussian),
            other => Err(TtaError::UnknownNoiseSource(other.to_string())),
        }
    }
}

/// Severity of a corruption: an SNR for recorded noise, a scale for Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    SnrDb(f64),
    Lambda(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub noise_source: NoiseSource,
    pub severity: Severity,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn background(noise_source: NoiseSource, snr_db: f64, seed: u64) -> Self {
        Self { noise_source, severity: Severity::SnrDb(snr_db), seed }
    }

    pub fn gaussian(lambda: f64, seed: u64) -> Self {
        Self { noise_source: NoiseSource::Gaussian, severity: Severity::Lambda(lambda), seed }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.noise_source, self.severity) {
            (NoiseSource::Gaussian, Severity::Lambda(l)) => {
                if (0.0..=1.0).contains(&l) {
                    Ok(())
                } else {
                    Err(TtaError::LambdaOutOfRange(l))
                }
            }
            (NoiseSource::Gaussian, Severity::SnrDb(_)) => {
                Err(TtaError::InvalidCorruptionSpec("gaussian corruption takes a lambda, not an SNR".into()))
            }
            (_, Severity::SnrDb(snr)) if snr.is_nan() => {
                Err(TtaError::InvalidCorruptionSpec("SNR must not be NaN".into()))
            }
            (_, Severity::SnrDb(_)) => Ok(()),
            (src, Severity::Lambda(_)) => {
                Err(TtaError::InvalidCorruptionSpec(format!("{src} noise takes an SNR, not a lambda")))
            }
        }
    }
}

/// A mix together with the noise gain that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub waveform: Waveform,
    pub noise_scale: f64,
    pub realized_snr_db: f64,
}

/// Gain applied to `noise` so that `clean` over the scaled noise has the
/// requested SNR.
pub fn noise_scale(clean_energy: f64, noise_energy: f64, snr_db: f64) -> f64 {
    (clean_energy / noise_energy * 10f64.powf(-snr_db / 10.0)).sqrt()
}

/// Realized SNR in dB of `clean` against `noise * scale`.
pub fn realized_snr_db(clean: &[f64], noise: &[f64], scale: f64) -> f64 {
    let es: f64 = clean.iter().map(|v| v * v).sum();
    let en: f64 = noise.iter().map(|v| (v * scale) * (v * scale)).sum();
    10.0 * (es / en).log10()
}

/// `clean + noise * sqrt(|clean|^2 / |noise|^2 * 10^(-snr/10))`.
pub fn mix_noise(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    mix_noise_detailed(clean, noise, snr_db).map(|m| m.waveform)
}

pub fn mix_noise_detailed(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    if clean.len() != noise.len() {
        return Err(TtaError::LengthMismatch { clean: clean.len(), noise: noise.len() });
    }
    if clean.sample_rate() != noise.sample_rate() {
        return Err(TtaError::SampleRateMismatch(clean.sample_rate(), noise.sample_rate()));
    }
    let en = noise.energy();
    if en <= 0.0 {
        return Err(TtaError::ZeroEnergyNoise);
    }
    let es = clean.energy();
    if es <= 0.0 {
        return Err(TtaError::ZeroEnergySignal);
    }
    let scale = noise_scale(es, en, snr_db);
    let mixed = clean.samples().iter().zip(noise.samples()).map(|(x, n)| x + n * scale).collect();
    let realized = realized_snr_db(clean.samples(), noise.samples(), scale);
    Ok(Mixture {
        waveform: Waveform::from_parts_unchecked(mixed, clean.sample_rate()),
        noise_scale: scale,
        realized_snr_db: realized,
    })
}

/// Samples in a clip of `duration_s` seconds at `sample_rate`.
pub fn clip_len(duration_s: f64, sample_rate: u32) -> usize {
    (duration_s * sample_rate as f64).round() as usize
}

/// Contiguous clip of `duration_s` seconds at a uniformly drawn offset.
/// Returns the clip and its offset in samples.
pub fn random_clip(long_noise: &Waveform, duration_s: f64, rng: &mut Rng) -> Result<(Waveform, usize)> {
    random_clip_samples(long_noise, clip_len(duration_s, long_noise.sample_rate()), rng)
}

pub fn random_clip_samples(long_noise: &Waveform, len: usize, rng: &mut Rng) -> Result<(Waveform, usize)> {
    if len == 0 || len > long_noise.len() {
        return Err(TtaError::ClipTooLong { requested: len, available: long_noise.len() });
    }
    let offset = rng.random_range(0..=long_noise.len() - len);
    let clip = long_noise.samples()[offset..offset + len].to_vec();
    Ok((Waveform::from_parts_unchecked(clip, long_noise.sample_rate()), offset))
}

/// `x + lambda * g` with `g ~ N(0, 1)` elementwise.
pub fn gaussian_shift(x: &Waveform, lambda: f64, rng: &mut Rng) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TtaError::LambdaOutOfRange(lambda));
    }
    let out = x
        .samples()
        .iter()
        .map(|&v| {
            let g: f64 = StandardNormal.sample(rng);
            v + lambda * g
        })
        .collect();
    Ok(Waveform::from_parts_unchecked(out, x.sample_rate()))
}

/// One corrupted test sample and how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedSample {
    pub waveform: Waveform,
    pub noise_offset: Option<usize>,
    pub realized_snr_db: Option<f64>,
}

pub type NoiseBank = HashMap<NoiseSource, Waveform>;

/// Corrupts every sample independently, consuming a single rng stream seeded
/// from `spec.seed` in sample order. Recorded noise is resampled to the
/// clean rate when the rates differ, and a fresh clip is drawn per sample.
pub fn corrupt_set(test_set: &[Waveform], spec: &CorruptionSpec, noise_bank: &NoiseBank) -> Result<Vec<CorruptedSample>> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    match spec.severity {
        Severity::Lambda(lambda) => test_set
            .iter()
            .map(|x| {
                Ok(CorruptedSample {
                    waveform: gaussian_shift(x, lambda, &mut rng)?,
                    noise_offset: None,
                    realized_snr_db: None,
                })
            })
            .collect(),
        Severity::SnrDb(snr_db) => {
            if test_set.is_empty() {
                return Ok(Vec::new());
            }
            let raw = noise_bank
                .get(&spec.noise_source)
                .ok_or_else(|| TtaError::UnknownNoiseSource(spec.noise_source.to_string()))?;
            let mut resampled: HashMap<u32, Waveform> = HashMap::new();
            test_set
                .iter()
                .map(|x| {
                    let rate = x.sample_rate();
                    if let std::collections::hash_map::Entry::Vacant(slot) = resampled.entry(rate) {
                        slot.insert(raw.resample(rate)?);
                    }
                    let noise = &resampled[&rate];
                    let (clip, offset) = random_clip_samples(noise, x.len(), &mut rng)?;
                    let mix = mix_noise_detailed(x, &clip, snr_db)?;
                    Ok(CorruptedSample {
                        waveform: mix.waveform,
                        noise_offset: Some(offset),
                        realized_snr_db: Some(mix.realized_snr_db),
                    })
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn wave(seed: u64, n: usize) -> Waveform {
        let mut rng = rng_from_seed(seed);
        let s = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn equal_energy_at_zero_db_gives_unit_scale() {
        let clean = Waveform::new(vec![1.0, -1.0, 1.0, -1.0], 16000).unwrap();
        let noise = Waveform::new(vec![0.0, 2.0, 0.0, 0.0], 16000).unwrap();
        let m = mix_noise_detailed(&clean, &noise, 0.0).unwrap();
        assert_eq!(m.noise_scale, 1.0);
        assert_eq!(m.waveform.samples(), &[1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn infinite_snr_returns_clean() {
        let clean = wave(1, 100);
        let noise = wave(2, 100);
        let m = mix_noise_detailed(&clean, &noise, f64::INFINITY).unwrap();
        assert_eq!(m.noise_scale, 0.0);
        assert_eq!(m.waveform.samples(), clean.samples());
    }

    #[test]
    fn realized_snr_matches_request() {
        let clean = wave(3, 1600);
        let noise = wave(4, 1600);
        let m = mix_noise_detailed(&clean, &noise, 10.0).unwrap();
        // Independent energy ratio on the decomposition.
        let es: f64 = clean.samples().iter().map(|v| v * v).sum();
        let en: f64 = noise.samples().iter().map(|v| (v * m.noise_scale).powi(2)).sum();
        assert!((10.0 * (es / en).log10() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn mix_errors() {
        let a = wave(1, 10);
        let b = wave(2, 11);
        assert!(matches!(mix_noise(&a, &b, 3.0), Err(TtaError::LengthMismatch { .. })));
        let zero = Waveform::new(vec![0.0; 10], 16000).unwrap();
        assert!(matches!(mix_noise(&a, &zero, 3.0), Err(TtaError::ZeroEnergyNoise)));
        assert!(matches!(mix_noise(&zero, &a, 3.0), Err(TtaError::ZeroEnergySignal)));
    }

    #[test]
    fn clip_lengths_and_offsets() {
        let long = wave(5, 16000 * 60);
        let mut rng = rng_from_seed(9);
        let (clip, _) = random_clip(&long, 1.0, &mut rng).unwrap();
        assert_eq!(clip.len(), 16000);

        let short = wave(6, 16000);
        let (clip, off) = random_clip(&short, 1.0, &mut rng).unwrap();
        assert_eq!(off, 0);
        assert_eq!(clip.samples(), short.samples());

        assert!(matches!(random_clip(&short, 2.0, &mut rng), Err(TtaError::ClipTooLong { .. })));

        let run = |s| {
            let mut r = rng_from_seed(s);
            (0..5).map(|_| random_clip(&long, 1.0, &mut r).unwrap().1).collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn gaussian_shift_identity_and_range() {
        let x = wave(7, 500);
        let mut rng = rng_from_seed(1);
        assert_eq!(gaussian_shift(&x, 0.0, &mut rng).unwrap(), x);
        assert!(matches!(gaussian_shift(&x, 1.5, &mut rng), Err(TtaError::LambdaOutOfRange(_))));
        assert!(matches!(gaussian_shift(&x, -0.1, &mut rng), Err(TtaError::LambdaOutOfRange(_))));
    }

    #[test]
    fn gaussian_shift_has_requested_spread() {
        let x = Waveform::new(vec![0.25; 200_000], 16000).unwrap();
        let mut rng = rng_from_seed(2);
        let y = gaussian_shift(&x, 0.005, &mut rng).unwrap();
        let d: Vec<f64> = y.samples().iter().zip(x.samples()).map(|(a, b)| a - b).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.005).abs() / 0.005 < 0.05, "std {std}");

        let mut rng = rng_from_seed(3);
        let y = gaussian_shift(&x, 1.0, &mut rng).unwrap();
        let mean = y.samples().iter().zip(x.samples()).map(|(a, b)| a - b).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn corrupt_set_is_deterministic_and_exact() {
        let clean: Vec<Waveform> = (0..20).map(|i| wave(100 + i, 16000)).collect();
        let mut bank = NoiseBank::new();
        bank.insert(NoiseSource::ExerciseBike, wave(200, 16000 * 5));
        let spec = CorruptionSpec::background(NoiseSource::ExerciseBike, 10.0, 42);
        let a = corrupt_set(&clean, &spec, &bank).unwrap();
        let b = corrupt_set(&clean, &spec, &bank).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((s.realized_snr_db.unwrap() - 10.0).abs() < 1e-6);
        }
        assert!(corrupt_set(&[], &spec, &bank).unwrap().is_empty());
        let missing = CorruptionSpec::background(NoiseSource::RunningTap, 10.0, 42);
        assert!(matches!(corrupt_set(&clean, &missing, &bank), Err(TtaError::UnknownNoiseSource(_))));
    }

    #[test]
    fn corrupt_set_resamples_noise_to_clean_rate() {
        let clean: Vec<Waveform> = (0..3)
            .map(|i| {
                let w = wave(300 + i, 48000);
                Waveform::new(w.into_samples(), 48000).unwrap()
            })
            .collect();
        let mut bank = NoiseBank::new();
        bank.insert(NoiseSource::DoingDishes, wave(301, 16000 * 3));
        let spec = CorruptionSpec::background(NoiseSource::DoingDishes, 3.0, 1);
        let out = corrupt_set(&clean, &spec, &bank).unwrap();
        for s in &out {
            assert_eq!(s.waveform.sample_rate(), 48000);
            assert_eq!(s.waveform.len(), 48000);
            assert!((s.realized_snr_db.unwrap() - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(CorruptionSpec::gaussian(0.5, 0).validate().is_ok());
        assert!(CorruptionSpec::gaussian(1.5, 0).validate().is_err());
        assert!(CorruptionSpec { noise_source: NoiseSource::Gaussian, severity: Severity::SnrDb(3.0), seed: 0 }
            .validate()
            .is_err());
        assert!(CorruptionSpec { noise_source: NoiseSource::RunningTap, severity: Severity::Lambda(0.1), seed: 0 }
            .validate()
            .is_err());
    }
}
