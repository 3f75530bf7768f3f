//! Synthetic audio for the TOY corpus and stand-ins for the three recorded
//! background noises.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::Waveform;
use crate::corruption::{NoiseBank, NoiseSource};
use crate::error::Result;
use crate::seed::{keyed_rng, Rng};

/// Fundamental of class `k` out of `c`, spread over 2.5 octaves from 200 Hz.
pub fn class_fundamental(k: usize, c: usize) -> f64 {
    200.0 * 2f64.powf(2.5 * k as f64 / (c - 1).max(1) as f64)
}

const BURST_S: f64 = 0.4;
/// Standard deviation of the white noise floor under every clip.
const FLOOR_STD: f64 = 0.05;

/// One second of a harmonic tone burst for class `label`: a Hann-shaped
/// 0.4 s burst centred near the middle of the clip over a white noise floor.
pub fn toy_waveform(label: usize, c: usize, sample_rate: u32, rng: &mut Rng) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let n = sample_rate as usize;
    let f0 = class_fundamental(label, c) * (1.0 + rng.random_range(-0.02..0.02));
    let centre = 0.5 + rng.random_range(-0.05..0.05);
    let amp = rng.random_range(0.2..0.5);
    let phases: [f64; 3] = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let (start, end) = (centre - BURST_S / 2.0, centre + BURST_S / 2.0);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let mut v = 0.0;
            if t > start && t < end {
                let env = 0.5 - 0.5 * (2.0 * PI * (t - start) / BURST_S).cos();
                for (h, phase) in phases.iter().enumerate() {
                    let f = f0 * (h + 1) as f64;
                    if f < 0.45 * sr {
                        v += 0.5f64.powi(h as i32) * (2.0 * PI * f * t + phase).sin();
                    }
                }
                v *= amp * env;
            }
            let floor: f64 = StandardNormal.sample(rng);
            v + FLOOR_STD * floor
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Clattering: sparse decaying rings at random pitches over low hiss.
fn dishes(n: usize, sr: f64, rng: &mut Rng) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).map(|_| 0.02 * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    let events = (n as f64 / sr * 6.0) as usize;
    for _ in 0..events {
        let at = rng.random_range(0..n);
        let f = rng.random_range(800.0..3500.0);
        let decay = rng.random_range(0.02..0.06);
        let gain = rng.random_range(0.3..1.0);
        let len = ((decay * 5.0 * sr) as usize).min(n - at);
        for j in 0..len {
            let t = j as f64 / sr;
            out[at + j] += gain * (-t / decay).exp() * (2.0 * PI * f * t).sin();
        }
    }
    out
}

/// Pedalling hum: a wandering low fundamental with a dense harmonic comb,
/// amplitude-modulated at the pedalling rate.
fn bike(n: usize, sr: f64, rng: &mut Rng) -> Vec<f64> {
    let base = rng.random_range(85.0..100.0);
    let wobble_rate = rng.random_range(0.1..0.3);
    let pedal = rng.random_range(1.0..1.5);
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f = base * (1.0 + 0.05 * (2.0 * PI * wobble_rate * t).sin());
            phase += 2.0 * PI * f / sr;
            let mut v = 0.0;
            let mut h = 1;
            while f * h as f64 <= 0.45 * sr {
                v += (h as f64 * phase).sin() / h as f64;
                h += 1;
            }
            let env = 1.0 + 0.5 * (2.0 * PI * pedal * t).sin();
            let hiss: f64 = StandardNormal.sample(rng);
            env * v + 0.1 * hiss
        })
        .collect()
}

/// Running water: low-passed broadband noise with a slow flutter.
fn tap(n: usize, sr: f64, rng: &mut Rng) -> Vec<f64> {
    let mut y = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let w: f64 = StandardNormal.sample(rng);
            y = 0.6 * y + 0.4 * w;
            y * (1.0 + 0.2 * (2.0 * PI * 3.0 * t).sin())
        })
        .collect()
}

/// Twenty-second synthetic recordings for dd, eb and rt.
pub fn toy_noise_bank(sample_rate: u32, seed: u64) -> Result<NoiseBank> {
    let n = 20 * sample_rate as usize;
    let sr = sample_rate as f64;
    let mut bank = NoiseBank::new();
    for src in NoiseSource::BACKGROUND {
        let mut rng = keyed_rng(seed, &format!("toy-noise-{}", src.code()));
        let samples = match src {
            NoiseSource::DoingDishes => dishes(n, sr, &mut rng),
            NoiseSource::ExerciseBike => bike(n, sr, &mut rng),
            _ => tap(n, sr, &mut rng),
        };
        bank.insert(src, Waveform::new(samples, sample_rate)?);
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn burst_is_centred() {
        let w = toy_waveform(3, 10, 8000, &mut rng_from_seed(1)).unwrap();
        let s = w.samples();
        let edge: f64 = s[..2000].iter().map(|v| v * v).sum();
        let mid: f64 = s[3000..5000].iter().map(|v| v * v).sum();
        assert!(mid > 10.0 * edge);
    }

    #[test]
    fn bank_has_three_sources() {
        let bank = toy_noise_bank(8000, 0).unwrap();
        assert_eq!(bank.len(), 3);
        assert!(bank.values().all(|w| w.len() == 160_000 && w.energy() > 0.0));
    }
}
