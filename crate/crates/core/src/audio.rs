//! Mono waveforms, WAV I/O and sample-rate conversion.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(TtaError::InvalidWaveform("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(TtaError::InvalidWaveform("waveform is empty".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(TtaError::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Squared L2 norm.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub(crate) fn from_parts_unchecked(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    /// Reads a WAV file, averaging channels down to mono. Integer PCM is
    /// scaled to [-1, 1).
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => {
                reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?
            }
            hound::SampleFormat::Int => {
                let full_scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / full_scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        let mono = interleaved.chunks(channels).map(|fr| fr.iter().sum::<f64>() / channels as f64).collect();
        Self::new(mono, spec.sample_rate)
    }

    pub fn write_wav(&self, path: impl AsRef<Path>, format: WavFormat) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: match format {
                WavFormat::Pcm16 => 16,
                WavFormat::Float32 => 32,
            },
            sample_format: match format {
                WavFormat::Pcm16 => hound::SampleFormat::Int,
                WavFormat::Float32 => hound::SampleFormat::Float,
            },
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            match format {
                WavFormat::Pcm16 => writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?,
                WavFormat::Float32 => writer.write_sample(s as f32)?,
            }
        }
        writer.finalize()?;
        Ok(())
    }

    /// Converts to `target_rate` by windowed-sinc interpolation.
    pub fn resample(&self, target_rate: u32) -> Result<Waveform> {
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        if target_rate == 0 {
            return Err(TtaError::InvalidWaveform("target sample rate must be positive".into()));
        }
        let ratio = target_rate as f64 / self.sample_rate as f64;
        let out_len = ((self.samples.len() as f64) * ratio).round().max(1.0) as usize;
        // Low-pass at the lower Nyquist when downsampling.
        let cutoff = ratio.min(1.0);
        const HALF_TAPS: f64 = 16.0;
        let half_width = HALF_TAPS / cutoff;
        let n = self.samples.len() as isize;
        let out = (0..out_len)
            .map(|i| {
                let center = i as f64 / ratio;
                let lo = (center - half_width).ceil() as isize;
                let hi = (center + half_width).floor() as isize;
                let mut acc = 0.0;
                for j in lo.max(0)..=hi.min(n - 1) {
                    let t = center - j as f64;
                    let window = 0.5 + 0.5 * (PI * t / half_width).cos();
                    acc += self.samples[j as usize] * cutoff * sinc(cutoff * t) * window;
                }
                acc
            })
            .collect();
        Waveform::new(out, target_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_waveforms() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16000).is_err());
    }

    #[test]
    fn wav_round_trip_float_and_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f64> = (0..800).map(|i| 0.5 * (i as f64 * 0.05).sin()).collect();
        let w = Waveform::new(samples, 8000).unwrap();
        let fpath = dir.path().join("f.wav");
        w.write_wav(&fpath, WavFormat::Float32).unwrap();
        let back = Waveform::read_wav(&fpath).unwrap();
        assert_eq!(back.sample_rate(), 8000);
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
        let ipath = dir.path().join("i.wav");
        w.write_wav(&ipath, WavFormat::Pcm16).unwrap();
        let back = Waveform::read_wav(&ipath).unwrap();
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn resampling_preserves_a_low_tone() {
        let sr = 16000;
        let tone: Vec<f64> = (0..sr).map(|i| (2.0 * PI * 440.0 * i as f64 / sr as f64).sin()).collect();
        let w = Waveform::new(tone, sr as u32).unwrap();
        let down = w.resample(8000).unwrap();
        assert_eq!(down.len(), 8000);
        // Compare away from the edges.
        for i in 200..7800 {
            let expect = (2.0 * PI * 440.0 * i as f64 / 8000.0).sin();
            assert!((down.samples()[i] - expect).abs() < 2e-2, "sample {i}");
        }
        let up = down.resample(16000).unwrap();
        assert_eq!(up.len(), 16000);
    }
}
