use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Result, TtaError};
use crate::nn::Tensor;
use crate::seed::hash_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    /// Reflect-pad by `n_fft / 2` on both sides so frame `t` is centred on sample `t * hop`.
    pub center: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { n_fft: 400, hop: 160, mel_bins: 64, fmin: 0.0, fmax: 8000.0, log_floor: 1e-6, center: true }
    }
}

impl FeatureConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: &str| Err(TtaError::InvalidFeatureConfig(m.to_string()));
        if self.hop == 0 || self.hop > self.n_fft {
            return bad("hop must satisfy 0 < hop <= n_fft");
        }
        if self.mel_bins == 0 {
            return bad("mel_bins must be positive");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return bad("fmin must be below fmax");
        }
        if self.fmax > sample_rate as f64 / 2.0 {
            return bad("fmax exceeds the Nyquist frequency");
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Frame count for a waveform of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        if self.center {
            1 + len / self.hop
        } else {
            1 + (len - self.n_fft) / self.hop
        }
    }

    pub fn hash(&self) -> String {
        hash_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Log-mel image, `mel_bins x frames`, row-major by mel bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramImage {
    values: Vec<f64>,
    mel_bins: usize,
    frames: usize,
}

impl SpectrogramImage {
    pub fn new(values: Vec<f64>, mel_bins: usize, frames: usize) -> Result<Self> {
        if values.len() != mel_bins * frames {
            return Err(TtaError::Shape(format!(
                "{} values for a {mel_bins}x{frames} spectrogram",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TtaError::Shape("spectrogram contains non-finite values".into()));
        }
        Ok(Self { values, mel_bins, frames })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mel_bins(&self) -> usize {
        self.mel_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.mel_bins, self.frames)
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// `[B, 1, mel_bins, frames]` batch tensor.
    pub fn batch_tensor(items: &[&SpectrogramImage]) -> Tensor {
        assert!(!items.is_empty(), "empty batch");
        let (m, f) = items[0].shape();
        let mut data = Vec::with_capacity(items.len() * m * f);
        for s in items {
            assert_eq!(s.shape(), (m, f), "batch of mixed spectrogram shapes");
            data.extend_from_slice(&s.values);
        }
        Tensor::new(vec![items.len(), 1, m, f], data)
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &SpectrogramImage, lambda: f64) -> SpectrogramImage {
        assert_eq!(self.shape(), other.shape());
        let values = self.values.iter().zip(&other.values).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
        SpectrogramImage { values, mel_bins: self.mel_bins, frames: self.frames }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `mel_bins x (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &FeatureConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_freqs = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let points: Vec<f64> =
        (0..cfg.mel_bins + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64)).collect();
    (0..cfg.mel_bins)
        .map(|m| {
            let (l, c, u) = (points[m], points[m + 1], points[m + 2]);
            (0..n_freqs)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / cfg.n_fft as f64;
                    let up = (f - l) / (c - l);
                    let down = (u - f) / (u - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Reusable STFT + mel projection for one config and sample rate.
pub struct MelExtractor {
    cfg: FeatureConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let window = (0..cfg.n_fft).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.n_fft as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { cfg: cfg.clone(), sample_rate, window, filters: mel_filterbank(cfg, sample_rate), fft })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn extract(&self, x: &Waveform) -> Result<SpectrogramImage> {
        let cfg = &self.cfg;
        if x.sample_rate() != self.sample_rate {
            return Err(TtaError::SampleRateMismatch(x.sample_rate(), self.sample_rate));
        }
        if x.len() < cfg.n_fft {
            return Err(TtaError::TooShort { len: x.len(), n_fft: cfg.n_fft });
        }
        let padded = if cfg.center { reflect_pad(x.samples(), cfg.n_fft / 2) } else { x.samples().to_vec() };
        let frames = cfg.frames(x.len());
        let n_freqs = cfg.n_fft / 2 + 1;
        let mut values = vec![0.0; cfg.mel_bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_freqs];
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                values[m * frames + t] = (e + cfg.log_floor).ln();
            }
        }
        SpectrogramImage::new(values, cfg.mel_bins, frames)
    }
}

/// Log-mel spectrogram of `x`.
pub fn mel_spectrogram(x: &Waveform, cfg: &FeatureConfig) -> Result<SpectrogramImage> {
    MelExtractor::new(cfg, x.sample_rate())?.extract(x)
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (-(pad as isize)..n + pad as isize)
        .map(|i| {
            let mut j = i;
            // Reflect without repeating the edge sample; fall back to zero
            // when the signal is too short to mirror.
            if j < 0 {
                j = -j;
            }
            if j >= n {
                j = 2 * (n - 1) - j;
            }
            if (0..n).contains(&j) {
                x[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}
