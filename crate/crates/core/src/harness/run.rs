//! Experiment cells, pre-training, and the per-cell adapt-and-evaluate run.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::{Corpus, DatasetId, Split};
use crate::adapt::{error_rate, multi_epoch_adapt, OnlineAdaptState, OnlineConfig, OnlineMode};
use crate::audio::Waveform;
use crate::conmix::{stda_adapt_observed, AblationVariant, PlVariant, StdaConfig};
use crate::corruption::{corrupt_set, CorruptionSpec, NoiseBank, NoiseSource};
use crate::error::{Result, TtaError};
use crate::features::{time_shift, FeatureConfig, MelExtractor, ShiftClass};
use crate::models::train::{accuracy, input_batch};
use crate::models::{
    load_checkpoint, pretrain_classifier, pretrain_ttt, AdaptableModel, Example, ForwardMode, Head, ModelConfig,
    ModelFamily, TrainHyper, TrainReport,
};
use crate::seed::{hash_hex, sub_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodId {
    Tent,
    Norm,
    Ttt,
    Conmix,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [MethodId::Tent, MethodId::Norm, MethodId::Ttt, MethodId::Conmix];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Tent => "tent",
            MethodId::Norm => "norm",
            MethodId::Ttt => "ttt",
            MethodId::Conmix => "conmix",
        }
    }

    pub fn family(self) -> ModelFamily {
        match self {
            MethodId::Tent | MethodId::Norm => ModelFamily::BnResNet,
            MethodId::Ttt => ModelFamily::DualHeadResNet,
            MethodId::Conmix => ModelFamily::GnTransformer,
        }
    }

    pub fn online_mode(self) -> Option<OnlineMode> {
        match self {
            MethodId::Tent => Some(OnlineMode::Tent),
            MethodId::Norm => Some(OnlineMode::Norm),
            MethodId::Ttt => Some(OnlineMode::Ttt),
            MethodId::Conmix => None,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| TtaError::Config(format!("unknown method {s:?}")))
    }
}

/// Sample rate the pipeline works at for each corpus.
pub fn working_rate(dataset: DatasetId) -> u32 {
    match dataset {
        DatasetId::Toy => 8_000,
        _ => 16_000,
    }
}

pub fn feature_preset(dataset: DatasetId) -> FeatureConfig {
    match dataset {
        DatasetId::Toy => FeatureConfig { n_fft: 256, hop: 256, mel_bins: 32, fmin: 0.0, fmax: 4000.0, log_floor: 1e-6, center: true },
        _ => FeatureConfig::default(),
    }
}

/// Model size per family. TOY uses narrow, shallow networks.
pub fn model_preset(method: MethodId, dataset: DatasetId, num_classes: usize, features: &FeatureConfig) -> ModelConfig {
    let rate = working_rate(dataset) as usize;
    let cfg = ModelConfig::new(method.family(), num_classes, features.mel_bins, features.frames(rate));
    if dataset != DatasetId::Toy {
        return cfg;
    }
    match method.family() {
        ModelFamily::BnResNet => cfg.with_width(8).with_depth(2),
        ModelFamily::DualHeadResNet => cfg.with_width(8).with_depth(2),
        ModelFamily::GnTransformer => cfg.with_width(16).with_depth(1),
    }
}

pub fn train_preset(method: MethodId, dataset: DatasetId) -> TrainHyper {
    let mut h = TrainHyper::default();
    if dataset == DatasetId::Toy {
        h.epochs = if method == MethodId::Ttt { 12 } else { 10 };
    }
    h
}

/// CoNMix settings per corpus: no pseudo-label term on AM, the NLL variant
/// on the SpeechCommands family and TOY.
pub fn stda_profile(dataset: DatasetId) -> StdaConfig {
    let pl_variant = if dataset == DatasetId::Am { PlVariant::None } else { PlVariant::Upd };
    StdaConfig { pl_variant, ..Default::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub method: MethodId,
    pub dataset: DatasetId,
    pub noise: NoiseSource,
    /// SNR in dB for recorded noise; the Gaussian scale for `gauss`.
    pub severity: f64,
    pub seed: u64,
    pub epochs: usize,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub online: OnlineConfig,
    pub stda: StdaConfig,
    /// Time-shift fraction of the pretext task.
    pub shift_fraction: f64,
    /// Set for CoNMix ablation runs.
    #[serde(default)]
    pub variant: Option<AblationVariant>,
}

impl ExperimentCell {
    pub fn new(method: MethodId, dataset: DatasetId, num_classes: usize, noise: NoiseSource, severity: f64, seed: u64) -> Self {
        let features = feature_preset(dataset);
        let model = model_preset(method, dataset, num_classes, &features);
        let online = OnlineConfig::new(method.online_mode().unwrap_or(OnlineMode::Norm));
        let mut stda = stda_profile(dataset);
        stda.seed = sub_seed(seed, "adapter");
        Self { method, dataset, noise, severity, seed, epochs: 1, features, model, online, stda, shift_fraction: 0.2, variant: None }
    }

    /// CoNMix cell running one ablation variant.
    pub fn with_variant(mut self, variant: AblationVariant) -> Self {
        self.stda = self.stda.with_variant(variant);
        self.variant = Some(variant);
        self
    }

    pub fn id(&self) -> String {
        let mut id = format!("{}/{}/{}/{}/seed{}", self.method, self.dataset, self.noise, self.severity, self.seed);
        if let Some(v) = self.variant {
            id = format!("{id}/{v}");
        }
        id
    }

    pub fn corruption(&self) -> CorruptionSpec {
        let seed = sub_seed(self.seed, "corruption");
        match self.noise {
            NoiseSource::Gaussian => CorruptionSpec::gaussian(self.severity, seed),
            src => CorruptionSpec::background(src, self.severity, seed),
        }
    }

    pub fn config_hash(&self) -> String {
        hash_hex(serde_json::to_string(self).expect("cell serializes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedFanout {
    pub master: u64,
    pub corruption: u64,
    pub adapter: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: ExperimentCell,
    /// Mean adaptation loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    /// Pseudo-label loss per epoch (CoNMix only).
    pub epoch_pl_losses: Vec<f64>,
    pub epoch_error_rates: Vec<f64>,
    pub unadapted_error: f64,
    pub adapted_error: f64,
    pub batch_size: usize,
    pub wall_clock_s: f64,
    pub config_hash: String,
    pub provenance: String,
    pub seeds: SeedFanout,
}

impl RunRecord {
    pub fn delta(&self) -> f64 {
        self.adapted_error - self.unadapted_error
    }
}

/// Percentage with two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn write_records(path: &Path, records: &[RunRecord], append: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Crops or zero-pads to exactly one second at `rate`, resampling first.
pub fn fit_clip(x: &Waveform, rate: u32) -> Result<Waveform> {
    let x = if x.sample_rate() == rate { x.clone() } else { x.resample(rate)? };
    let n = rate as usize;
    if x.len() == n {
        return Ok(x);
    }
    let mut s = x.into_samples();
    s.resize(n, 0.0);
    Waveform::new(s, rate)
}

/// Spectrogram examples; with `shift_fraction` each also carries its left-
/// and right-rotated views.
pub fn prepare_examples(
    waves: &[Waveform],
    labels: &[usize],
    features: &FeatureConfig,
    shift_fraction: Option<f64>,
) -> Result<Vec<Example>> {
    let Some(first) = waves.first() else { return Ok(Vec::new()) };
    let extractor = MelExtractor::new(features, first.sample_rate())?;
    waves
        .iter()
        .zip(labels)
        .map(|(w, &y)| {
            let mut e = Example::new(extractor.extract(w)?, y);
            if let Some(f) = shift_fraction {
                let left = extractor.extract(&time_shift(w, ShiftClass::LeftShift, f))?;
                let right = extractor.extract(&time_shift(w, ShiftClass::RightShift, f))?;
                e.shifted = Some(Box::new([left, right]));
            }
            Ok(e)
        })
        .collect()
}

/// Loads a split at the working rate of its corpus.
pub fn load_split(corpus: &Corpus, split: Split) -> Result<(Vec<Waveform>, Vec<usize>)> {
    let rate = working_rate(corpus.spec.id);
    let (waves, labels) = corpus.load_split(split)?;
    let waves = waves.iter().map(|w| fit_clip(w, rate)).collect::<Result<Vec<_>>>()?;
    Ok((waves, labels))
}

pub fn checkpoint_path(dir: &Path, dataset: DatasetId, model: &ModelConfig) -> PathBuf {
    let family = match model.family {
        ModelFamily::BnResNet => "bn_resnet",
        ModelFamily::DualHeadResNet => "dual_head_resnet",
        ModelFamily::GnTransformer => "gn_transformer",
    };
    dir.join(format!("{dataset}-{family}-{}.ckpt", &model.hash()[..12]))
}

/// Trains the source model a method adapts from.
pub fn pretrain_for(
    method: MethodId,
    corpus: &Corpus,
    features: &FeatureConfig,
    model: &ModelConfig,
    hyper: &TrainHyper,
    init_seed: u64,
) -> Result<(AdaptableModel, TrainReport)> {
    let (waves, labels) = load_split(corpus, Split::Train)?;
    let shift = (model.family == ModelFamily::DualHeadResNet).then_some(0.2);
    let train = prepare_examples(&waves, &labels, features, shift)?;
    let mut m = AdaptableModel::new(model.clone(), init_seed)?;
    let report = if method == MethodId::Ttt {
        pretrain_ttt(&mut m, &train, hyper)?
    } else {
        pretrain_classifier(&mut m, &train, hyper)?
    };
    Ok((m, report))
}

/// What a cell needs besides its own description.
pub struct CellEnv<'a> {
    pub corpus: &'a Corpus,
    pub noise_bank: &'a NoiseBank,
    pub checkpoint_dir: PathBuf,
}

/// The cell's corrupted test set as examples. Unadapted and adapted
/// evaluation both consume this exact set.
pub fn corrupted_test_set(cell: &ExperimentCell, env: &CellEnv) -> Result<Vec<Example>> {
    let (clean, labels) = load_split(env.corpus, Split::Test)?;
    let corrupted = corrupt_set(&clean, &cell.corruption(), env.noise_bank)?;
    let waves: Vec<Waveform> = corrupted.into_iter().map(|c| c.waveform).collect();
    let shift = (cell.method == MethodId::Ttt).then_some(cell.shift_fraction);
    prepare_examples(&waves, &labels, &cell.features, shift)
}

fn predictions(model: &AdaptableModel, set: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.chunks(128) {
        let refs: Vec<&Example> = chunk.iter().collect();
        out.extend(model.logits(input_batch(&refs), Head::Class, ForwardMode::Eval)?.argmax_rows());
    }
    Ok(out)
}

fn epoch_means(trace: &[f64], epochs: usize) -> Vec<f64> {
    if epochs == 0 || trace.is_empty() {
        return Vec::new();
    }
    let per = trace.len() / epochs;
    trace.chunks(per.max(1)).take(epochs).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Runs a cell from a checkpoint on disk.
pub fn run_cell(cell: &ExperimentCell, env: &CellEnv) -> Result<RunRecord> {
    let model = load_checkpoint(checkpoint_path(&env.checkpoint_dir, cell.dataset, &cell.model), Some(&cell.model))?;
    run_cell_with(cell, env, model)
}

/// Runs a cell from an already loaded source model.
pub fn run_cell_with(cell: &ExperimentCell, env: &CellEnv, model: AdaptableModel) -> Result<RunRecord> {
    let started = Instant::now();
    let test = corrupted_test_set(cell, env)?;
    let truth: Vec<usize> = test.iter().map(|e| e.label).collect();
    let unadapted_error = round2(error_rate(&predictions(&model, &test)?, &truth));
    let epochs = cell.epochs.max(1);

    let (epoch_error_rates, step_losses, epoch_pl_losses, batch_size) = match cell.method.online_mode() {
        Some(mode) => {
            let mut cfg = cell.online.clone();
            cfg.mode = mode;
            let batch_size = cfg.batch_size;
            let mut state = OnlineAdaptState::new(model, cfg)?;
            let errors = multi_epoch_adapt(&mut state, &test, epochs)?;
            (errors, state.loss_trace.clone(), Vec::new(), batch_size)
        }
        None => {
            let mut model = model;
            let mut cfg = cell.stda.clone();
            cfg.epochs = epochs;
            let mut errors = Vec::new();
            let report = stda_adapt_observed(&mut model, &test, &cfg, |_, m| {
                errors.push(100.0 * (1.0 - accuracy(m, &test, 128)?));
                Ok(())
            })?;
            (errors, report.steps.iter().map(|s| s.total).collect(), report.epoch_pl_loss, cfg.batch_size)
        }
    };
    let epoch_error_rates: Vec<f64> = epoch_error_rates.into_iter().map(round2).collect();
    let adapted_error = *epoch_error_rates.last().expect("at least one epoch");
    let config_hash = cell.config_hash();
    Ok(RunRecord {
        epoch_losses: epoch_means(&step_losses, epochs),
        step_losses,
        epoch_pl_losses,
        epoch_error_rates,
        unadapted_error,
        adapted_error,
        batch_size,
        wall_clock_s: started.elapsed().as_secs_f64(),
        provenance: format!("tta-core {} cfg {}", env!("CARGO_PKG_VERSION"), &config_hash[..12]),
        config_hash,
        seeds: SeedFanout { master: cell.seed, corruption: cell.corruption().seed, adapter: cell.stda.seed },
        cell: cell.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_and_fit() {
        assert_eq!(round2(12.3456), 12.35);
        let w = Waveform::new(vec![0.5; 100], 8000).unwrap();
        assert_eq!(fit_clip(&w, 8000).unwrap().len(), 8000);
    }

    #[test]
    fn presets_match_feature_geometry() {
        let f = feature_preset(DatasetId::Toy);
        let m = model_preset(MethodId::Conmix, DatasetId::Toy, 10, &f);
        assert_eq!((m.input_height, m.input_width), (32, 32));
        assert_eq!(stda_profile(DatasetId::Am).pl_variant, PlVariant::None);
        assert_eq!(stda_profile(DatasetId::Scr).pl_variant, PlVariant::Upd);
        assert_eq!("TTT".parse::<MethodId>().unwrap(), MethodId::Ttt);
    }
}
