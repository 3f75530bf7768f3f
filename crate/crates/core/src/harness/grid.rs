//! Experiment grids read from TOML and run cell by cell.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{make_toy_dataset, Corpus, DatasetId};
use super::run::{
    checkpoint_path, pretrain_for, run_cell_with, train_preset, working_rate, CellEnv, ExperimentCell, MethodId,
    RunRecord,
};
use super::toy::toy_noise_bank;
use crate::audio::Waveform;
use crate::conmix::AblationVariant;
use crate::corruption::{NoiseBank, NoiseSource};
use crate::error::{Result, TtaError};
use crate::models::{load_checkpoint, save_checkpoint, AdaptableModel, TrainReport};
use crate::seed::sub_seed;

fn default_epochs() -> usize {
    1
}
fn default_toy_classes() -> usize {
    10
}
fn default_toy_per_class() -> usize {
    200
}
fn default_checkpoint_dir() -> PathBuf {
    PathBuf::from("checkpoints")
}
fn default_output() -> PathBuf {
    PathBuf::from("runs.jsonl")
}

/// Axes and paths of an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub methods: Vec<MethodId>,
    pub datasets: Vec<DatasetId>,
    pub noises: Vec<NoiseSource>,
    /// SNRs in dB for the recorded noises.
    #[serde(default)]
    pub snrs: Vec<f64>,
    /// Gaussian scales, paired by position with `snrs`.
    #[serde(default)]
    pub gauss_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// CoNMix ablation variants; when set every CoNMix cell runs once per variant.
    #[serde(default)]
    pub variants: Vec<AblationVariant>,
    /// Corpus roots keyed by dataset code.
    #[serde(default)]
    pub roots: BTreeMap<String, PathBuf>,
    #[serde(default = "default_toy_classes")]
    pub toy_classes: usize,
    #[serde(default = "default_toy_per_class")]
    pub toy_per_class: usize,
    /// Seed of the generated corpus, its noise bank and the dataset splits.
    #[serde(default)]
    pub data_seed: u64,
    /// Directory with the background recordings; the synthetic bank is used when absent.
    #[serde(default)]
    pub noise_dir: Option<PathBuf>,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: GridConfig = toml::from_str(text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str, len: usize| {
            if len == 0 {
                Err(TtaError::Config(format!("grid axis `{name}` is empty")))
            } else {
                Ok(())
            }
        };
        empty("methods", self.methods.len())?;
        empty("datasets", self.datasets.len())?;
        empty("noises", self.noises.len())?;
        empty("seeds", self.seeds.len())?;
        empty("snrs", self.snrs.len())?;
        if self.noises.contains(&NoiseSource::Gaussian) && self.gauss_levels.len() != self.snrs.len() {
            return Err(TtaError::Config(format!(
                "gauss_levels has {} entries but snrs has {}; they are paired by position",
                self.gauss_levels.len(),
                self.snrs.len()
            )));
        }
        for axis in [&self.methods.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
            &self.datasets.iter().map(|d| d.to_string()).collect(),
            &self.noises.iter().map(|n| n.to_string()).collect(),
            &self.seeds.iter().map(|s| s.to_string()).collect(),
            &self.variants.iter().map(|v| v.to_string()).collect()]
        {
            let mut seen = std::collections::BTreeSet::new();
            if let Some(dup) = axis.iter().find(|v| !seen.insert(*v)) {
                return Err(TtaError::Config(format!("duplicate grid value {dup}")));
            }
        }
        Ok(())
    }

    /// Number of cells the grid expands to.
    pub fn cell_count(&self) -> usize {
        let per_method: usize =
            self.methods.iter().map(|&m| if m == MethodId::Conmix { self.variants.len().max(1) } else { 1 }).sum();
        per_method * self.datasets.len() * self.noises.len() * self.snrs.len() * self.seeds.len()
    }

    fn severity(&self, noise: NoiseSource, level: usize) -> f64 {
        if noise == NoiseSource::Gaussian {
            self.gauss_levels[level]
        } else {
            self.snrs[level]
        }
    }

    /// Expands the grid; `num_classes` gives each dataset's label count.
    pub fn cells(&self, num_classes: impl Fn(DatasetId) -> usize) -> Vec<ExperimentCell> {
        let mut out = Vec::with_capacity(self.cell_count());
        for &dataset in &self.datasets {
            let c = num_classes(dataset);
            for &method in &self.methods {
                for &noise in &self.noises {
                    for level in 0..self.snrs.len() {
                        for &seed in &self.seeds {
                            let mut cell = ExperimentCell::new(method, dataset, c, noise, self.severity(noise, level), seed);
                            cell.epochs = self.epochs;
                            if method == MethodId::Conmix && !self.variants.is_empty() {
                                out.extend(self.variants.iter().map(|&v| cell.clone().with_variant(v)));
                            } else {
                                out.push(cell);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn open_corpus(&self, dataset: DatasetId) -> Result<Corpus> {
        if dataset == DatasetId::Toy {
            return make_toy_dataset(self.toy_classes, self.toy_per_class, self.data_seed);
        }
        let root = self
            .roots
            .get(dataset.code())
            .ok_or_else(|| TtaError::Config(format!("no root configured for {dataset}")))?;
        Corpus::open(dataset, root, self.data_seed)
    }

    pub fn noise_bank(&self, dataset: DatasetId) -> Result<NoiseBank> {
        let rate = working_rate(dataset);
        match &self.noise_dir {
            Some(dir) => load_noise_bank(dir, rate),
            None => toy_noise_bank(rate, self.data_seed),
        }
    }
}

/// Reads `doing_the_dishes.wav`, `exercise_bike.wav` and `running_tap.wav`
/// from `dir`, resampled to `rate`.
pub fn load_noise_bank(dir: &Path, rate: u32) -> Result<NoiseBank> {
    let mut bank = NoiseBank::new();
    for src in NoiseSource::BACKGROUND {
        let stem = src.recording_stem().expect("background sources have recordings");
        let wave = Waveform::read_wav(dir.join(format!("{stem}.wav")))?;
        let wave = if wave.sample_rate() == rate { wave } else { wave.resample(rate)? };
        bank.insert(src, wave);
    }
    Ok(bank)
}

/// Pre-trains the source model a cell adapts from and saves it under `dir`.
pub fn pretrain_checkpoint(cell: &ExperimentCell, corpus: &Corpus, dir: &Path) -> Result<(PathBuf, AdaptableModel, TrainReport)> {
    let hyper = train_preset(cell.method, cell.dataset);
    let (model, report) = pretrain_for(cell.method, corpus, &cell.features, &cell.model, &hyper, sub_seed(0, "init"))?;
    std::fs::create_dir_all(dir)?;
    let path = checkpoint_path(dir, cell.dataset, &cell.model);
    save_checkpoint(&model, &path)?;
    Ok((path, model, report))
}

/// Loads the source model for a cell, pre-training and saving it first if
/// `pretrain_missing` is set and no checkpoint exists.
pub fn source_model(cell: &ExperimentCell, corpus: &Corpus, dir: &Path, pretrain_missing: bool) -> Result<AdaptableModel> {
    let path = checkpoint_path(dir, cell.dataset, &cell.model);
    if path.exists() {
        return load_checkpoint(&path, Some(&cell.model));
    }
    if !pretrain_missing {
        return Err(TtaError::CheckpointMissing(path));
    }
    Ok(pretrain_checkpoint(cell, corpus, dir)?.1)
}

/// Runs every cell of the grid, calling `on_record` after each one.
pub fn run_grid(
    grid: &GridConfig,
    pretrain_missing: bool,
    mut on_record: impl FnMut(&RunRecord) -> Result<()>,
) -> Result<Vec<RunRecord>> {
    grid.validate()?;
    let mut records = Vec::with_capacity(grid.cell_count());
    for &dataset in &grid.datasets {
        let corpus = grid.open_corpus(dataset)?;
        let bank = grid.noise_bank(dataset)?;
        let env = CellEnv { corpus: &corpus, noise_bank: &bank, checkpoint_dir: grid.checkpoint_dir.clone() };
        let single = GridConfig { datasets: vec![dataset], ..grid.clone() };
        for cell in single.cells(|_| corpus.spec.num_classes) {
            let model = source_model(&cell, &corpus, &grid.checkpoint_dir, pretrain_missing)?;
            let record = run_cell_with(&cell, &env, model)?;
            on_record(&record)?;
            records.push(record);
        }
    }
    Ok(records)
}
