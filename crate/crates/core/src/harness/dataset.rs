//! Dataset manifests: AudioMNIST, SpeechCommands V1 and its derived splits,
//! and the synthetic TOY corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::toy::toy_waveform;
use crate::audio::Waveform;
use crate::error::{Result, TtaError};
use crate::seed::{keyed_rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DatasetId {
    Am,
    Sc,
    Scr,
    Scn,
    Toy,
}

impl DatasetId {
    pub const ALL: [DatasetId; 5] = [DatasetId::Am, DatasetId::Sc, DatasetId::Scr, DatasetId::Scn, DatasetId::Toy];

    pub fn code(self) -> &'static str {
        match self {
            DatasetId::Am => "AM",
            DatasetId::Sc => "SC",
            DatasetId::Scr => "SCR",
            DatasetId::Scn => "SCN",
            DatasetId::Toy => "TOY",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for DatasetId {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        DatasetId::ALL
            .into_iter()
            .find(|d| d.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| TtaError::Config(format!("unknown dataset {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root (`toy/NNNNN` for generated audio).
    pub path: String,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn get(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: DatasetId,
    pub root: Option<PathBuf>,
    pub splits: SplitManifest,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub sample_rate: u32,
    /// Deviations taken while building the splits (e.g. a fallback split).
    pub notes: Vec<String>,
}

impl DatasetSpec {
    /// Splits are disjoint and every label lies in `[0, num_classes)`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for e in self.splits.get(split) {
                if !seen.insert(e.path.as_str()) {
                    return Err(TtaError::Config(format!("{} appears in more than one split", e.path)));
                }
                if e.label >= self.num_classes {
                    return Err(TtaError::LabelOutOfRange { label: e.label, classes: self.num_classes });
                }
            }
        }
        if self.class_names.len() != self.num_classes {
            return Err(TtaError::LabelVocabularyMismatch(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Fractions of a shuffled pool assigned to (train, val); the remainder is test.
pub fn split_pool(mut pool: Vec<ManifestEntry>, test_fraction: f64, train_fraction: f64, rng: &mut Rng) -> SplitManifest {
    pool.shuffle(rng);
    let n = pool.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_train = ((train_fraction * n as f64).round() as usize).min(n - n_test);
    let test = pool.split_off(n - n_test);
    let val = pool.split_off(n_train);
    SplitManifest { train: pool, val, test }
}

const SC_CLASSES: usize = 30;
const DIGITS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(TtaError::MissingDataset(path.to_path_buf()))
    }
}

fn read_list(path: &Path) -> Result<HashSet<String>> {
    if !path.is_file() {
        return Err(TtaError::MissingDataset(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn sorted_wavs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
        .collect();
    names.sort();
    Ok(names)
}

fn sub_dirs(root: &Path) -> Result<Vec<String>> {
    let mut dirs: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// SpeechCommands V1 with its published validation/testing lists, restricted
/// to `words` when given.
fn speech_commands(root: &Path, words: Option<&[&str]>) -> Result<(SplitManifest, Vec<String>)> {
    require_dir(root)?;
    let found: Vec<String> = sub_dirs(root)?.into_iter().filter(|d| !d.starts_with('_')).collect();
    let classes: Vec<String> = match words {
        Some(ws) => {
            let missing: Vec<&str> = ws.iter().copied().filter(|w| !found.iter().any(|f| f == w)).collect();
            if !missing.is_empty() {
                return Err(TtaError::LabelVocabularyMismatch(format!("missing word folders {missing:?}")));
            }
            ws.iter().map(|w| w.to_string()).collect()
        }
        None => {
            if found.len() != SC_CLASSES {
                return Err(TtaError::LabelVocabularyMismatch(format!(
                    "expected {SC_CLASSES} word folders, found {}",
                    found.len()
                )));
            }
            found
        }
    };
    let val_list = read_list(&root.join("validation_list.txt"))?;
    let test_list = read_list(&root.join("testing_list.txt"))?;
    let mut m = SplitManifest::default();
    for (label, word) in classes.iter().enumerate() {
        for name in sorted_wavs(&root.join(word))? {
            let path = format!("{word}/{name}");
            let entry = ManifestEntry { path: path.clone(), label };
            if test_list.contains(&path) {
                m.test.push(entry);
            } else if val_list.contains(&path) {
                m.val.push(entry);
            } else {
                m.train.push(entry);
            }
        }
    }
    Ok((m, classes))
}

#[derive(Deserialize)]
struct SpeakerMeta {
    accent: String,
}

/// AudioMNIST: German-accent speakers train, everyone else tests. Without
/// the metadata file the first two thirds of speaker ids train instead.
fn audio_mnist(root: &Path) -> Result<(SplitManifest, Vec<String>, Vec<String>)> {
    require_dir(root)?;
    let speakers: Vec<String> =
        sub_dirs(root)?.into_iter().filter(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit())).collect();
    if speakers.is_empty() {
        return Err(TtaError::MissingDataset(root.to_path_buf()));
    }
    let meta_path = root.join("audioMNIST_meta.txt");
    let (train_speakers, notes): (BTreeSet<String>, Vec<String>) = if meta_path.is_file() {
        let meta: BTreeMap<String, SpeakerMeta> = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let german = meta
            .iter()
            .filter(|(_, m)| m.accent.trim().eq_ignore_ascii_case("german"))
            .map(|(id, _)| id.clone())
            .collect();
        (german, Vec::new())
    } else {
        let cut = (speakers.len() * 2).div_ceil(3);
        (
            speakers[..cut].iter().cloned().collect(),
            vec![format!("speaker metadata absent: speakers {}..={} used for training", speakers[0], speakers[cut - 1])],
        )
    };
    let mut m = SplitManifest::default();
    for spk in &speakers {
        for name in sorted_wavs(&root.join(spk))? {
            let digit = name
                .split('_')
                .next()
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|d| *d < 10)
                .ok_or_else(|| TtaError::LabelVocabularyMismatch(format!("cannot read digit from {spk}/{name}")))?;
            let entry = ManifestEntry { path: format!("{spk}/{name}"), label: digit };
            if train_speakers.contains(spk) {
                m.train.push(entry);
            } else {
                m.test.push(entry);
            }
        }
    }
    let classes = (0..10).map(|d| d.to_string()).collect();
    Ok((m, classes, notes))
}

/// Builds the manifests of a real corpus rooted at `root`. The rng only
/// matters for the random SCR split.
pub fn build_splits(id: DatasetId, root: &Path, rng: &mut Rng) -> Result<DatasetSpec> {
    let mut notes = Vec::new();
    let (splits, class_names, sample_rate) = match id {
        DatasetId::Sc => {
            let (m, c) = speech_commands(root, None)?;
            (m, c, 16_000)
        }
        DatasetId::Scn => {
            let (m, c) = speech_commands(root, Some(&DIGITS))?;
            (m, c, 16_000)
        }
        DatasetId::Scr => {
            let (m, c) = speech_commands(root, None)?;
            (split_pool(m.train, 0.30, 0.63, rng), c, 16_000)
        }
        DatasetId::Am => {
            let (m, c, n) = audio_mnist(root)?;
            notes = n;
            (m, c, 48_000)
        }
        DatasetId::Toy => {
            return Err(TtaError::Config("the TOY corpus is generated, use make_toy_dataset".into()));
        }
    };
    let spec = DatasetSpec {
        id,
        root: Some(root.to_path_buf()),
        num_classes: class_names.len(),
        class_names,
        splits,
        sample_rate,
        notes,
    };
    spec.validate()?;
    Ok(spec)
}

/// A dataset together with the means to load its audio.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: DatasetSpec,
    generated: Option<Vec<Waveform>>,
}

impl Corpus {
    pub fn open(id: DatasetId, root: &Path, seed: u64) -> Result<Self> {
        let mut rng = keyed_rng(seed, "split");
        Ok(Self { spec: build_splits(id, root, &mut rng)?, generated: None })
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Waveform> {
        if let Some(waves) = &self.generated {
            let idx: usize = entry
                .path
                .strip_prefix("toy/")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TtaError::Config(format!("not a generated entry: {}", entry.path)))?;
            return waves.get(idx).cloned().ok_or_else(|| TtaError::Config(format!("no generated sample {idx}")));
        }
        let root = self.spec.root.as_ref().ok_or_else(|| TtaError::Config("dataset has no root".into()))?;
        let wave = Waveform::read_wav(root.join(&entry.path))?;
        if wave.sample_rate() != self.spec.sample_rate {
            return wave.resample(self.spec.sample_rate);
        }
        Ok(wave)
    }

    pub fn load_split(&self, split: Split) -> Result<(Vec<Waveform>, Vec<usize>)> {
        let entries = self.spec.splits.get(split);
        let waves = entries.iter().map(|e| self.load(e)).collect::<Result<Vec<_>>>()?;
        Ok((waves, entries.iter().map(|e| e.label).collect()))
    }
}

pub const TOY_SAMPLE_RATE: u32 = 8_000;

/// Synthetic corpus of `n_per_class` one-second tone bursts per class,
/// split 63/7/30 like SCR.
pub fn make_toy_dataset(c: usize, n_per_class: usize, seed: u64) -> Result<Corpus> {
    if c < 2 {
        return Err(TtaError::Config(format!("the TOY corpus needs at least 2 classes, got {c}")));
    }
    let mut waves = Vec::with_capacity(c * n_per_class);
    let mut pool = Vec::with_capacity(c * n_per_class);
    for i in 0..c * n_per_class {
        let label = i % c;
        let mut rng = keyed_rng(seed, &format!("toy-{i}"));
        waves.push(toy_waveform(label, c, TOY_SAMPLE_RATE, &mut rng)?);
        pool.push(ManifestEntry { path: format!("toy/{i:05}"), label });
    }
    let splits = split_pool(pool, 0.30, 0.63, &mut keyed_rng(seed, "split"));
    let spec = DatasetSpec {
        id: DatasetId::Toy,
        root: None,
        splits,
        num_classes: c,
        class_names: (0..c).map(|k| format!("tone{k}")).collect(),
        sample_rate: TOY_SAMPLE_RATE,
        notes: Vec::new(),
    };
    spec.validate()?;
    Ok(Corpus { spec, generated: Some(waves) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn pool_fractions() {
        let pool: Vec<ManifestEntry> = (0..51088).map(|i| ManifestEntry { path: i.to_string(), label: 0 }).collect();
        let m = split_pool(pool, 0.30, 0.63, &mut rng_from_seed(1));
        assert_eq!(m.sizes(), (32185, 3577, 15326));
    }

    #[test]
    fn toy_corpus_is_deterministic() {
        let a = make_toy_dataset(4, 10, 3).unwrap();
        let b = make_toy_dataset(4, 10, 3).unwrap();
        assert_eq!(a.spec, b.spec);
        let e = &a.spec.splits.test[0];
        assert_eq!(a.load(e).unwrap(), b.load(e).unwrap());
        let (tr, va, te) = a.spec.splits.sizes();
        assert_eq!(tr + va + te, 40);
        assert!(matches!(make_toy_dataset(1, 10, 0), Err(TtaError::Config(_))));
    }

    #[test]
    fn missing_roots() {
        let mut rng = rng_from_seed(0);
        assert!(matches!(
            build_splits(DatasetId::Sc, Path::new("/nonexistent/sc"), &mut rng),
            Err(TtaError::MissingDataset(_))
        ));
    }

    #[test]
    fn speech_commands_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let wave = Waveform::new(vec![0.1; 160], 16_000).unwrap();
        let mut words: Vec<String> = DIGITS.iter().map(|s| s.to_string()).collect();
        words.extend((0..20).map(|i| format!("word{i:02}")));
        for w in &words {
            fs::create_dir_all(root.join(w)).unwrap();
            for k in 0..3 {
                wave.write_wav(root.join(w).join(format!("s{k}.wav")), crate::audio::WavFormat::Pcm16).unwrap();
            }
        }
        fs::create_dir_all(root.join("_background_noise_")).unwrap();
        fs::write(root.join("validation_list.txt"), "one/s0.wav\nword03/s1.wav\n").unwrap();
        fs::write(root.join("testing_list.txt"), "two/s2.wav\n").unwrap();
        let mut rng = rng_from_seed(0);
        let sc = build_splits(DatasetId::Sc, root, &mut rng).unwrap();
        assert_eq!(sc.num_classes, 30);
        assert_eq!(sc.splits.sizes(), (87, 2, 1));
        let scn = build_splits(DatasetId::Scn, root, &mut rng).unwrap();
        assert_eq!(scn.num_classes, 10);
        assert_eq!(scn.class_names[3], "three");
        assert_eq!(scn.splits.sizes(), (28, 1, 1));

        fs::create_dir_all(root.join("extra")).unwrap();
        assert!(matches!(build_splits(DatasetId::Sc, root, &mut rng), Err(TtaError::LabelVocabularyMismatch(_))));
    }

    #[test]
    fn audio_mnist_with_and_without_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let wave = Waveform::new(vec![0.1; 480], 48_000).unwrap();
        for spk in ["01", "02", "03"] {
            fs::create_dir_all(root.join(spk)).unwrap();
            for d in 0..10 {
                wave.write_wav(root.join(spk).join(format!("{d}_{spk}_0.wav")), crate::audio::WavFormat::Pcm16).unwrap();
            }
        }
        let mut rng = rng_from_seed(0);
        let fallback = build_splits(DatasetId::Am, root, &mut rng).unwrap();
        assert_eq!(fallback.splits.sizes(), (20, 0, 10));
        assert_eq!(fallback.notes.len(), 1);

        fs::write(
            root.join("audioMNIST_meta.txt"),
            r#"{"01": {"accent": "German"}, "02": {"accent": "Spanish"}, "03": {"accent": "german"}}"#,
        )
        .unwrap();
        let meta = build_splits(DatasetId::Am, root, &mut rng).unwrap();
        assert!(meta.notes.is_empty());
        assert_eq!(meta.splits.sizes(), (20, 0, 10));
        assert!(meta.splits.test.iter().all(|e| e.path.starts_with("02/")));
    }
}
