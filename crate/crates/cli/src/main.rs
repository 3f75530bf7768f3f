//! `tta`: pre-train, corrupt, adapt, ablate and report from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tta_core::audio::{WavFormat, Waveform};
use tta_core::conmix::AblationVariant;
use tta_core::corruption::{corrupt_set, CorruptionSpec, NoiseSource};
use tta_core::error::{Result, TtaError};
use tta_core::features::cache::write_cache;
use tta_core::features::MelExtractor;
use tta_core::harness::dataset::{make_toy_dataset, Split};
use tta_core::harness::run::{feature_preset, fit_clip, read_records, write_records, ExperimentCell, MethodId};
use tta_core::harness::{
    load_noise_bank, pretrain_checkpoint, report, run_grid, toy_noise_bank, DatasetId, GridConfig, Layout,
};

#[derive(Parser)]
#[command(name = "tta", version, about = "Test-time adaptation experiments on corrupted keyword audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and save the source model(s).
    Pretrain(PretrainArgs),
    /// Corrupt a directory of clean clips.
    Corrupt(CorruptArgs),
    /// Run experiment cells and append their records.
    Adapt(AdaptArgs),
    /// Run one CoNMix ablation variant and write its per-epoch curves.
    Ablate(AblateArgs),
    /// Build tables and plots from run records.
    Report(ReportArgs),
    /// Write the synthetic TOY corpus and noise recordings to disk.
    Toygen(ToygenArgs),
}

/// Where the data comes from, for commands that run without a grid file.
#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, default_value = "TOY")]
    dataset: DatasetId,
    /// Corpus root (not needed for TOY).
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    toy_classes: usize,
    #[arg(long, default_value_t = 200)]
    toy_per_class: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Background recordings; the synthetic bank is used when omitted.
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[arg(long, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
}

impl DataArgs {
    fn grid(&self, methods: Vec<MethodId>) -> GridConfig {
        let mut roots = BTreeMap::new();
        if let Some(root) = &self.root {
            roots.insert(self.dataset.code().to_string(), root.clone());
        }
        GridConfig {
            methods,
            datasets: vec![self.dataset],
            noises: vec![NoiseSource::ExerciseBike],
            snrs: vec![3.0],
            gauss_levels: Vec::new(),
            seeds: vec![0],
            epochs: 1,
            variants: Vec::new(),
            roots,
            toy_classes: self.toy_classes,
            toy_per_class: self.toy_per_class,
            data_seed: self.data_seed,
            noise_dir: self.noise_dir.clone(),
            checkpoint_dir: self.checkpoint_dir.clone(),
            output: PathBuf::from("runs.jsonl"),
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Pre-train every (method, dataset) pair of this grid instead.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Methods whose source models to train; all when omitted.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<MethodId>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pcm16,
    Float32,
}

impl From<Format> for WavFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Pcm16 => WavFormat::Pcm16,
            Format::Float32 => WavFormat::Float32,
        }
    }
}

#[derive(Args)]
struct CorruptArgs {
    /// Directory of clean WAV files; labels come from its manifest.tsv or the parent folder name.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    noise: NoiseSource,
    #[arg(long, conflicts_with = "lambda", required_unless_present = "lambda")]
    snr_db: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Background recordings; the synthetic bank is used when omitted.
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    /// Sample rate every clip is brought to before mixing; the first file's rate by default.
    #[arg(long)]
    rate: Option<u32>,
    #[arg(long, value_enum, default_value = "float32")]
    format: Format,
}

#[derive(Args)]
struct CellArgs {
    #[arg(long, default_value = "conmix")]
    method: MethodId,
    #[arg(long, default_value = "eb")]
    noise: NoiseSource,
    /// SNR in dB, or the Gaussian scale when the noise is `gauss`.
    #[arg(long, default_value_t = 3.0)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
}

#[derive(Args)]
struct AdaptArgs {
    /// Grid file; a single cell is run from the flags when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    cell: CellArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Train missing source models instead of failing.
    #[arg(long)]
    pretrain_missing: bool,
    /// Record file to append to; the grid's `output` by default.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    variant: AblationVariant,
    #[arg(long, default_value = "eb")]
    noise: NoiseSource,
    /// SNR in dB, or the Gaussian scale when the noise is `gauss`.
    #[arg(long, default_value_t = 3.0)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    pretrain_missing: bool,
    /// CSV of epoch, accuracy and pseudo-label loss.
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
    /// Also append the run record here.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    /// One of table2, table4, fig_bars, appendix_curves; all when omitted.
    #[arg(long)]
    layout: Option<Layout>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct ToygenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also cache the test split's spectrograms here.
    #[arg(long)]
    cache: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Adapt(a) => adapt(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => run_report(a),
        Command::Toygen(a) => toygen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let grid = match &a.grid {
        Some(path) => GridConfig::load(path)?,
        None => {
            let methods = if a.methods.is_empty() { MethodId::ALL.to_vec() } else { a.methods.clone() };
            a.data.grid(methods)
        }
    };
    for &dataset in &grid.datasets {
        let corpus = grid.open_corpus(dataset)?;
        for &method in &grid.methods {
            let cell = ExperimentCell::new(method, dataset, corpus.spec.num_classes, NoiseSource::ExerciseBike, 3.0, 0);
            let (path, _, report) = pretrain_checkpoint(&cell, &corpus, &grid.checkpoint_dir)?;
            let acc = report.epoch_accuracy.last().copied().unwrap_or(f64::NAN);
            println!("{method} {dataset}: train accuracy {:.2}% -> {}", 100.0 * acc, path.display());
        }
    }
    Ok(())
}

fn collect_wavs(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_wavs(&path, base, out)?;
        } else if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(path.strip_prefix(base).expect("walked from base").to_path_buf());
        }
    }
    Ok(())
}

/// (relative path, label) pairs of a clean directory.
fn clean_listing(dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    let manifest = dir.join("manifest.tsv");
    if manifest.exists() {
        return fs::read_to_string(&manifest)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (path, label) = l
                    .split_once('\t')
                    .ok_or_else(|| TtaError::Config(format!("malformed manifest line: {l}")))?;
                Ok((PathBuf::from(path), label.to_string()))
            })
            .collect();
    }
    let mut wavs = Vec::new();
    collect_wavs(dir, dir, &mut wavs)?;
    Ok(wavs
        .into_iter()
        .map(|p| {
            let label = p.parent().and_then(|d| d.file_name()).map_or("-".into(), |s| s.to_string_lossy().into_owned());
            (p, label)
        })
        .collect())
}

fn corrupt(a: CorruptArgs) -> Result<()> {
    let listing = clean_listing(&a.input)?;
    let raw = listing.iter().map(|(p, _)| Waveform::read_wav(a.input.join(p))).collect::<Result<Vec<_>>>()?;
    let rate = a.rate.or_else(|| raw.first().map(Waveform::sample_rate)).unwrap_or(16_000);
    let clean = raw.iter().map(|w| fit_clip(w, rate)).collect::<Result<Vec<_>>>()?;
    let spec = match (a.noise, a.snr_db, a.lambda) {
        (NoiseSource::Gaussian, _, Some(l)) => CorruptionSpec::gaussian(l, a.seed),
        (src, Some(snr), None) => CorruptionSpec::background(src, snr, a.seed),
        (src, _, _) => {
            return Err(TtaError::InvalidCorruptionSpec(format!("{src} needs {}", if src == NoiseSource::Gaussian { "--lambda" } else { "--snr-db" })))
        }
    };
    let bank = match &a.noise_dir {
        Some(dir) => load_noise_bank(dir, rate)?,
        None => toy_noise_bank(rate, 0)?,
    };
    let corrupted = corrupt_set(&clean, &spec, &bank)?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = fs::File::create(a.out.join("manifest.tsv"))?;
    let dash = || "-".to_string();
    for ((rel, label), sample) in listing.iter().zip(&corrupted) {
        let dest = a.out.join(rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        sample.waveform.write_wav(&dest, a.format.into())?;
        writeln!(
            manifest,
            "{}\t{label}\t{}\t{}",
            rel.display(),
            sample.noise_offset.map_or_else(dash, |o| o.to_string()),
            sample.realized_snr_db.map_or_else(dash, |s| format!("{s:.4}")),
        )?;
    }
    println!("corrupted {} clips with {} into {}", corrupted.len(), a.noise, a.out.display());
    Ok(())
}

fn single_cell_grid(data: &DataArgs, method: MethodId, noise: NoiseSource, snr: f64, seed: u64, epochs: usize) -> GridConfig {
    let mut grid = data.grid(vec![method]);
    grid.noises = vec![noise];
    grid.snrs = vec![snr];
    grid.gauss_levels = vec![snr];
    grid.seeds = vec![seed];
    grid.epochs = epochs;
    grid
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let grid = match &a.grid {
        Some(path) => GridConfig::load(path)?,
        None => single_cell_grid(&a.data, a.cell.method, a.cell.noise, a.cell.snr, a.cell.seed, a.cell.epochs),
    };
    let output = a.output.clone().unwrap_or_else(|| grid.output.clone());
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let total = grid.cell_count();
    let mut done = 0;
    run_grid(&grid, a.pretrain_missing, |r| {
        done += 1;
        println!(
            "[{done}/{total}] {}: {:.2}% -> {:.2}% ({:.1}s)",
            r.cell.id(),
            r.unadapted_error,
            r.adapted_error,
            r.wall_clock_s
        );
        write_records(&output, std::slice::from_ref(r), true)
    })?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut grid = single_cell_grid(&a.data, MethodId::Conmix, a.noise, a.snr, a.seed, a.epochs);
    grid.variants = vec![a.variant];
    let records = run_grid(&grid, a.pretrain_missing, |_| Ok(()))?;
    let record = records.first().expect("one cell");
    let mut csv = String::from("epoch,accuracy,pl_loss\n");
    for (e, err) in record.epoch_error_rates.iter().enumerate() {
        let pl = record.epoch_pl_losses.get(e).map_or(String::new(), |p| format!("{p:.6}"));
        csv.push_str(&format!("{},{:.2},{pl}\n", e + 1, 100.0 - err));
    }
    fs::write(&a.out, csv)?;
    if let Some(path) = &a.records {
        write_records(path, &records, true)?;
    }
    println!("{}: {:.2}% -> {:.2}%, curves in {}", record.cell.id(), record.unadapted_error, record.adapted_error, a.out.display());
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let records = read_records(&a.records)?;
    let layouts = a.layout.map_or(Layout::ALL.to_vec(), |l| vec![l]);
    let mut incomplete = Vec::new();
    for layout in layouts {
        match report(&records, layout, &a.out) {
            Ok(paths) => paths.iter().for_each(|p| println!("{}", p.display())),
            Err(TtaError::IncompleteGrid(missing)) => {
                eprintln!("{layout}: partial output, {} cells missing", missing.len());
                incomplete.extend(missing);
            }
            Err(e) => return Err(e),
        }
    }
    if incomplete.is_empty() {
        Ok(())
    } else {
        Err(TtaError::IncompleteGrid(incomplete))
    }
}

fn toygen(a: ToygenArgs) -> Result<()> {
    let corpus = make_toy_dataset(a.classes, a.per_class, a.seed)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let name = format!("{split:?}").to_lowercase();
        let dir = a.out.join("clean").join(&name);
        fs::create_dir_all(&dir)?;
        let mut manifest = fs::File::create(dir.join("manifest.tsv"))?;
        for entry in corpus.spec.splits.get(split) {
            let file = format!("{}.wav", entry.path.trim_start_matches("toy/"));
            corpus.load(entry)?.write_wav(dir.join(&file), WavFormat::Float32)?;
            writeln!(manifest, "{file}\t{}", entry.label)?;
        }
    }
    fs::write(a.out.join("splits.json"), serde_json::to_string_pretty(&corpus.spec.splits)?)?;
    let noise_dir = a.out.join("noise");
    fs::create_dir_all(&noise_dir)?;
    let bank = toy_noise_bank(corpus.spec.sample_rate, a.seed)?;
    for (src, wave) in &bank {
        let stem = src.recording_stem().expect("background source");
        wave.write_wav(noise_dir.join(format!("{stem}.wav")), WavFormat::Float32)?;
    }
    if let Some(cache) = &a.cache {
        let features = feature_preset(DatasetId::Toy);
        let extractor = MelExtractor::new(&features, corpus.spec.sample_rate)?;
        let items = corpus
            .spec
            .splits
            .test
            .iter()
            .map(|e| Ok((e.path.clone(), extractor.extract(&corpus.load(e)?)?)))
            .collect::<Result<Vec<_>>>()?;
        write_cache(cache, &items, &features)?;
    }
    let (tr, va, te) = corpus.spec.splits.sizes();
    println!("TOY corpus with {} classes: {tr}/{va}/{te} clips in {}", a.classes, a.out.display());
    Ok(())
}
