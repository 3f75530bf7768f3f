//! On-disk spectrogram cache: one little-endian f64 file per sample plus a
//! tab-separated index of (path, shape, dtype, config hash).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::mel::{FeatureConfig, SpectrogramImage};
use crate::error::{Result, TtaError};

pub const INDEX_FILE: &str = "index.tsv";
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub path: PathBuf,
    pub mel_bins: usize,
    pub frames: usize,
    pub config_hash: String,
}

pub fn write_cache(dir: &Path, items: &[(String, SpectrogramImage)], cfg: &FeatureConfig) -> Result<Vec<CacheEntry>> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let mut index = fs::File::create(dir.join(INDEX_FILE))?;
    let mut entries = Vec::with_capacity(items.len());
    for (name, spec) in items {
        let rel = PathBuf::from(format!("{name}.bin"));
        let bytes: Vec<u8> = spec.values().iter().flat_map(|v| v.to_le_bytes()).collect();
        if let Some(parent) = dir.join(&rel).parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(dir.join(&rel), bytes)?;
        writeln!(index, "{}\t{}x{}\t{DTYPE}\t{hash}", rel.display(), spec.mel_bins(), spec.frames())?;
        entries.push(CacheEntry { path: rel, mel_bins: spec.mel_bins(), frames: spec.frames(), config_hash: hash.clone() });
    }
    Ok(entries)
}

/// Loads every cached spectrogram, rejecting entries made under a different config.
pub fn read_cache(dir: &Path, cfg: &FeatureConfig) -> Result<Vec<(CacheEntry, SpectrogramImage)>> {
    let hash = cfg.hash();
    let index = fs::read_to_string(dir.join(INDEX_FILE))?;
    index
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, shape, dtype, entry_hash] = fields[..] else {
                return Err(TtaError::Config(format!("malformed cache index line: {line}")));
            };
            if dtype != DTYPE {
                return Err(TtaError::Config(format!("unsupported cache dtype {dtype}")));
            }
            if entry_hash != hash {
                return Err(TtaError::ConfigHashMismatch { expected: hash.clone(), found: entry_hash.to_string() });
            }
            let (m, f) = shape
                .split_once('x')
                .and_then(|(m, f)| Some((m.parse().ok()?, f.parse().ok()?)))
                .ok_or_else(|| TtaError::Config(format!("bad shape {shape}")))?;
            let bytes = fs::read(dir.join(path))?;
            let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let spec = SpectrogramImage::new(values, m, f)?;
            Ok((CacheEntry { path: PathBuf::from(path), mel_bins: m, frames: f, config_hash: hash.clone() }, spec))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FeatureConfig::default();
        let s = SpectrogramImage::new(vec![1.5, -2.0, 0.25, 3.0, 4.0, 5.0], 2, 3).unwrap();
        write_cache(dir.path(), &[("a/0".into(), s.clone())], &cfg).unwrap();
        let back = read_cache(dir.path(), &cfg).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].1, s);
        let other = FeatureConfig { hop: 100, ..cfg };
        assert!(matches!(read_cache(dir.path(), &other), Err(TtaError::ConfigHashMismatch { .. })));
    }
}
