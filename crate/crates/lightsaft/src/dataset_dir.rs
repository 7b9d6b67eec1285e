//! On-disk stem datasets: `DIR/track_i/{vocals,drums,bass,other}.wav` plus
//! `DIR/manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use lightsaft_core::model::Condition;
use lightsaft_core::train::{make_toy_dataset, Dataset, Split, StemSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wav::{read_wav, write_wav};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackEntry {
    pub track_id: usize,
    /// Stem paths relative to the dataset directory, in condition-id order.
    pub stems: [PathBuf; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub seconds: f64,
    pub sample_rate: u32,
    pub tracks: Vec<TrackEntry>,
}

/// Synthesises `tracks` toy tracks and writes them under `dir`.
pub fn write_toy_dataset(dir: &Path, tracks: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<Manifest> {
    if !(seconds > 0.0) || sample_rate == 0 {
        return Err(Error::Usage(format!("seconds ({seconds}) and sample rate ({sample_rate}) must be positive")));
    }
    let data = make_toy_dataset::<f32>(tracks, seconds, sample_rate, seed)?;
    let mut manifest = Manifest { seed, seconds, sample_rate, tracks: Vec::new() };
    for t in &data.tracks {
        let rel = PathBuf::from(format!("track_{}", t.track_id));
        fs::create_dir_all(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        let stems = Condition::ALL.map(|c| rel.join(format!("{}.wav", c.name())));
        for (c, path) in Condition::ALL.iter().zip(&stems) {
            write_wav(dir.join(path), t.stem(*c))?;
        }
        manifest.tracks.push(TrackEntry { track_id: t.track_id, stems });
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

/// Loads every track listed in the manifest.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Dataset<f32>> {
    let manifest = read_manifest(dir)?;
    let tracks = manifest
        .tracks
        .iter()
        .map(|t| {
            let clips = t.stems.iter().map(|p| read_wav(dir.join(p))).collect::<Result<Vec<_>>>()?;
            let stems = clips.try_into().expect("four stems");
            Ok(StemSet::new(t.track_id, stems)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(tracks, split)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_load_matches_synthesis() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_toy_dataset(dir.path(), 2, 0.25, 8000, 3).unwrap();
        assert_eq!(m.tracks.len(), 2);
        let loaded = load_dataset(dir.path(), Split::Test).unwrap();
        let direct = make_toy_dataset::<f32>(2, 0.25, 8000, 3).unwrap();
        assert_eq!(loaded.tracks, direct.tracks);
    }

    #[test]
    fn one_track_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = write_toy_dataset(dir.path(), 1, 0.25, 8000, 3).unwrap_err();
        assert_eq!(e.exit_code(), crate::error::EXIT_USAGE);
    }
}
