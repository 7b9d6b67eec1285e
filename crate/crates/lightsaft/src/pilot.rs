//! The seeded toy separation run: train on synthetic stems, then score each
//! conditioned estimate against every reference stem of held-out tracks.

use std::path::Path;

use lightsaft_core::model::Variant;
use lightsaft_core::train::{make_toy_splits, Dataset};
use serde::{Deserialize, Serialize};

use crate::config::CliConfig;
use crate::error::Result;
use crate::infer::{cross_sdr, ThreadedSeparator};
use crate::training::{train_loop, window_means, TrainOptions};

/// Data and threshold settings of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub train_tracks: usize,
    pub test_tracks: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub data_seed: u64,
    /// Loss window at each end of training.
    pub window: usize,
    /// Largest passing final / initial window-mean ratio.
    pub max_loss_ratio: f64,
    /// Conditions per test track that must prefer their own stem.
    pub min_correct_per_track: usize,
}

impl Default for ToyRun {
    fn default() -> Self {
        Self {
            train_tracks: 8,
            test_tracks: 2,
            seconds: 4.0,
            sample_rate: 8000,
            data_seed: 7,
            window: 50,
            max_loss_ratio: 0.5,
            min_correct_per_track: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMatrix {
    pub track_id: usize,
    /// `sdr[estimate condition][reference stem]` in dB.
    pub sdr: [[f64; 4]; 4],
    /// Conditions whose own-stem SDR is strictly above every wrong stem.
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOutcome {
    pub first_mean: f64,
    pub last_mean: f64,
    pub loss_ratio: f64,
    pub tracks: Vec<TrackMatrix>,
    pub loss_passed: bool,
    pub separation_passed: bool,
}

/// The desk configuration the run trains.
pub fn toy_config() -> CliConfig {
    CliConfig::desk(Variant::LightsaftPlus)
}

pub fn toy_data(run: &ToyRun) -> Result<(Dataset<f32>, Dataset<f32>)> {
    Ok(make_toy_splits(run.train_tracks, run.test_tracks, run.seconds, run.sample_rate, run.data_seed)?)
}

/// Own stem strictly above every other stem in the row.
pub fn correct_rows(m: &[[f64; 4]; 4]) -> usize {
    (0..4).filter(|&c| (0..4).all(|r| r == c || m[c][c] > m[c][r])).count()
}

pub fn run_toy(run: &ToyRun, cfg: &CliConfig, out_dir: &Path, verbose: bool) -> Result<ToyOutcome> {
    let (train, test) = toy_data(run)?;
    let opts = TrainOptions { out_dir: out_dir.into(), verbose, ..Default::default() };
    let outcome = train_loop(cfg, &train, &opts)?;
    let losses: Vec<f64> = outcome.losses.iter().map(|l| l.1).collect();
    let (first_mean, last_mean) = window_means(&losses, run.window).unwrap_or((f64::NAN, f64::NAN));
    let loss_ratio = last_mean / first_mean;
    let sep = ThreadedSeparator { model: &outcome.checkpoint.model, config: cfg.eval.separation, threads: 1 };
    let tracks = test
        .tracks
        .iter()
        .map(|t| {
            let sdr = cross_sdr(&sep, t, cfg.eval.eps)?;
            Ok(TrackMatrix { track_id: t.track_id, correct: correct_rows(&sdr), sdr })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyOutcome {
        first_mean,
        last_mean,
        loss_ratio,
        loss_passed: loss_ratio < run.max_loss_ratio,
        separation_passed: tracks.iter().all(|t| t.correct >= run.min_correct_per_track),
        tracks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correct_rows_counts_strict_diagonal() {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 5.0;
        }
        assert_eq!(correct_rows(&m), 4);
        m[1][2] = 5.0;
        assert_eq!(correct_rows(&m), 3);
        m[3][3] = -1.0;
        assert_eq!(correct_rows(&m), 2);
    }
}
