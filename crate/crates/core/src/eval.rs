//! Signal-to-distortion ratio and dataset-level scoring.
//!
//! The score is the global ratio used by the music demixing challenge,
//! `10 log10((sum s^2 + eps) / (sum (s - s_hat)^2 + eps))` over every sample and
//! channel of a whole track. It is *not* the BSS-Eval SDR: no distortion
//! filter is fitted, so any gain error counts as distortion.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{separate_track, Condition, Model, SeparationConfig};
use crate::scalar::Real;
use crate::spectro::AudioClip;
use crate::train::{Dataset, StemSet};

pub const SDR_EPS: f64 = 1e-7;
/// Reported scores are clamped to this value.
pub const SDR_CAP_DB: f64 = 100.0;

/// SDR in dB, accumulated in `f64`.
pub fn sdr<S: Real>(reference: &AudioClip<S>, estimate: &AudioClip<S>, eps: f64) -> Result<f64> {
    if reference.num_channels() != estimate.num_channels() || reference.num_samples() != estimate.num_samples() {
        return Err(Error::Input(format!(
            "reference is {}x{}, estimate is {}x{}",
            reference.num_channels(),
            reference.num_samples(),
            estimate.num_channels(),
            estimate.num_samples()
        )));
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (r, e) in reference.channels().iter().zip(estimate.channels()) {
        for (&a, &b) in r.iter().zip(e) {
            let (a, b) = (a.as_f64(), b.as_f64());
            num += a * a;
            den += (a - b) * (a - b);
        }
    }
    Ok((10.0 * ((num + eps) / (den + eps)).log10()).min(SDR_CAP_DB))
}

/// Scores of one track; `None` for conditions that were not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackScores {
    pub track_id: usize,
    pub sdr: [Option<f64>; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrReport {
    /// Mean over tracks per source, indexed by condition id.
    pub per_source: [Option<f64>; 4],
    /// Mean of the evaluated per-source means.
    pub average: f64,
    pub tracks: Vec<TrackScores>,
}

impl SdrReport {
    pub fn from_tracks(tracks: Vec<TrackScores>) -> Self {
        let per_source: [Option<f64>; 4] = core::array::from_fn(|k| {
            let vals: Vec<f64> = tracks.iter().filter_map(|t| t.sdr[k]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        });
        let present: Vec<f64> = per_source.iter().flatten().copied().collect();
        let average = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self {
            per_source,
            average,
            tracks,
        }
    }

    pub fn source(&self, cond: Condition) -> Option<f64> {
        self.per_source[cond.id()]
    }
}

/// Anything that turns a mixture into a source estimate.
pub trait Separator<S> {
    fn separate(&self, track: &StemSet<S>, mixture: &AudioClip<S>, cond: Condition) -> Result<AudioClip<S>>;
}

/// A model with chunking settings.
pub struct ModelSeparator<'a, S> {
    pub model: &'a Model<S>,
    pub config: SeparationConfig,
}

impl<S: Real> Separator<S> for ModelSeparator<'_, S> {
    fn separate(&self, _track: &StemSet<S>, mixture: &AudioClip<S>, cond: Condition) -> Result<AudioClip<S>> {
        separate_track(self.model, mixture, cond, &self.config)
    }
}

/// Returns the true stem; scores `10 log10((E + eps) / eps)`, capped.
pub struct OracleSeparator;

impl<S: Real> Separator<S> for OracleSeparator {
    fn separate(&self, track: &StemSet<S>, _mixture: &AudioClip<S>, cond: Condition) -> Result<AudioClip<S>> {
        Ok(track.stem(cond).clone())
    }
}

/// Returns silence; scores 0 dB.
pub struct ZeroSeparator;

impl<S: Real> Separator<S> for ZeroSeparator {
    fn separate(&self, _track: &StemSet<S>, mixture: &AudioClip<S>, _cond: Condition) -> Result<AudioClip<S>> {
        AudioClip::silence(mixture.num_channels(), mixture.num_samples(), mixture.sample_rate())
    }
}

/// Scores one track for each requested condition.
pub fn score_track<S: Real>(sep: &dyn Separator<S>, track: &StemSet<S>, conditions: &[Condition]) -> Result<TrackScores> {
    let mixture = track.mixture();
    let mut scores = TrackScores {
        track_id: track.track_id,
        sdr: [None; 4],
    };
    for &c in conditions {
        let est = sep.separate(track, &mixture, c)?;
        scores.sdr[c.id()] = Some(sdr(track.stem(c), &est, SDR_EPS)?);
    }
    Ok(scores)
}

/// Separates every track of `dataset` for each condition and scores it
/// against the reference stem.
pub fn evaluate<S: Real>(sep: &dyn Separator<S>, dataset: &Dataset<S>, conditions: &[Condition]) -> Result<SdrReport> {
    let tracks = dataset
        .tracks
        .iter()
        .map(|t| score_track(sep, t, conditions))
        .collect::<Result<Vec<_>>>()?;
    Ok(SdrReport::from_tracks(tracks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn clip(v: Vec<f64>) -> AudioClip<f64> {
        AudioClip::new(vec![v], 8000).unwrap()
    }

    #[test]
    fn perfect_estimate_is_energy_over_eps() {
        let quiet = clip((0..100).map(|i| 1e-4 * (i as f64 * 0.1).sin()).collect());
        let e: f64 = quiet.channel(0).iter().map(|v| v * v).sum();
        let want = 10.0 * ((e + SDR_EPS) / SDR_EPS).log10();
        assert!((sdr(&quiet, &quiet, SDR_EPS).unwrap() - want).abs() < 1e-9);
        let loud = clip((0..4000).map(|i| (i as f64 * 0.1).sin()).collect());
        assert_eq!(sdr(&loud, &loud, SDR_EPS).unwrap(), SDR_CAP_DB);
    }

    #[test]
    fn half_scale_is_six_db() {
        let r = clip((0..1000).map(|i| (i as f64 * 0.37).sin()).collect());
        let e = r.scaled(0.5);
        let want = 10.0 * 4.0f64.log10();
        assert!((sdr(&r, &e, SDR_EPS).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn silence_is_zero_db() {
        let r = clip((0..1000).map(|i| (i as f64 * 0.37).cos()).collect());
        let z = clip(vec![0.0; 1000]);
        assert!(sdr(&r, &z, SDR_EPS).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scale_error_formula() {
        let r = clip((0..4000).map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.71).cos()).collect());
        for alpha in [0.5, 0.9, 1.1] {
            let got = sdr(&r, &r.scaled(alpha), SDR_EPS).unwrap();
            let want = 10.0 * (1.0 / ((1.0 - alpha) * (1.0 - alpha))).log10();
            assert!((got - want).abs() < 0.01, "alpha {alpha}: {got} vs {want}");
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let r = clip(vec![0.1; 10]);
        let e = clip(vec![0.1; 11]);
        assert!(matches!(sdr(&r, &e, SDR_EPS), Err(Error::Input(_))));
    }

    #[test]
    fn average_is_mean_of_source_means() {
        let tracks = vec![
            TrackScores { track_id: 0, sdr: [Some(1.0), Some(2.0), Some(3.0), Some(4.0)] },
            TrackScores { track_id: 1, sdr: [Some(3.0), Some(0.5), Some(-1.0), Some(8.0)] },
        ];
        let r = SdrReport::from_tracks(tracks);
        assert_eq!(r.per_source, [Some(2.0), Some(1.25), Some(1.0), Some(6.0)]);
        assert!((r.average - (2.0 + 1.25 + 1.0 + 6.0) / 4.0).abs() < 1e-12);
    }
}
