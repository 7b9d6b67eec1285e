//! Synthetic four-stem tracks and cross-track mixing.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)]
use num_traits::Float;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Condition;
use crate::numerics::Tensor;
use crate::scalar::Real;
use crate::spectro::{stft, AudioClip, StftConfig};

/// The four stems of one track, indexed by [`Condition::id`].
#[derive(Debug, Clone, PartialEq)]
pub struct StemSet<S = f32> {
    pub track_id: usize,
    pub stems: [AudioClip<S>; 4],
}

impl<S: Real> StemSet<S> {
    pub fn new(track_id: usize, stems: [AudioClip<S>; 4]) -> Result<Self> {
        let (n, ch, sr) = (stems[0].num_samples(), stems[0].num_channels(), stems[0].sample_rate());
        if stems.iter().any(|s| s.num_samples() != n || s.num_channels() != ch || s.sample_rate() != sr) {
            return Err(Error::Input(format!("stems of track {track_id} differ in shape or rate")));
        }
        Ok(Self { track_id, stems })
    }

    pub fn stem(&self, cond: Condition) -> &AudioClip<S> {
        &self.stems[cond.id()]
    }

    /// Sample-wise sum of the four stems.
    pub fn mixture(&self) -> AudioClip<S> {
        let refs: Vec<&AudioClip<S>> = self.stems.iter().collect();
        AudioClip::mix(&refs).expect("stems validated on construction")
    }

    pub fn num_samples(&self) -> usize {
        self.stems[0].num_samples()
    }

    pub fn sample_rate(&self) -> u32 {
        self.stems[0].sample_rate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S = f32> {
    pub tracks: Vec<StemSet<S>>,
    pub split: Split,
}

impl<S: Real> Dataset<S> {
    pub fn new(tracks: Vec<StemSet<S>>, split: Split) -> Result<Self> {
        if tracks.is_empty() {
            return Err(Error::Input("dataset has no tracks".into()));
        }
        Ok(Self { tracks, split })
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn shortest(&self) -> usize {
        self.tracks.iter().map(|t| t.num_samples()).min().unwrap_or(0)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// One synthetic track; every stem is mono with a distinct spectral signature.
///
/// * vocals: harmonic tone (six partials) with 5.5 Hz vibrato, note changes
///   every half second, f0 in 180-360 Hz
/// * drums: white-noise bursts with 25 ms exponential decay on an eighth-note grid
/// * bass: sinusoid in 45-110 Hz plus a weak second harmonic
/// * other: band-limited noise pad from random-phase partials in 1-2.5 kHz
pub fn synth_track<S: Real>(track_id: usize, seconds: f64, sample_rate: u32, rng: &mut ChaCha8Rng) -> Result<StemSet<S>> {
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    if n == 0 {
        return Err(Error::Config("track length rounds to zero samples".into()));
    }
    let nyquist = sr / 2.0;
    let gains: [f64; 4] = core::array::from_fn(|_| uniform(rng, 0.5, 1.0));

    let mut vocals = vec![0.0; n];
    let note_len = (0.5 * sr) as usize;
    let mut phase = 0.0;
    let mut f0 = uniform(rng, 180.0, 360.0);
    let vib_phase = uniform(rng, 0.0, 2.0 * PI);
    for (i, v) in vocals.iter_mut().enumerate() {
        if note_len > 0 && i % note_len == 0 && i > 0 {
            f0 = uniform(rng, 180.0, 360.0);
        }
        let t = i as f64 / sr;
        let f = f0 * (1.0 + 0.02 * (2.0 * PI * 5.5 * t + vib_phase).sin());
        phase += 2.0 * PI * f / sr;
        let mut s = 0.0;
        for h in 1..=6 {
            if f0 * h as f64 * 1.05 < nyquist {
                s += (phase * h as f64).sin() / h as f64;
            }
        }
        let env = {
            let k = if note_len > 0 { (i % note_len) as f64 / note_len as f64 } else { 0.0 };
            (PI * k).sin().max(0.0).sqrt()
        };
        *v = s * env;
    }

    let mut drums = vec![0.0; n];
    let grid = (0.25 * sr) as usize;
    let decay = 0.025 * sr;
    let offset = (uniform(rng, 0.0, 0.25) * sr) as usize;
    for (i, d) in drums.iter_mut().enumerate() {
        let noise = uniform(rng, -1.0, 1.0);
        if i >= offset && grid > 0 {
            let since = ((i - offset) % grid) as f64;
            *d = noise * (-since / decay).exp();
        }
    }

    let mut bass = vec![0.0; n];
    let bass_note = (1.0 * sr) as usize;
    let mut fb = uniform(rng, 45.0, 110.0);
    let mut bphase = 0.0;
    for (i, b) in bass.iter_mut().enumerate() {
        if bass_note > 0 && i % bass_note == 0 && i > 0 {
            fb = uniform(rng, 45.0, 110.0);
        }
        bphase += 2.0 * PI * fb / sr;
        *b = bphase.sin() + 0.25 * (2.0 * bphase).sin();
    }

    let mut other = vec![0.0; n];
    let hi = 2500.0f64.min(0.9 * nyquist);
    let lo = 1000.0f64.min(0.5 * hi);
    let partials: Vec<(f64, f64)> = (0..48).map(|_| (uniform(rng, lo, hi), uniform(rng, 0.0, 2.0 * PI))).collect();
    let swell = uniform(rng, 0.2, 0.6);
    for (i, o) in other.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let s: f64 = partials.iter().map(|&(f, p)| (2.0 * PI * f * t + p).sin()).sum();
        *o = s * (0.75 + 0.25 * (2.0 * PI * swell * t).sin());
    }

    let target_rms = [0.12, 0.12, 0.15, 0.08];
    let stems = [vocals, drums, bass, other];
    let built: Vec<AudioClip<S>> = stems
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let rms = (s.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            let g = if rms > 0.0 { target_rms[k] * gains[k] / rms } else { 0.0 };
            AudioClip::new(vec![s.iter().map(|&v| S::lit(v * g)).collect()], sample_rate)
        })
        .collect::<Result<_>>()?;
    let [v, d, b, o]: [AudioClip<S>; 4] = built.try_into().map_err(|_| Error::Input("stem count".into()))?;
    StemSet::new(track_id, [v, d, b, o])
}

/// `n_tracks` synthetic tracks, deterministic in `seed`.
pub fn make_toy_dataset<S: Real>(n_tracks: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<Dataset<S>> {
    if n_tracks < 2 {
        return Err(Error::Config(format!(
            "need at least 2 tracks for cross-track mixing, got {n_tracks}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tracks = (0..n_tracks)
        .map(|i| synth_track(i, seconds, sample_rate, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(tracks, Split::Train)
}

/// Train and test splits drawn from one seeded stream; test track ids
/// follow the training ids so the splits are disjoint.
pub fn make_toy_splits<S: Real>(
    n_train: usize,
    n_test: usize,
    seconds: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<(Dataset<S>, Dataset<S>)> {
    if n_train < 2 || n_test == 0 {
        return Err(Error::Config(format!(
            "need at least 2 training tracks and 1 test track, got {n_train} / {n_test}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracks = (0..n_train + n_test)
        .map(|i| synth_track(i, seconds, sample_rate, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let test = tracks.split_off(n_train);
    Ok((Dataset::new(tracks, Split::Train)?, Dataset::new(test, Split::Test)?))
}

/// Sampling switches for [`sample_batch`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchOptions {
    /// Scale every drawn stem by a gain from `[0.5, 1.25]`.
    pub random_gain: bool,
    /// Draw all four stems from this track at one shared offset.
    pub aligned_track: Option<usize>,
}

/// One training example in the time domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<S> {
    pub condition: Condition,
    /// `(track, offset)` of each drawn stem, indexed by condition id.
    pub sources: [(usize, usize); 4],
    pub stems: [AudioClip<S>; 4],
    pub mixture: AudioClip<S>,
}

impl<S: Real> Example<S> {
    pub fn target(&self) -> &AudioClip<S> {
        &self.stems[self.condition.id()]
    }
}

/// Spectrogram batch: `mixture` and `target` are `[N, C, F, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub mixture: Tensor<S>,
    pub target: Tensor<S>,
    pub conditions: Vec<usize>,
    pub examples: Vec<Example<S>>,
}

/// Draws one example: a uniform condition, then each stem from an
/// independently chosen track and offset; the mixture is their sum.
pub fn sample_example<S: Real>(dataset: &Dataset<S>, segment: usize, rng: &mut ChaCha8Rng, opts: &BatchOptions) -> Result<Example<S>> {
    if dataset.is_empty() {
        return Err(Error::Input("dataset has no tracks".into()));
    }
    let shortest = dataset.shortest();
    if segment == 0 || segment > shortest {
        return Err(Error::Input(format!(
            "segment of {segment} samples does not fit the shortest track ({shortest} samples)"
        )));
    }
    let condition = Condition::from_id(rng.gen_range(0..4))?;
    let shared = match opts.aligned_track {
        Some(t) if t >= dataset.len() => {
            return Err(Error::Input(format!("aligned track {t} out of range")));
        }
        Some(t) => Some((t, rng.gen_range(0..=dataset.tracks[t].num_samples() - segment))),
        None => None,
    };
    let mut sources = [(0, 0); 4];
    let mut stems = Vec::with_capacity(4);
    for (k, src) in sources.iter_mut().enumerate() {
        let (track, offset) = match shared {
            Some(s) => s,
            None => {
                let t = rng.gen_range(0..dataset.len());
                (t, rng.gen_range(0..=dataset.tracks[t].num_samples() - segment))
            }
        };
        *src = (track, offset);
        let mut clip = dataset.tracks[track].stems[k].segment(offset, segment)?;
        if opts.random_gain {
            clip = clip.scaled(S::lit(rng.gen_range(0.5..=1.25)));
        }
        stems.push(clip);
    }
    let stems: [AudioClip<S>; 4] = stems.try_into().map_err(|_| Error::Input("stem count".into()))?;
    let mixture = AudioClip::mix(&stems.iter().collect::<Vec<_>>())?;
    Ok(Example {
        condition,
        sources,
        stems,
        mixture,
    })
}

fn stack<S: Real>(items: &[Tensor<S>]) -> Result<Tensor<S>> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// `batch` examples from [`sample_example`], transformed with `stft_cfg`.
pub fn sample_batch<S: Real>(
    dataset: &Dataset<S>,
    batch: usize,
    segment: usize,
    stft_cfg: &StftConfig,
    rng: &mut ChaCha8Rng,
    opts: &BatchOptions,
) -> Result<Batch<S>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let examples = (0..batch)
        .map(|_| sample_example(dataset, segment, rng, opts))
        .collect::<Result<Vec<_>>>()?;
    let mixes = examples
        .iter()
        .map(|e| stft(&e.mixture, stft_cfg).map(|s| s.data))
        .collect::<Result<Vec<_>>>()?;
    let targets = examples
        .iter()
        .map(|e| stft(e.target(), stft_cfg).map(|s| s.data))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        mixture: stack(&mixes)?,
        target: stack(&targets)?,
        conditions: examples.iter().map(|e| e.condition.id()).collect(),
        examples,
    })
}
