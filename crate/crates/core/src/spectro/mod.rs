//! Waveforms and the STFT pipeline into the model's spectrogram domain.
//!
//! A clip with `ch` audio channels becomes a `[2 * ch, F, T]` tensor laid out
//! as `[re(ch0), re(ch1), im(ch0), im(ch1)]`. Frames are periodic-Hann windowed,
//! spaced `hop = n_fft / 2` apart, and centred by reflect-padding `n_fft / 2`
//! samples on both ends, which gives `T = 1 + n_samples / hop` frames. Bins
//! `1..=n_fft/2` are kept (`F = n_fft / 2`); the DC bin is dropped and comes
//! back as zero on inversion. The forward transform is unnormalised; the
//! inverse carries the `1 / n_fft`.

mod fft;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Real;

pub use fft::Fft;

/// Multichannel waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip<S = f32> {
    channels: Vec<Vec<S>>,
    sample_rate: u32,
}

impl<S: Real> AudioClip<S> {
    pub fn new(channels: Vec<Vec<S>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::Input(format!("{} channels; expected 1 or 2", channels.len())));
        }
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Input("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn silence(num_channels: usize, num_samples: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![S::zero(); num_samples]; num_channels], sample_rate)
    }

    pub fn channels(&self) -> &[Vec<S>] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &[S] {
        &self.channels[i]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    /// Sum of squares over all channels and samples.
    pub fn energy(&self) -> S {
        self.channels.iter().flatten().map(|&v| v * v).sum()
    }

    /// Samples `[start, start + len)` of every channel.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.num_samples() {
            return Err(Error::Input(format!(
                "segment [{start}, {}) exceeds {} samples",
                start + len,
                self.num_samples()
            )));
        }
        Ok(Self {
            channels: self.channels.iter().map(|c| c[start..start + len].to_vec()).collect(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn scaled(&self, gain: S) -> Self {
        Self {
            channels: self.channels.iter().map(|c| c.iter().map(|&v| v * gain).collect()).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum; clips must agree in shape and rate.
    pub fn mix(clips: &[&Self]) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::Input("nothing to mix".into()))?;
        let mut out = (*first).clone();
        for c in &clips[1..] {
            if c.num_channels() != out.num_channels() || c.num_samples() != out.num_samples() || c.sample_rate != out.sample_rate {
                return Err(Error::Input("mixed clips differ in shape or rate".into()));
            }
            for (dst, src) in out.channels.iter_mut().zip(&c.channels) {
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        Ok(out)
    }

    /// Truncates or zero-pads every channel to `len` samples.
    pub fn with_len(mut self, len: usize) -> Self {
        for c in &mut self.channels {
            c.resize(len, S::zero());
        }
        self
    }

    pub fn cast<T: Real>(&self) -> AudioClip<T> {
        AudioClip {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|v| T::lit(v.as_f64())).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl StftConfig {
    /// Validated config with `hop = n_fft / 2`.
    pub fn new(n_fft: usize) -> Result<Self> {
        let cfg = Self { n_fft, hop: n_fft / 2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn desk() -> Self {
        Self { n_fft: 512, hop: 256 }
    }

    pub fn full() -> Self {
        Self { n_fft: 2048, hop: 1024 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 4 || !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!("n_fft {} must be a power of two >= 4", self.n_fft)));
        }
        if self.hop * 2 != self.n_fft {
            return Err(Error::Config(format!("hop {} must equal n_fft/2 = {}", self.hop, self.n_fft / 2)));
        }
        Ok(())
    }

    /// Number of retained frequency bins.
    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2
    }

    /// Frames produced for a clip of `num_samples` samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        1 + num_samples / self.hop
    }

    /// Periodic Hann window of length `n_fft`.
    pub fn window<S: Real>(&self) -> Vec<S> {
        let n = self.n_fft as f64;
        (0..self.n_fft)
            .map(|i| {
                let c = num_traits::Float::cos(2.0 * core::f64::consts::PI * i as f64 / n);
                S::lit(0.5 - 0.5 * c)
            })
            .collect()
    }
}

/// Complex STFT of a clip, stored as real channels `[C, F, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<S = f32> {
    pub data: Tensor<S>,
    pub config: StftConfig,
    /// Length of the analysed clip, restored by [`istft`].
    pub num_samples: usize,
    pub sample_rate: u32,
}

impl<S: Real> Spectrogram<S> {
    pub fn audio_channels(&self) -> usize {
        self.data.shape()[0] / 2
    }

    pub fn num_frames(&self) -> usize {
        self.data.shape()[2]
    }

    /// Complex value of bin `f` (0 = first retained bin) in frame `t`.
    pub fn bin(&self, channel: usize, f: usize, t: usize) -> (S, S) {
        let s = self.data.shape();
        let (fb, tt, ch) = (s[1], s[2], s[0] / 2);
        let d = self.data.data();
        (d[(channel * fb + f) * tt + t], d[((ch + channel) * fb + f) * tt + t])
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

/// Short-time Fourier transform.
pub fn stft<S: Real>(clip: &AudioClip<S>, cfg: &StftConfig) -> Result<Spectrogram<S>> {
    cfg.validate()?;
    let n = clip.num_samples();
    if n < cfg.n_fft {
        return Err(Error::Input(format!("clip has {n} samples, shorter than one window of {}", cfg.n_fft)));
    }
    let (nfft, hop, fb) = (cfg.n_fft, cfg.hop, cfg.freq_bins());
    let frames = cfg.num_frames(n);
    let ch = clip.num_channels();
    let window = cfg.window::<S>();
    let fft = Fft::new(nfft);
    let mut data = vec![S::zero(); 2 * ch * fb * frames];
    let (mut re, mut im) = (vec![S::zero(); nfft], vec![S::zero(); nfft]);
    let half = (nfft / 2) as isize;
    for (c, samples) in clip.channels().iter().enumerate() {
        for t in 0..frames {
            let start = (t * hop) as isize - half;
            for i in 0..nfft {
                re[i] = samples[reflect(start + i as isize, n)] * window[i];
                im[i] = S::zero();
            }
            fft.forward(&mut re, &mut im);
            for f in 0..fb {
                data[(c * fb + f) * frames + t] = re[f + 1];
                data[((ch + c) * fb + f) * frames + t] = im[f + 1];
            }
        }
    }
    Ok(Spectrogram {
        data: Tensor::new(&[2 * ch, fb, frames], data)?,
        config: *cfg,
        num_samples: n,
        sample_rate: clip.sample_rate(),
    })
}

/// Inverse of [`stft`]: per-frame inverse DFT (DC restored as zero) and
/// overlap-add normalised by the summed squared window.
pub fn istft<S: Real>(spec: &Spectrogram<S>) -> Result<AudioClip<S>> {
    let cfg = spec.config;
    cfg.validate()?;
    let s = spec.data.shape();
    let (nfft, hop, fb) = (cfg.n_fft, cfg.hop, cfg.freq_bins());
    if s.len() != 3 || s[0] % 2 != 0 || s[1] != fb {
        return Err(Error::Input(format!("spectrogram shape {s:?} inconsistent with n_fft {nfft}")));
    }
    let (ch, frames) = (s[0] / 2, s[2]);
    let window = cfg.window::<S>();
    let norm = S::one() / S::from_usize(nfft);
    let fft = Fft::new(nfft);
    let padded_len = (frames - 1) * hop + nfft;
    let mut wsum = vec![S::zero(); padded_len];
    for t in 0..frames {
        for i in 0..nfft {
            wsum[t * hop + i] += window[i] * window[i];
        }
    }
    let d = spec.data.data();
    let mut channels = Vec::with_capacity(ch);
    let (mut re, mut im) = (vec![S::zero(); nfft], vec![S::zero(); nfft]);
    let tiny = S::lit(1e-10);
    for c in 0..ch {
        let mut acc = vec![S::zero(); padded_len];
        for t in 0..frames {
            re.iter_mut().for_each(|v| *v = S::zero());
            im.iter_mut().for_each(|v| *v = S::zero());
            for f in 0..fb {
                let k = f + 1;
                let (xr, xi) = (d[(c * fb + f) * frames + t], d[((ch + c) * fb + f) * frames + t]);
                re[k] = xr;
                im[k] = xi;
                if k != nfft - k {
                    re[nfft - k] = xr;
                    im[nfft - k] = -xi;
                } else {
                    im[k] = S::zero();
                }
            }
            fft.inverse_unscaled(&mut re, &mut im);
            for i in 0..nfft {
                acc[t * hop + i] += re[i] * norm * window[i];
            }
        }
        let half = nfft / 2;
        let out: Vec<S> = (0..spec.num_samples)
            .map(|j| {
                let p = j + half;
                if p < padded_len && wsum[p] > tiny {
                    acc[p] / wsum[p]
                } else {
                    S::zero()
                }
            })
            .collect();
        channels.push(out);
    }
    AudioClip::new(channels, spec.sample_rate)
}
