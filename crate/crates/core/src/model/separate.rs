//! Chunked whole-track inference.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Condition, Model};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Real;
use crate::spectro::{istft, stft, AudioClip, Spectrogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationConfig {
    pub chunk_seconds: f64,
    /// Fraction of a chunk shared with its neighbour.
    pub overlap_fraction: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            chunk_seconds: 6.0,
            overlap_fraction: 0.25,
        }
    }
}

impl SeparationConfig {
    /// `(chunk, overlap)` in frames for a given hop and rate.
    pub fn frames(&self, hop: usize, sample_rate: u32) -> Result<(usize, usize)> {
        if !(self.chunk_seconds > 0.0) || !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(alloc::format!(
                "chunk_seconds must be > 0 and overlap_fraction in [0, 1), got {} / {}",
                self.chunk_seconds,
                self.overlap_fraction
            )));
        }
        let chunk = libm_round(self.chunk_seconds * sample_rate as f64 / hop as f64).max(2.0) as usize;
        let overlap = (libm_round(self.overlap_fraction * chunk as f64) as usize).min(chunk - 1);
        Ok((chunk, overlap))
    }
}

fn libm_round(x: f64) -> f64 {
    num_traits::Float::round(x)
}

/// Frame window `[start, start + len)` processed as one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub start: usize,
    pub len: usize,
}

/// Covers `frames` with windows of `chunk` frames advancing by
/// `chunk - overlap`; the last window is clipped to the end.
pub fn plan_chunks(frames: usize, chunk: usize, overlap: usize) -> Vec<Chunk> {
    assert!(chunk > overlap, "overlap must be smaller than the chunk");
    let step = chunk - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let len = chunk.min(frames - start);
        out.push(Chunk { start, len });
        if start + len >= frames {
            break;
        }
        start += step;
    }
    out
}

/// Cross-fade weight of every frame of `chunks[i]`: linear ramps over the
/// frames shared with the previous and next chunk, one elsewhere.
pub fn crossfade_weights(chunks: &[Chunk], i: usize) -> Vec<f64> {
    let c = chunks[i];
    let mut w = vec![1.0; c.len];
    if i > 0 {
        let prev = chunks[i - 1];
        let shared = (prev.start + prev.len).saturating_sub(c.start).min(c.len);
        for (k, v) in w.iter_mut().take(shared).enumerate() {
            *v *= (k + 1) as f64 / (shared + 1) as f64;
        }
    }
    if i + 1 < chunks.len() {
        let next = chunks[i + 1];
        let shared = (c.start + c.len).saturating_sub(next.start).min(c.len);
        for k in 0..shared {
            w[c.len - shared + k] *= (shared - k) as f64 / (shared + 1) as f64;
        }
    }
    w
}

/// Copies frames `[start, start + len)` of a `[C, F, T]` tensor.
pub fn frame_window<S: Real>(x: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let s = x.shape();
    let (rows, t) = (s[0] * s[1], s[2]);
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&x.data()[r * t + start..r * t + start + len]);
    }
    Tensor::new(&[s[0], s[1], len], data).unwrap()
}

/// Overlap-adds per-chunk outputs with [`crossfade_weights`], normalising by
/// the summed weights. `outputs[i]` belongs to `chunks[i]`.
pub fn assemble_chunks<S: Real>(shape: &[usize], chunks: &[Chunk], outputs: &[Tensor<S>]) -> Tensor<S> {
    let (rows, t) = (shape[0] * shape[1], shape[2]);
    let mut acc = vec![0.0f64; rows * t];
    let mut wsum = vec![0.0f64; t];
    for (i, (c, y)) in chunks.iter().zip(outputs).enumerate() {
        let w = crossfade_weights(chunks, i);
        for (k, &wk) in w.iter().enumerate() {
            wsum[c.start + k] += wk;
        }
        for r in 0..rows {
            for (k, &wk) in w.iter().enumerate() {
                acc[r * t + c.start + k] += wk * y.data()[r * c.len + k].as_f64();
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| S::lit(v / wsum[i % t]))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Estimates the target spectrogram chunk by chunk.
pub fn separate_spectrogram<S: Real>(model: &Model<S>, spec: &Spectrogram<S>, cond: Condition, cfg: &SeparationConfig) -> Result<Spectrogram<S>> {
    let (chunk, overlap) = cfg.frames(spec.config.hop, spec.sample_rate)?;
    let chunks = plan_chunks(spec.num_frames(), chunk, overlap);
    let outputs = chunks
        .iter()
        .map(|c| model.forward(&frame_window(&spec.data, c.start, c.len), cond))
        .collect::<Result<Vec<_>>>()?;
    Ok(Spectrogram {
        data: assemble_chunks(spec.data.shape(), &chunks, &outputs),
        ..spec.clone()
    })
}

/// STFT, chunked forward passes with linear cross-fades, inverse STFT.
/// The result has exactly the input's length.
pub fn separate_track<S: Real>(model: &Model<S>, clip: &AudioClip<S>, cond: Condition, cfg: &SeparationConfig) -> Result<AudioClip<S>> {
    let spec = stft(clip, &model.config().stft)?;
    let est = separate_spectrogram(model, &spec, cond, cfg)?;
    Ok(istft(&est)?.with_len(clip.num_samples()))
}
