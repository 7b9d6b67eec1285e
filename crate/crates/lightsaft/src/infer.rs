//! Multi-threaded separation, dataset scoring and the wall-clock budget check.

use std::thread;
use std::time::Instant;

use lightsaft_core::eval::{sdr, SdrReport, Separator, TrackScores};
use lightsaft_core::model::{assemble_chunks, frame_window, plan_chunks, Condition, Model, SeparationConfig};
use lightsaft_core::spectro::{istft, stft, AudioClip, Spectrogram};
use lightsaft_core::train::{synth_track, Dataset, StemSet};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Whole-track separation with chunk forwards spread over `threads` workers.
/// Outputs are assembled by chunk index, so the result does not depend on
/// the thread count.
pub fn separate_track_threaded(
    model: &Model<f32>,
    clip: &AudioClip<f32>,
    cond: Condition,
    cfg: &SeparationConfig,
    threads: usize,
) -> Result<AudioClip<f32>> {
    let spec = stft(clip, &model.config().stft)?;
    let (chunk, overlap) = cfg.frames(spec.config.hop, spec.sample_rate)?;
    let chunks = plan_chunks(spec.num_frames(), chunk, overlap);
    let threads = threads.clamp(1, chunks.len());
    let run = |i: usize| model.forward(&frame_window(&spec.data, chunks[i].start, chunks[i].len), cond);
    let outputs = if threads == 1 {
        (0..chunks.len()).map(run).collect::<lightsaft_core::Result<Vec<_>>>()?
    } else {
        let mut slots: Vec<Option<lightsaft_core::Result<_>>> = (0..chunks.len()).map(|_| None).collect();
        thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let run = &run;
                    let n = chunks.len();
                    s.spawn(move || (t..n).step_by(threads).map(|i| (i, run(i))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("worker") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every chunk run")).collect::<lightsaft_core::Result<Vec<_>>>()?
    };
    let est = Spectrogram { data: assemble_chunks(spec.data.shape(), &chunks, &outputs), ..spec };
    Ok(istft(&est)?.with_len(clip.num_samples()))
}

/// A model separator with a thread budget.
pub struct ThreadedSeparator<'a> {
    pub model: &'a Model<f32>,
    pub config: SeparationConfig,
    pub threads: usize,
}

impl Separator<f32> for ThreadedSeparator<'_> {
    fn separate(&self, _track: &StemSet<f32>, mixture: &AudioClip<f32>, cond: Condition) -> lightsaft_core::Result<AudioClip<f32>> {
        separate_track_threaded(self.model, mixture, cond, &self.config, self.threads).map_err(|e| match e {
            crate::Error::Core(c) => c,
            other => lightsaft_core::Error::Input(other.to_string()),
        })
    }
}

/// Scores every track and condition with SDR regulariser `eps`; tracks are
/// reported in dataset order.
pub fn evaluate_dataset(sep: &dyn Separator<f32>, dataset: &Dataset<f32>, conditions: &[Condition], eps: f64) -> Result<SdrReport> {
    let mut tracks = Vec::with_capacity(dataset.len());
    for track in &dataset.tracks {
        let mixture = track.mixture();
        let mut scores = TrackScores { track_id: track.track_id, sdr: [None; 4] };
        for &c in conditions {
            let est = sep.separate(track, &mixture, c)?;
            scores.sdr[c.id()] = Some(sdr(track.stem(c), &est, eps)?);
        }
        tracks.push(scores);
    }
    Ok(SdrReport::from_tracks(tracks))
}

/// SDR of every conditioned estimate against every reference stem of the
/// same track: `matrix[estimate_condition][reference_stem]`.
pub fn cross_sdr(sep: &dyn Separator<f32>, track: &StemSet<f32>, eps: f64) -> Result<[[f64; 4]; 4]> {
    let mixture = track.mixture();
    let mut m = [[0.0; 4]; 4];
    for c in Condition::ALL {
        let est = sep.separate(track, &mixture, c)?;
        for r in Condition::ALL {
            m[c.id()][r.id()] = sdr(track.stem(r), &est, eps)?;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub variant: String,
    pub track_seconds: f64,
    pub wall_seconds: f64,
    /// `wall_seconds / track_seconds`.
    pub rtf: f64,
    pub budget_rtf: f64,
    pub passed: bool,
    pub threads: usize,
}

/// Times one `separate_track` call on a synthetic mixture of `seconds`
/// length; passes iff the real-time factor is at most `budget_rtf`.
pub fn throughput_check(
    model: &Model<f32>,
    seconds: f64,
    sample_rate: u32,
    budget_rtf: f64,
    cfg: &SeparationConfig,
    threads: usize,
) -> Result<BudgetReport> {
    let track: StemSet<f32> = synth_track(0, seconds, sample_rate, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mono = track.mixture();
    let channels = vec![mono.channel(0).to_vec(); model.config().audio_channels];
    let mixture = AudioClip::new(channels, sample_rate)?;
    let track_seconds = mixture.duration_seconds();
    let start = Instant::now();
    let out = separate_track_threaded(model, &mixture, Condition::Vocals, cfg, threads)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    debug_assert_eq!(out.num_samples(), mixture.num_samples());
    let rtf = wall_seconds / track_seconds;
    Ok(BudgetReport {
        variant: model.config().variant.name().into(),
        track_seconds,
        wall_seconds,
        rtf,
        budget_rtf,
        passed: rtf <= budget_rtf,
        threads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lightsaft_core::eval::{OracleSeparator, ZeroSeparator, SDR_CAP_DB, SDR_EPS};
    use lightsaft_core::model::{separate_track, ModelConfig, Variant};
    use lightsaft_core::spectro::StftConfig;
    use lightsaft_core::train::make_toy_dataset;

    fn small() -> Model<f32> {
        let mut cfg = ModelConfig::desk(Variant::Lightsaft);
        cfg.stft = StftConfig::new(64).unwrap();
        cfg.num_scales = 2;
        cfg.internal_channels = 2;
        cfg.tfc_layers = 1;
        Model::build(&cfg).unwrap()
    }

    fn short_chunks() -> SeparationConfig {
        SeparationConfig { chunk_seconds: 0.1, overlap_fraction: 0.25 }
    }

    #[test]
    fn threads_do_not_change_output() {
        let model = small();
        let data = make_toy_dataset::<f32>(2, 0.5, 8000, 2).unwrap();
        let mix = data.tracks[0].mixture();
        let cfg = short_chunks();
        let reference = separate_track(&model, &mix, Condition::Bass, &cfg).unwrap();
        for threads in [1, 3, 8] {
            assert_eq!(separate_track_threaded(&model, &mix, Condition::Bass, &cfg, threads).unwrap(), reference);
        }
    }

    fn perfect_score(stem: &AudioClip<f32>) -> f64 {
        let e: f64 = stem.channels().iter().flatten().map(|&v| (v as f64) * (v as f64)).sum();
        (10.0 * ((e + SDR_EPS) / SDR_EPS).log10()).min(SDR_CAP_DB)
    }

    #[test]
    fn oracle_and_zero_reports() {
        let data = make_toy_dataset::<f32>(2, 0.25, 8000, 2).unwrap();
        let oracle = evaluate_dataset(&OracleSeparator, &data, &Condition::ALL, SDR_EPS).unwrap();
        for (t, scores) in data.tracks.iter().zip(&oracle.tracks) {
            for c in Condition::ALL {
                assert!((scores.sdr[c.id()].unwrap() - perfect_score(t.stem(c))).abs() < 1e-9);
            }
        }
        let zero = evaluate_dataset(&ZeroSeparator, &data, &Condition::ALL, SDR_EPS).unwrap();
        assert!(zero.per_source.iter().all(|s| s.unwrap().abs() < 1e-9));
        assert_eq!(zero.tracks.iter().map(|t| t.track_id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn oracle_cross_sdr_is_diagonal() {
        let data = make_toy_dataset::<f32>(2, 0.25, 8000, 2).unwrap();
        let track = &data.tracks[0];
        let m = cross_sdr(&OracleSeparator, track, SDR_EPS).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    assert!((v - perfect_score(track.stem(Condition::ALL[i]))).abs() < 1e-9);
                } else {
                    assert!(v < 1.0, "{i} {j} {v}");
                }
            }
        }
    }

    #[test]
    fn oracle_bounds_model() {
        let model = small();
        let data = make_toy_dataset::<f32>(2, 0.25, 8000, 2).unwrap();
        let sep = ThreadedSeparator { model: &model, config: short_chunks(), threads: 1 };
        let m = evaluate_dataset(&sep, &data, &Condition::ALL, SDR_EPS).unwrap();
        let o = evaluate_dataset(&OracleSeparator, &data, &Condition::ALL, SDR_EPS).unwrap();
        for (a, b) in m.tracks.iter().zip(&o.tracks) {
            for k in 0..4 {
                assert!(a.sdr[k].unwrap() <= b.sdr[k].unwrap());
            }
        }
    }

    #[test]
    fn budget_report_fields() {
        let model = small();
        let r = throughput_check(&model, 0.5, 8000, f64::INFINITY, &short_chunks(), 1).unwrap();
        assert!(r.passed);
        assert_eq!(r.rtf, r.wall_seconds / r.track_seconds);
        assert!(r.rtf > 0.0);
        let r = throughput_check(&model, 0.5, 8000, 0.0, &short_chunks(), 1).unwrap();
        assert!(!r.passed);
    }
}
