//! The training loop with logging, checkpointing and resume.
//!
//! Output directory layout:
//!
//! * `config.json`: the fully resolved run config
//! * `loss.jsonl`: `{"step", "loss"}` per step and `{"step", "validation_loss"}`
//!   every `validate_every` steps; byte-identical across seeded runs
//! * `train_log.jsonl`: `{"step", "loss", "wall_ms"}` per step
//! * `ckpt_NNNNNN.lsft` every `checkpoint_every` steps, `latest.lsft`, and
//!   `final.lsft` on completion
//! * `last_good.lsft` when a non-finite loss aborts the run

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use lightsaft_core::model::Model;
use lightsaft_core::train::{sample_batch, train_step, validation_loss, Batch, Dataset, Optimizer, TrainConfig};
use lightsaft_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::CliConfig;
use crate::error::{Error, Result};

pub const LOSS_LOG: &str = "loss.jsonl";
pub const WALL_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossRecord {
    Train { step: u64, loss: f64 },
    Validation { step: u64, validation_loss: f64 },
}

impl LossRecord {
    pub fn step(&self) -> u64 {
        match *self {
            LossRecord::Train { step, .. } | LossRecord::Validation { step, .. } => step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Prepares batches on a second thread. Batches depend only on the step
    /// index, so results are unchanged.
    pub prefetch: bool,
    /// Stops after this many completed steps (simulated interruption).
    pub stop_at: Option<u64>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<(u64, f64)>,
    pub validation: Vec<(u64, f64)>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.lsft")
}

fn segment(cfg: &CliConfig, dataset: &Dataset<f32>) -> usize {
    cfg.train.segment_samples(dataset.tracks[0].sample_rate())
}

fn batch_for_step(cfg: &CliConfig, dataset: &Dataset<f32>, step: u64) -> Result<Batch<f32>> {
    let t = &cfg.train;
    let mut rng = t.step_rng(step);
    Ok(sample_batch(dataset, t.batch_size, segment(cfg, dataset), &cfg.model.stft, &mut rng, &t.batch_options())?)
}

/// The fixed held-out batch used for validation loss.
pub fn validation_batch(cfg: &CliConfig, dataset: &Dataset<f32>) -> Result<Batch<f32>> {
    let t = &cfg.train;
    let mut rng = t.validation_rng();
    Ok(sample_batch(dataset, t.batch_size, segment(cfg, dataset), &cfg.model.stft, &mut rng, &t.batch_options())?)
}

/// Fresh model and optimiser state for `cfg`.
pub fn initial_checkpoint(cfg: &CliConfig) -> Result<Checkpoint> {
    let model = Model::<f32>::build(&cfg.model)?;
    let optimizer = Optimizer::from_config(&cfg.train, &model.store);
    Ok(Checkpoint { model, optimizer, train: cfg.train, step: 0 })
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig { steps: 0, ..*a } == TrainConfig { steps: 0, ..*b }
}

/// Reads a loss log; unparsable lines are an error.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|source| Error::Json { path: path.into(), source })
        })
        .collect()
}

fn open_logs(out: &Path, keep_until: Option<u64>) -> Result<(File, File)> {
    let loss_path = out.join(LOSS_LOG);
    let wall_path = out.join(WALL_LOG);
    let mut kept = String::new();
    let mut kept_wall = String::new();
    if let Some(step) = keep_until {
        // raw lines are kept so the text stays byte-identical
        let keep = |path: &Path, out: &mut String| {
            for line in fs::read_to_string(path).unwrap_or_default().lines() {
                let record: Option<serde_json::Value> = serde_json::from_str(line).ok();
                if record.and_then(|r| r["step"].as_u64()).is_some_and(|s| s <= step) {
                    *out += line;
                    out.push('\n');
                }
            }
        };
        keep(&loss_path, &mut kept);
        keep(&wall_path, &mut kept_wall);
    }
    fs::write(&loss_path, kept).map_err(|e| Error::io(&loss_path, e))?;
    fs::write(&wall_path, kept_wall).map_err(|e| Error::io(&wall_path, e))?;
    let open = |p: &Path| OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e));
    Ok((open(&loss_path)?, open(&wall_path)?))
}

fn append(file: &mut File, path: &Path, line: String) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) training until `cfg.train.steps` steps are complete.
pub fn train_loop(cfg: &CliConfig, dataset: &Dataset<f32>, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, cfg.resolved_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let mut ck = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path, Some(&cfg.model))?;
            if !same_run(&ck.train, &cfg.train) {
                return Err(Error::Usage(format!(
                    "{}: train config differs from the run config (only `steps` may change on resume)",
                    path.display()
                )));
            }
            Checkpoint { train: cfg.train, ..ck }
        }
        None => initial_checkpoint(cfg)?,
    };
    let (mut loss_log, mut wall_log) = open_logs(out, opts.resume.as_ref().map(|_| ck.step))?;
    let (loss_path, wall_path) = (out.join(LOSS_LOG), out.join(WALL_LOG));
    let val_batch = validation_batch(cfg, dataset)?;

    let total = cfg.train.steps as u64;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let first = ck.step;
    let (tx, rx) = mpsc::sync_channel::<Result<Batch<f32>>>(2);
    let producer = opts.prefetch.then(|| {
        let (cfg, dataset) = (cfg.clone(), dataset.clone());
        thread::spawn(move || {
            for step in first..end {
                if tx.send(batch_for_step(&cfg, &dataset, step)).is_err() {
                    break;
                }
            }
        })
    });

    let mut outcome_losses = Vec::new();
    let mut outcome_val = Vec::new();
    let started = Instant::now();
    let mut result = Ok(());
    while ck.step < end {
        let step = ck.step;
        let batch = if producer.is_some() {
            rx.recv().expect("producer alive")?
        } else {
            batch_for_step(cfg, dataset, step)?
        };
        let loss = match train_step(&mut ck.model, &mut ck.optimizer, &batch) {
            Ok(l) => l as f64,
            Err(CoreError::NonFinite(_)) => {
                let last_good = out.join("last_good.lsft");
                save_checkpoint(&last_good, &ck)?;
                result = Err(Error::Diverged { step: step + 1, last_good });
                break;
            }
            Err(e) => return Err(e.into()),
        };
        ck.step += 1;
        let done = ck.step;
        append(&mut loss_log, &loss_path, serde_json::to_string(&LossRecord::Train { step: done, loss }).expect("record"))?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        append(&mut wall_log, &wall_path, serde_json::to_string(&WallRecord { step: done, loss, wall_ms }).expect("record"))?;
        outcome_losses.push((done, loss));

        if done % cfg.train.validate_every as u64 == 0 {
            let v = validation_loss(&ck.model, &val_batch)? as f64;
            if !v.is_finite() {
                let last_good = out.join("last_good.lsft");
                save_checkpoint(&last_good, &ck)?;
                result = Err(Error::Diverged { step: done, last_good });
                break;
            }
            append(
                &mut loss_log,
                &loss_path,
                serde_json::to_string(&LossRecord::Validation { step: done, validation_loss: v }).expect("record"),
            )?;
            outcome_val.push((done, v));
            if opts.verbose {
                eprintln!("step {done:>6}  loss {loss:.5}  validation {v:.5}  {:.1} s", wall_ms / 1e3);
            }
        }
        if done % cfg.train.checkpoint_every as u64 == 0 {
            save_checkpoint(out.join(checkpoint_name(done)), &ck)?;
            save_checkpoint(out.join("latest.lsft"), &ck)?;
        }
    }
    drop(rx);
    if let Some(p) = producer {
        p.join().expect("producer thread");
    }
    result?;
    save_checkpoint(out.join("latest.lsft"), &ck)?;
    if ck.step == total {
        save_checkpoint(out.join("final.lsft"), &ck)?;
    }
    Ok(TrainOutcome { checkpoint: ck, losses: outcome_losses, validation: outcome_val })
}

/// Mean of the first and last `window` losses.
pub fn window_means(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if losses.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lightsaft_core::model::Variant;
    use lightsaft_core::spectro::StftConfig;
    use lightsaft_core::train::make_toy_dataset;

    fn tiny() -> (CliConfig, Dataset<f32>) {
        let mut cfg = CliConfig::desk(Variant::LightsaftPlus);
        cfg.model.stft = StftConfig::new(64).unwrap();
        cfg.model.num_scales = 2;
        cfg.model.internal_channels = 2;
        cfg.model.num_latent = 2;
        cfg.model.key_dim = 2;
        cfg.model.tfc_layers = 1;
        cfg.model.bottleneck = 4;
        cfg.train.steps = 6;
        cfg.train.batch_size = 2;
        cfg.train.segment_seconds = 0.05;
        cfg.train.validate_every = 2;
        cfg.train.checkpoint_every = 3;
        (cfg, make_toy_dataset(2, 0.2, 8000, 1).unwrap())
    }

    #[test]
    fn writes_logs_and_checkpoints() {
        let (cfg, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { out_dir: dir.path().into(), ..Default::default() };
        let out = train_loop(&cfg, &data, &opts).unwrap();
        assert_eq!(out.checkpoint.step, 6);
        for f in ["config.json", "ckpt_000003.lsft", "ckpt_000006.lsft", "latest.lsft", "final.lsft"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let log = read_loss_log(&dir.path().join(LOSS_LOG)).unwrap();
        assert_eq!(log.len(), 6 + 3);
        assert_eq!(out.validation.iter().map(|v| v.0).collect::<Vec<_>>(), vec![2, 4, 6]);
        let wall = fs::read_to_string(dir.path().join(WALL_LOG)).unwrap();
        assert_eq!(wall.lines().count(), 6);
    }

    #[test]
    fn prefetch_does_not_change_results() {
        let (cfg, data) = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train_loop(&cfg, &data, &TrainOptions { out_dir: a.path().into(), ..Default::default() }).unwrap();
        train_loop(&cfg, &data, &TrainOptions { out_dir: b.path().into(), prefetch: true, ..Default::default() }).unwrap();
        for f in [LOSS_LOG, "final.lsft"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (cfg, data) = tiny();
        let full = tempfile::tempdir().unwrap();
        train_loop(&cfg, &data, &TrainOptions { out_dir: full.path().into(), ..Default::default() }).unwrap();
        let part = tempfile::tempdir().unwrap();
        let first = TrainOptions { out_dir: part.path().into(), stop_at: Some(4), ..Default::default() };
        train_loop(&cfg, &data, &first).unwrap();
        assert!(!part.path().join("final.lsft").exists());
        let resume = TrainOptions {
            out_dir: part.path().into(),
            resume: Some(part.path().join(checkpoint_name(3))),
            ..Default::default()
        };
        train_loop(&cfg, &data, &resume).unwrap();
        for f in [LOSS_LOG, "final.lsft"] {
            assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(part.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resume_rejects_other_seed() {
        let (mut cfg, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        train_loop(&cfg, &data, &TrainOptions { out_dir: dir.path().into(), ..Default::default() }).unwrap();
        cfg.train.seed += 1;
        let resume = TrainOptions {
            out_dir: dir.path().into(),
            resume: Some(dir.path().join("final.lsft")),
            ..Default::default()
        };
        assert_eq!(train_loop(&cfg, &data, &resume).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn divergence_keeps_last_good() {
        let (mut cfg, data) = tiny();
        cfg.train.learning_rate = 1e30;
        cfg.train.optimizer = lightsaft_core::train::OptimizerKind::Sgd;
        let dir = tempfile::tempdir().unwrap();
        let err = train_loop(&cfg, &data, &TrainOptions { out_dir: dir.path().into(), ..Default::default() }).unwrap_err();
        match &err {
            Error::Diverged { last_good, .. } => assert!(last_good.exists()),
            other => panic!("{other:?}"),
        }
        assert_eq!(err.exit_code(), 3);
        let ck = load_checkpoint(dir.path().join("last_good.lsft"), None).unwrap();
        assert!(ck.model.store.params().iter().all(|p| p.tensor.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut cfg, data) = tiny();
        cfg.train.learning_rate = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(&cfg, &data, &TrainOptions { out_dir: dir.path().into(), ..Default::default() }).unwrap();
        let init = initial_checkpoint(&cfg).unwrap();
        assert_eq!(out.checkpoint.model.store.params(), init.model.store.params());
    }

    #[test]
    fn window_means_of_ramp() {
        let l: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(window_means(&l, 3), Some((1.0, 8.0)));
        assert_eq!(window_means(&l, 11), None);
    }
}
