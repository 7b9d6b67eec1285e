//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use lightsaft_core::eval::{OracleSeparator, SdrReport, Separator};
use lightsaft_core::model::{grad_check_model, Condition, Model, ModelConfig, ParamBreakdown, Variant};
use lightsaft_core::numerics::{op_cases, GradCheckOptions};
use lightsaft_core::train::Split;

use crate::checkpoint::load_checkpoint;
use crate::config::CliConfig;
use crate::dataset_dir::{load_dataset, write_toy_dataset};
use crate::error::{Error, Result, EXIT_RUNTIME};
use crate::infer::{evaluate_dataset, separate_track_threaded, throughput_check, ThreadedSeparator};
use crate::report::{breakdown_table, budget_table, sdr_table, OrderingVerdict};
use crate::training::{train_loop, TrainOptions};
use crate::wav::{read_wav, write_wav};

#[derive(Debug, Parser)]
#[command(name = "lightsaft", version, about = "Conditioned music source separation")]
pub struct Cli {
    /// Worker threads for batch preparation and chunked inference; 1 is fully deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    All,
    Lasaft,
    Lightsaft,
    LightsaftPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise a toy four-stem dataset as WAV files.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        tracks: usize,
        #[arg(long, default_value_t = 4.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Separate one source from a mixture WAV.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// vocals, drums, bass or other.
        #[arg(long)]
        source: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional run config supplying chunking settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parameter counts per module and variant.
    Params {
        /// Defaults to the reference configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Finite-difference checks of every op and of the full model.
    Gradcheck {
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// SDR report and wall-clock budget check.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        budget_rtf: Option<f64>,
        /// Score the true stems instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn load_config(path: Option<&Path>, fallback: CliConfig) -> Result<CliConfig> {
    match path {
        Some(p) => CliConfig::load(p),
        None => Ok(fallback),
    }
}

/// Runs a parsed command; the return value is the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::MakeDataset { out, tracks, seconds, seed, sample_rate } => {
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let m = write_toy_dataset(&out, tracks, seconds, sample_rate, seed)?;
            println!("wrote {} tracks ({} stems) to {}", m.tracks.len(), 4 * m.tracks.len(), out.display());
            Ok(0)
        }
        Command::Train { config, data, out, resume } => {
            let cfg = CliConfig::load(&config)?;
            eprintln!("resolved config:\n{}", cfg.resolved_json());
            let data = data.or(cfg.io.data.clone()).ok_or_else(|| Error::Usage("--data is required".into()))?;
            let out = out.or(cfg.io.out.clone()).ok_or_else(|| Error::Usage("--out is required".into()))?;
            let dataset = load_dataset(&data, Split::Train)?;
            let opts = TrainOptions { out_dir: out.clone(), resume, prefetch: threads > 1, stop_at: None, verbose: true };
            let outcome = train_loop(&cfg, &dataset, &opts)?;
            let last = outcome.losses.last().map_or(f64::NAN, |l| l.1);
            println!("trained to step {}; last loss {last:.5}; checkpoints in {}", outcome.checkpoint.step, out.display());
            Ok(0)
        }
        Command::Separate { ckpt, input, source, out, config } => {
            let cond: Condition = source.parse().map_err(|_| {
                let names: Vec<&str> = Condition::ALL.iter().map(|c| c.name()).collect();
                Error::Usage(format!("unknown source {source:?}; valid sources: {}", names.join(", ")))
            })?;
            let ck = load_checkpoint(&ckpt, None)?;
            let sep = load_config(config.as_deref(), CliConfig::desk(ck.model.config().variant))?.eval.separation;
            let clip = read_wav(&input)?;
            if clip.num_channels() != ck.model.config().audio_channels {
                return Err(Error::Usage(format!(
                    "{} has {} channels, the model expects {}",
                    input.display(),
                    clip.num_channels(),
                    ck.model.config().audio_channels
                )));
            }
            let est = separate_track_threaded(&ck.model, &clip, cond, &sep, threads)?;
            write_wav(&out, &est)?;
            println!("wrote {} ({:.2} s)", out.display(), est.duration_seconds());
            Ok(0)
        }
        Command::Params { config, variant } => {
            let base = load_config(config.as_deref(), CliConfig::reference(Variant::Lightsaft))?.model;
            let variants: Vec<Variant> = match variant.unwrap_or(VariantArg::All) {
                VariantArg::All => Variant::ALL.to_vec(),
                VariantArg::Lasaft => vec![Variant::Lasaft],
                VariantArg::Lightsaft => vec![Variant::Lightsaft],
                VariantArg::LightsaftPlus => vec![Variant::LightsaftPlus],
            };
            let mut totals = Vec::new();
            for v in &variants {
                let b = param_breakdown(&base.with_variant(*v))?;
                println!("{v}\n{}", breakdown_table(&b));
                totals.push(b.total);
            }
            if let [a, b, c] = totals[..] {
                let verdict = OrderingVerdict::new([a, b, c]);
                print!("{}", verdict.summary());
                return Ok(if verdict.passed() { 0 } else { EXIT_RUNTIME });
            }
            Ok(0)
        }
        Command::Gradcheck { scale: Scale::Desk, seeds } => {
            let ok = run_gradcheck(seeds.max(1), &mut |line| println!("{line}"))?;
            Ok(if ok { 0 } else { EXIT_RUNTIME })
        }
        Command::Eval { ckpt, data, budget_rtf, oracle, config, json } => {
            let dataset = load_dataset(&data, Split::Test)?;
            let ck = ckpt.as_deref().map(|p| load_checkpoint(p, None)).transpose()?;
            let fallback = CliConfig::desk(ck.as_ref().map_or(Variant::LightsaftPlus, |c| c.model.config().variant));
            let cfg = load_config(config.as_deref(), fallback)?;
            let budget = budget_rtf.unwrap_or(cfg.eval.budget_rtf);
            if budget.is_nan() || budget < 0.0 {
                return Err(Error::Usage(format!("--budget-rtf {budget} must be >= 0")));
            }
            let mut ok = true;
            let mut rows: Vec<(String, Option<usize>, SdrReport)> = Vec::new();
            let mut budgets = Vec::new();
            if oracle {
                rows.push(("oracle".into(), None, evaluate_dataset(&OracleSeparator, &dataset, &Condition::ALL, cfg.eval.eps)?));
            }
            if let Some(ck) = &ck {
                let sep = ThreadedSeparator { model: &ck.model, config: cfg.eval.separation, threads };
                let report = evaluate_dataset(&sep as &dyn Separator<f32>, &dataset, &Condition::ALL, cfg.eval.eps)?;
                let params = ck.model.count_parameters().total;
                rows.push((ck.model.config().variant.name().into(), Some(params), report));
                let sr = dataset.tracks[0].sample_rate();
                let b = throughput_check(&ck.model, cfg.eval.throughput_seconds, sr, budget, &cfg.eval.separation, threads)?;
                ok &= b.passed;
                budgets.push(b);
            }
            let refs: Vec<(String, Option<usize>, &SdrReport)> = rows.iter().map(|(n, p, r)| (n.clone(), *p, r)).collect();
            print!("{}", sdr_table(&refs));
            if !budgets.is_empty() {
                print!("\n{}", budget_table(&budgets));
                println!("budget: {}", pf(ok));
            }
            if let Some(path) = json {
                let doc = serde_json::json!({
                    "sdr": rows.iter().map(|(n, p, r)| serde_json::json!({"model": n, "params": p, "report": r})).collect::<Vec<_>>(),
                    "budget": budgets,
                });
                let text = serde_json::to_string_pretty(&doc).expect("report serialises") + "\n";
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(if ok { 0 } else { EXIT_RUNTIME })
        }
    }
}

pub fn param_breakdown(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    Ok(Model::<f32>::build(cfg)?.count_parameters())
}

/// Seeds of the full-model check per variant: the trained variant gets the
/// full count.
pub fn model_seed_plan(seeds: u64) -> Vec<(Variant, u64)> {
    let mut plan: Vec<(Variant, u64)> = (0..seeds).map(|s| (Variant::LightsaftPlus, s)).collect();
    for v in [Variant::Lasaft, Variant::Lightsaft] {
        plan.extend((0..seeds.min(4)).map(|s| (v, s)));
    }
    plan
}

/// Every op at tolerance 1e-4 and the small full model at 1e-3, `seeds`
/// seeds each; `emit` receives one line per check.
pub fn run_gradcheck(seeds: u64, emit: &mut dyn FnMut(String)) -> Result<bool> {
    let mut all = true;
    for case in op_cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let r = case.check(seed, GradCheckOptions::default())?;
            worst = worst.max(r.max_rel_error);
        }
        let ok = worst <= 1e-4;
        all &= ok;
        emit(format!("op {:<32} seeds {seeds:>2}  max rel err {worst:.2e}  {}", case.name, pf(ok)));
    }
    let opts = GradCheckOptions { tol: 1e-3, max_elements: Some(6), ..Default::default() };
    for (v, seed) in model_seed_plan(seeds) {
        let r = grad_check_model(&ModelConfig::gradcheck(v), seed, 2, 6, opts)?;
        let refined: usize = r.entries.iter().map(|e| e.refined).sum();
        let checked: usize = r.entries.iter().map(|e| e.checked).sum();
        all &= r.passed;
        emit(format!(
            "model {:<29} seed {seed:>2}  max rel err {:.2e}  refined {refined}/{checked}  {}",
            v.name(),
            r.max_rel_error,
            pf(r.passed)
        ));
    }
    Ok(all)
}
