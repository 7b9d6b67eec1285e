//! Prints the wall-clock budget table for the three desk-config variants.

use lightsaft::config::EvalConfig;
use lightsaft::infer::throughput_check;
use lightsaft::report::budget_table;
use lightsaft_core::model::{Model, ModelConfig, Variant};

fn main() -> lightsaft::Result<()> {
    let threads = std::env::args().nth(1).map_or(1, |a| a.parse().expect("thread count"));
    let eval = EvalConfig::default();
    let mut reports = Vec::new();
    for v in Variant::ALL {
        let model = Model::<f32>::build(&ModelConfig::desk(v))?;
        reports.push(throughput_check(&model, eval.throughput_seconds, eval.sample_rate, eval.budget_rtf, &eval.separation, threads)?);
    }
    print!("{}", budget_table(&reports));
    Ok(())
}
