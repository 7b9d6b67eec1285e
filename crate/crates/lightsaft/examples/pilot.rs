//! Runs the seeded toy separation pilot and prints the loss ratio and the
//! per-track SDR matrices. Optional argument: output directory.

use std::path::PathBuf;

use lightsaft::pilot::{run_toy, toy_config, ToyRun};

fn main() -> lightsaft::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "pilot_run".into()));
    let run = ToyRun::default();
    let outcome = run_toy(&run, &toy_config(), &out, true)?;
    println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serialises"));
    println!("loss: {}  separation: {}", outcome.loss_passed, outcome.separation_passed);
    Ok(())
}
