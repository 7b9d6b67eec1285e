//! Writes the resolved desk and reference run configs for every variant into
//! the given directory (default `configs`).

use std::fs;
use std::path::PathBuf;

use lightsaft::config::CliConfig;
use lightsaft_core::model::Variant;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "configs".into()));
    fs::create_dir_all(&dir)?;
    for v in Variant::ALL {
        fs::write(dir.join(format!("desk_{v}.json")), CliConfig::desk(v).resolved_json() + "\n")?;
        fs::write(dir.join(format!("reference_{v}.json")), CliConfig::reference(v).resolved_json() + "\n")?;
    }
    Ok(())
}
