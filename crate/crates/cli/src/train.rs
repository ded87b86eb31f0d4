use std::path::{Path, PathBuf};

use flag_core::{Error, RunConfig, Simulation};
use serde_json::Value;

use crate::Failure;

/// Relative dataset paths resolve against the config's directory. Without
/// `--out` or `output_dir`, results go to `<config stem>-out` beside the
/// config.
pub fn run(config_path: &Path, out: Option<PathBuf>) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(config_path).map_err(|source| {
        Failure::setup(Error::Io {
            path: config_path.to_path_buf(),
            source,
        })
    })?;
    let mut config = RunConfig::from_json(&text).map_err(Failure::setup)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    config.resolve_paths(base);
    let stem = config_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run");
    let dir = out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| base.join(format!("{stem}-out")));
    config.output_dir = Some(dir.clone());
    config.validate().map_err(Failure::setup)?;

    let mut sim = Simulation::new(config).map_err(Failure::setup)?;
    let summary = sim.run().map_err(Failure::runtime)?;
    sim.write_outputs(&summary, &dir)
        .map_err(Failure::runtime)?;
    let mut value = serde_json::to_value(&summary).expect("summary serializes");
    value["output_dir"] = Value::String(dir.display().to_string());
    Ok(value)
}
