//! The staged pipeline driven from a config string, as the `lat` binary
//! does from a file. Uses tiny schedules, so the numbers are not meaningful;
//! the point is the run directory layout and manifests.

use anyhow::Result;
use lat::pipeline::{run_all, RunConfig, RunOptions, MANIFEST};

const CONFIG: &str = r#"
seed = 7
output_dir = "run"
target_space = "fine"

[datasets]
counts = [12, 12, 12]

[pseudo]
source = "oracle"

[lat.train]
iterations = 300

[downstream.train]
iterations = 300
"#;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::from_toml(CONFIG)?;
    cfg.resolve(dir.path());
    cfg.validate()?;
    print!("{}", run_all(&cfg, RunOptions { workers: 1, dump_attention: true })?);
    println!("\nconfig hash {}", cfg.hash());
    for entry in std::fs::read_dir(&cfg.output_dir)? {
        let stage = entry?.path();
        let files = std::fs::read_dir(&stage)?.count();
        let has_manifest = stage.join(MANIFEST).exists();
        println!("{:<12} {files} files, manifest: {has_manifest}", stage.file_name().unwrap().to_string_lossy());
    }
    Ok(())
}
