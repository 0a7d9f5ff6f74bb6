//! Train one toy detector per dataset and label every image in every
//! foreign space. Short schedules keep this quick; expect modest AP.
//!
//! `cargo run --release --example pseudo_labels -- [iterations]`

use anyhow::Result;
use lat::bench::{generate_benchmark, presets};
use lat::detect::DetectorConfig;
use lat::experiment::{detector_sets, train_detectors};

fn main() -> Result<()> {
    let iterations = std::env::args().nth(1).map_or(Ok(1500), |s| s.parse())?;
    let bench = generate_benchmark(&presets::granularity(30), 2)?;
    let mut cfg = DetectorConfig::default();
    cfg.train.iterations = iterations;
    let trained = train_detectors(&bench, &cfg, 2)?;
    let detectors: Vec<_> = trained.into_iter().map(|(d, _)| d).collect();
    let sets = detector_sets(&bench, &detectors, 0.5, 0.5, 2)?;
    for s in &sets.sets {
        let mean = s.detections.values().flatten().map(|d| d.score).sum::<f64>() / s.len().max(1) as f64;
        println!("{:<10} in {:<7} {:>5} labels, mean score {mean:.3}  ({})", s.dataset_id, s.space_id, s.len(), s.source);
    }
    Ok(())
}
