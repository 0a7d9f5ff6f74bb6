//! Noiseless check: oracle pseudo-labels in, transfer into the fine space,
//! compare against the known mapping.
//!
//! `cargo run --release --example oracle_transfer -- [iterations] [learning-rate]`

use anyhow::Result;
use lat::bench::{generate_benchmark, presets};
use lat::detect::NoiseModel;
use lat::experiment::{fit_lat, oracle_sets, recovery, transfer_datasets};
use lat::latcore::LatConfig;

fn main() -> Result<()> {
    let iterations = std::env::args().nth(1).map_or(Ok(2000), |s| s.parse())?;
    let bench = generate_benchmark(&presets::granularity(60), 3)?;
    let pseudo = oracle_sets(&bench, &NoiseModel::default(), 3, 0.5, 0.5)?;
    let mut cfg = LatConfig::default();
    cfg.train.iterations = iterations;
    if let Some(lr) = std::env::args().nth(2) {
        cfg.train.learning_rate = lr.parse()?;
    }
    let t = std::time::Instant::now();
    let (model, losses) = fit_lat(&bench, &pseudo, "fine", &cfg, 4)?;
    let tail = &losses[losses.len().saturating_sub(50)..];
    println!("trained in {:.1?}; mean loss over last 50 steps {:.4}", t.elapsed(), tail.iter().sum::<f64>() / tail.len() as f64);
    let ids: Vec<&str> = bench.datasets.iter().map(|d| d.dataset_id.as_str()).collect();
    for (id, tr) in transfer_datasets(&bench, &model, &pseudo, &ids, "fine", 4, false)? {
        let r = recovery(&bench, &id, &tr)?;
        println!(
            "{id:<10} accuracy {:.4}  mean IoU {:.4}  ({}/{} correct, {} matched)",
            r.accuracy, r.mean_iou, r.correct, r.oracle_count, r.matched
        );
    }
    Ok(())
}
