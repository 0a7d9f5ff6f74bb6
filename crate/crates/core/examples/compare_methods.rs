//! Baseline vs pseudo-label vs transferred-label training on the
//! fine-grained dataset, with noisy oracle pseudo-labels.
//!
//! `cargo run --release --example compare_methods -- [seed] [downstream-iterations]`

use anyhow::Result;
use lat::bench::{generate_benchmark, presets};
use lat::detect::{DetectorConfig, NoiseModel};
use lat::experiment::{compare_methods, oracle_sets};
use lat::latcore::LatConfig;
use lat::train::Strategy;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(Ok(1), |s| s.parse())?;
    let iterations = args.next().map_or(Ok(3000), |s| s.parse())?;
    let mut bc = presets::granularity_counts([150, 150, 60]);
    bc.features.sibling_similarity = 0.6;
    bc.features.sigma = 0.1;
    let bench = generate_benchmark(&bc, seed)?;
    let noise = NoiseModel { p_conf: 0.1, sigma_box: 0.03, p_drop: 0.05, p_spur: 0.0 };
    let pseudo = oracle_sets(&bench, &noise, seed, 0.5, 0.5)?;
    let mut lat_cfg = LatConfig::default();
    lat_cfg.train.seed = seed;
    let mut det = DetectorConfig::default();
    det.train.iterations = iterations;
    det.train.learning_rate = 0.1;
    det.train.strategy = Strategy::Mixed;
    det.train.seed = seed;
    let c = compare_methods(&bench, &pseudo, "ds_fine", &lat_cfg, &det, 1)?;
    print!("{}", c.table());
    println!("ordered LAT > PL > baseline: {}", c.ordered());
    Ok(())
}
