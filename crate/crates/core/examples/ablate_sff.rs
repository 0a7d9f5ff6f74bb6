//! Transfer quality and downstream AP for each fusion variant.
//!
//! `cargo run --release --example ablate_sff -- [downstream-iterations]`

use anyhow::Result;
use lat::bench::{generate_benchmark, presets};
use lat::detect::{DetectorConfig, NoiseModel};
use lat::experiment::{ablate_sff, oracle_sets, variant_table};
use lat::latcore::LatConfig;

fn main() -> Result<()> {
    let iterations = std::env::args().nth(1).map_or(Ok(1500), |s| s.parse())?;
    let bench = generate_benchmark(&presets::granularity(60), 4)?;
    let noise = NoiseModel { p_conf: 0.1, sigma_box: 0.03, p_drop: 0.05, p_spur: 0.0 };
    let pseudo = oracle_sets(&bench, &noise, 4, 0.5, 0.5)?;
    let mut det = DetectorConfig::default();
    det.train.iterations = iterations;
    let rows = ablate_sff(&bench, &pseudo, "ds_fine", &LatConfig::default(), &det, 1)?;
    print!("{}", variant_table(&rows));
    Ok(())
}
