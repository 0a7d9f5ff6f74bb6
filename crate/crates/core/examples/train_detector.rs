//! Train a stage-1 detector on one synthetic dataset and report its AP.
//!
//! `cargo run --release --example train_detector -- [dataset] [iterations]`

use anyhow::Result;
use lat::bench::{generate_benchmark, presets};
use lat::detect::{evaluate_detector, train_toy_detector, DetSample, DetectorConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dataset = args.first().map_or("ds_fine", String::as_str);
    let bench = generate_benchmark(&presets::granularity(60), 7)?;
    let ds = bench.dataset(dataset)?;
    let space = bench.taxonomy().label_space(&ds.space_id)?;
    let renderer = bench.renderer();
    let mut cfg = DetectorConfig::default();
    if let Some(n) = args.get(1) {
        cfg.train.iterations = n.parse()?;
    }
    let samples: Vec<DetSample> = ds
        .train
        .iter()
        .map(|&i| DetSample {
            scene: &ds.scenes[i],
            labels: ds.record(i).in_space(&ds.space_id).to_vec(),
        })
        .collect();
    let t = std::time::Instant::now();
    let (det, losses) = train_toy_detector("det", &ds.dataset_id, &space, &[samples], None, &renderer, &cfg, 4)?;
    println!("trained {} steps in {:.1?}; final loss {:.4}", losses.len(), t.elapsed(), losses.last().unwrap_or(&0.0));
    for (name, split) in [("train", &ds.train), ("eval", &ds.eval)] {
        let images: Vec<_> = split
            .iter()
            .map(|&i| (&ds.scenes[i], ds.record(i).in_space(&ds.space_id)))
            .collect();
        let report = evaluate_detector(&det, &images, &renderer, 4)?;
        println!("{name}: AP50 {:.3}  mAP {:.3}", report.map50, report.map);
    }
    Ok(())
}
