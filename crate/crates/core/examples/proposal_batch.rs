//! Build the training proposals of one image: augmented GT in the native
//! space followed by pseudo-labels from the other spaces.

use anyhow::Result;
use lat::bench::{generate_benchmark, presets};
use lat::detect::NoiseModel;
use lat::experiment::{global_index, oracle_sets};
use lat::ppg::{build_batch, AugConfig};

fn main() -> Result<()> {
    let bench = generate_benchmark(&presets::granularity(8), 5)?;
    let index = global_index(&bench)?;
    let noise = NoiseModel { p_conf: 0.1, sigma_box: 0.03, p_drop: 0.05, p_spur: 0.0 };
    let pseudo = oracle_sets(&bench, &noise, 5, 0.5, 0.5)?;
    let ds = &bench.datasets[0];
    let record = ds.record(0);
    let batch = build_batch(record, &ds.space_id, &pseudo.for_image(&ds.dataset_id, &record.image_id), &index, &AugConfig::default(), 11)?;
    println!("{} ({}), native space {}", batch.image_id, batch.dataset_id, ds.space_id);
    for p in &batch.proposals {
        let (space, local) = index.to_local(p.global_class)?;
        let name = &index.space(space)?.class_names[local];
        let tag = match (p.is_gt, p.jittered) {
            (true, true) => "gt*",
            (true, false) => "gt",
            _ => "pl",
        };
        println!(
            "{tag:<4}{space:>7}/{name:<12} conf {:.2}  [{:6.1} {:6.1} {:6.1} {:6.1}]",
            p.confidence, p.bbox.x_min, p.bbox.y_min, p.bbox.x_max, p.bbox.y_max
        );
    }
    println!("(* = jittered)");
    Ok(())
}
