//! Generate the granularity benchmark, write it to disk and show how the
//! three label spaces line up.
//!
//! `cargo run --release --example gen_bench -- [out-dir] [images-per-dataset]`

use anyhow::Result;
use lat::bench::{generate_benchmark, presets};
use lat::experiment::global_index;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "bench_out".into());
    let images = args.next().map_or(Ok(60), |s| s.parse())?;
    let bench = generate_benchmark(&presets::granularity(images), 1)?;
    bench.save(&out)?;
    for d in &bench.datasets {
        println!(
            "{:<10} space {:<7} {:>4} images {:>5} boxes ({} train / {} eval)",
            d.dataset_id,
            d.space_id,
            d.len(),
            d.corpus.annotation_count(),
            d.train.len(),
            d.eval.len()
        );
    }
    println!("\nglobal index:\n{}", global_index(&bench)?.mapping_tsv());
    println!("written to {out}/");
    Ok(())
}
